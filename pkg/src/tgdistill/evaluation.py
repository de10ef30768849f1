"""Multi-clip multi-crop inference, accuracy metrics, and robustness checks."""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import cv2
import numpy as np
import torch

from .augment import CORRUPTION_KINDS, corrupt
from .data import DatasetManifest
from .modalities import ClipSamplingSpec, load_video, normalize_tg, sample_eval_clips
from .model import ActionModel, prepare_input


@dataclass
class EvalSpec:
    clips_per_video: int = 10
    crops_per_clip: int = 3
    crop_size: int = 256
    metrics: tuple[str, ...] = ("top1", "top5")
    corruption: str | None = None

    def __post_init__(self) -> None:
        if self.clips_per_video < 1:
            raise ValueError("clips_per_video must be >= 1")
        if self.crops_per_clip not in (1, 3):
            raise ValueError("crops_per_clip must be 1 or 3")
        if self.crop_size < 1:
            raise ValueError("crop_size must be >= 1")
        if self.corruption is not None and self.corruption not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption {self.corruption!r}")


def _resize_short_side(frames: np.ndarray, size: int) -> np.ndarray:
    t, h, w, c = frames.shape
    if h <= w:
        nh, nw = size, max(size, round(w * size / h))
    else:
        nh, nw = max(size, round(h * size / w)), size
    if (nh, nw) == (h, w):
        return frames
    out = np.empty((t, nh, nw, c), dtype=frames.dtype)
    for i in range(t):
        out[i] = cv2.resize(frames[i], (nw, nh), interpolation=cv2.INTER_LINEAR)
    return out


def spatial_crops(frames: np.ndarray, crop_size: int, crops: int) -> list[np.ndarray]:
    """Square crops evenly spaced along the longer axis after a short-side resize."""
    frames = _resize_short_side(frames, crop_size)
    h, w = frames.shape[1:3]
    long_extra = max(h, w) - crop_size
    if crops == 1:
        offsets = [long_extra // 2]
    else:
        offsets = [0, long_extra // 2, long_extra]
    views = []
    for off in offsets:
        if w >= h:
            views.append(frames[:, :crop_size, off:off + crop_size, :])
        else:
            views.append(frames[:, off:off + crop_size, :crop_size, :])
    return views


def _video_views(frames: np.ndarray, spec: EvalSpec, clip_spec: ClipSamplingSpec,
                 modality: str, corruption: str | None, rng_seed: int) -> np.ndarray:
    pairs = sample_eval_clips(frames, clip_spec)
    views = []
    for rgb_clip, tg_clip in pairs:
        clip = rgb_clip if modality == "rgb" else normalize_tg(tg_clip)
        if corruption is not None:
            if modality != "rgb":
                raise ValueError("corruptions are defined on the RGB modality")
            clip = corrupt(clip, corruption, np.random.default_rng(rng_seed))
        views.extend(spatial_crops(clip.frames, spec.crop_size, spec.crops_per_clip))
    return np.stack(views)


def _corruption_seed(base_seed: int, video_id: str, kind: str) -> int:
    return (base_seed * 1000003 + zlib.crc32(f"{video_id}:{kind}".encode())) % (2**31)


def evaluate(model: ActionModel, manifest: DatasetManifest, spec: EvalSpec,
             clip_spec: ClipSamplingSpec, modality: str = "rgb",
             corruption: str | None = None, seed: int = 0) -> dict:
    """Average softmax probabilities over all clip/crop views, then argmax.

    Deterministic: clip starts and crop placements carry no randomness, and
    test-time corruptions derive their strength from (seed, video_id, kind).
    """
    if not manifest.entries:
        raise ValueError("empty evaluation split")
    corruption = corruption if corruption is not None else spec.corruption
    was_training = model.training
    model.eval()
    top1_hits = 0
    top5_hits = 0
    k = manifest.num_classes
    with torch.no_grad():
        for entry in manifest.entries:
            frames = load_video(manifest.video_path(entry))
            rng_seed = _corruption_seed(seed, entry.video_id, corruption or "")
            views = _video_views(frames, spec, clip_spec, modality, corruption, rng_seed)
            probs = model(prepare_input(views)).probabilities
            sums = probs.sum(dim=1)
            assert torch.allclose(sums, torch.ones_like(sums), atol=1e-4), \
                "view scores must be probabilities before averaging"
            avg = probs.mean(dim=0)
            order = torch.argsort(avg, descending=True)
            top1_hits += int(order[0]) == entry.class_id
            top5_hits += entry.class_id in order[: min(5, k)].tolist()
    model.train(was_training)
    n = len(manifest.entries)
    return {
        "top1": top1_hits / n,
        "top5": top5_hits / n,
        "num_videos": n,
        "modality": modality,
        "corruption": corruption,
    }


def robustness_suite(model: ActionModel, manifest: DatasetManifest, spec: EvalSpec,
                     clip_spec: ClipSamplingSpec, kinds: tuple[str, ...],
                     seed: int = 0) -> list[dict]:
    """Clean accuracy plus per-corruption accuracy and drop."""
    for kind in kinds:
        if kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption {kind!r}; choose from {CORRUPTION_KINDS}")
    clean = evaluate(model, manifest, spec, clip_spec, seed=seed)
    rows = [{"corruption": "none", "top1": clean["top1"], "top5": clean["top5"], "drop": 0.0}]
    for kind in kinds:
        r = evaluate(model, manifest, spec, clip_spec, corruption=kind, seed=seed)
        rows.append({"corruption": kind, "top1": r["top1"], "top5": r["top5"],
                     "drop": clean["top1"] - r["top1"]})
    return rows


def train_test_gap(model: ActionModel, train_manifest: DatasetManifest,
                   test_manifest: DatasetManifest, spec: EvalSpec,
                   clip_spec: ClipSamplingSpec, modality: str = "rgb") -> dict:
    """Accuracy on the training split, the test split, and their difference."""
    train_acc = evaluate(model, train_manifest, spec, clip_spec, modality=modality)["top1"]
    test_acc = evaluate(model, test_manifest, spec, clip_spec, modality=modality)["top1"]
    return {"train_top1": train_acc, "test_top1": test_acc, "gap": train_acc - test_acc}
