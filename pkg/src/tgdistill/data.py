"""Dataset manifests, the synthetic moving-shapes dataset, and batch assembly.

The synthetic dataset is a desk-scale stand-in for a real action corpus:
each class is a motion pattern (one of 8 headings at one of 2 speeds) of a
single shape drifting toroidally across the frame, while shape kind, colors,
size, start position, and static distractors are randomized nuisances. The
label is a pure function of motion, so temporal gradients carry the whole
signal and appearance is a distractor.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .augment import AugmentationRecord, StrongAugPolicy, apply_strong, apply_weak, sample_weak_record
from .modalities import (
    ClipSamplingSpec,
    _as_rng,
    load_video,
    normalize_tg,
    sample_training_clip,
    write_packed_video,
)

HEADINGS = ("e", "ne", "n", "nw", "w", "sw", "s", "se")
SPEEDS = ("slow", "fast")
SPEED_PX = {"slow": 1.0, "fast": 2.5}
MAX_CLASSES = len(HEADINGS) * len(SPEEDS)

# canonical class order: both speeds of a heading before the next heading
CLASS_TABLE = [(h, s) for h in HEADINGS for s in SPEEDS]


def class_name(class_id: int) -> str:
    h, s = CLASS_TABLE[class_id]
    return f"{h}_{s}"


@dataclass
class ManifestEntry:
    video_id: str
    path: str
    class_id: int
    num_frames: int


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    num_classes: int
    labeled_ids: set[str] = field(default_factory=set)
    seed: int = 0
    root: Path = Path(".")

    def __post_init__(self) -> None:
        ids = {e.video_id for e in self.entries}
        if len(ids) != len(self.entries):
            raise ValueError("duplicate video ids in manifest")
        stray = self.labeled_ids - ids
        if stray:
            raise ValueError(f"labeled ids not in manifest: {sorted(stray)[:5]}")

    @property
    def unlabeled_ids(self) -> set[str]:
        return {e.video_id for e in self.entries} - self.labeled_ids

    def by_id(self, video_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.video_id == video_id:
                return e
        raise KeyError(video_id)

    def video_path(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    lines = [f"{e.video_id}\t{e.path}\t{e.class_id}\t{e.num_frames}" for e in manifest.entries]
    path.write_text("\n".join(lines) + "\n")
    if manifest.labeled_ids:
        sidecar = path.with_suffix(path.suffix + ".labeled")
        sidecar.write_text("\n".join(sorted(manifest.labeled_ids)) + "\n")


def load_manifest(path: str | Path, num_classes: int | None = None) -> DatasetManifest:
    path = Path(path)
    entries = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vid, rel, cls, nf = line.split("\t")
        entries.append(ManifestEntry(vid, rel, int(cls), int(nf)))
    if not entries:
        raise ValueError(f"{path}: empty manifest")
    if num_classes is None:
        num_classes = max(e.class_id for e in entries) + 1
    labeled: set[str] = set()
    sidecar = path.with_suffix(path.suffix + ".labeled")
    if sidecar.exists():
        labeled = {l.strip() for l in sidecar.read_text().splitlines() if l.strip()}
    return DatasetManifest(entries, num_classes, labeled, root=path.parent)


def make_split(manifest: DatasetManifest, *, per_class_count: int | None = None,
               labeled_ratio: float | None = None, balanced: bool = True,
               seed: int = 0) -> DatasetManifest:
    """Choose the labeled subset deterministically from a seed.

    Balanced mode picks the same number of videos from every class (an
    explicit count, or round(ratio * class size)); unbalanced ratio mode
    samples across the whole manifest.
    """
    if (per_class_count is None) == (labeled_ratio is None):
        raise ValueError("give exactly one of per_class_count / labeled_ratio")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[str]] = {}
    for e in manifest.entries:
        by_class.setdefault(e.class_id, []).append(e.video_id)
    for ids in by_class.values():
        ids.sort()
    labeled: set[str] = set()
    if balanced:
        for cls, ids in sorted(by_class.items()):
            if per_class_count is not None:
                k = per_class_count
            else:
                k = max(1, round(labeled_ratio * len(ids)))
            if k > len(ids):
                raise ValueError(f"class {cls} has {len(ids)} videos, cannot label {k}")
            labeled.update(str(v) for v in rng.choice(ids, size=k, replace=False))
    else:
        all_ids = sorted(e.video_id for e in manifest.entries)
        k = per_class_count if per_class_count is not None else round(labeled_ratio * len(all_ids))
        if k > len(all_ids):
            raise ValueError(f"cannot label {k} of {len(all_ids)} videos")
        labeled.update(str(v) for v in rng.choice(all_ids, size=k, replace=False))
    return DatasetManifest(manifest.entries, manifest.num_classes, labeled,
                           seed=seed, root=manifest.root)


# ---------------------------------------------------------------------------
# Synthetic moving-shapes dataset
# ---------------------------------------------------------------------------

_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class VideoRecipe:
    """Everything needed to render one synthetic video deterministically."""

    class_id: int
    kind: str                      # "disc" or "square"
    radius: float
    start_xy: tuple[float, float]
    shape_color: tuple[float, float, float]
    bg_color: tuple[float, float, float]
    distractors: list[tuple[int, int, int, int, tuple[float, float, float]]]

    @property
    def velocity(self) -> tuple[float, float]:
        heading, speed = CLASS_TABLE[self.class_id]
        theta = math.radians(45.0 * HEADINGS.index(heading))
        px = SPEED_PX[speed]
        return px * math.cos(theta), -px * math.sin(theta)


def sample_recipe(class_id: int, geometry: tuple[int, int], rng) -> VideoRecipe:
    rng = _as_rng(rng)
    h, w = geometry
    kind = "disc" if rng.uniform() < 0.5 else "square"
    radius = rng.uniform(0.12, 0.20) * min(h, w)
    start = (rng.uniform(0, w), rng.uniform(0, h))
    while True:
        shape = tuple(rng.uniform(0, 255, size=3))
        bg = tuple(rng.uniform(0, 255, size=3))
        if abs(np.dot(shape, _LUMA) - np.dot(bg, _LUMA)) >= 40.0:
            break
    distractors = []
    for _ in range(2):
        dh = int(rng.integers(2, max(3, h // 8)))
        dw = int(rng.integers(2, max(3, w // 8)))
        top = int(rng.integers(0, h - dh))
        left = int(rng.integers(0, w - dw))
        color = tuple(rng.uniform(0, 255, size=3))
        distractors.append((top, left, dh, dw, color))
    return VideoRecipe(class_id, kind, radius, start, shape, bg, distractors)


def _coverage(recipe: VideoRecipe, geometry: tuple[int, int], t: int) -> np.ndarray:
    """Anti-aliased shape coverage in [0, 1] at frame t, toroidal positions."""
    h, w = geometry
    vx, vy = recipe.velocity
    cx = (recipe.start_xy[0] + vx * t) % w
    cy = (recipe.start_xy[1] + vy * t) % h
    ys, xs = np.mgrid[0:h, 0:w]
    dx = (xs - cx + w / 2) % w - w / 2
    dy = (ys - cy + h / 2) % h - h / 2
    if recipe.kind == "disc":
        dist = np.hypot(dx, dy)
        return np.clip(recipe.radius + 0.5 - dist, 0.0, 1.0)
    cov_x = np.clip(recipe.radius + 0.5 - np.abs(dx), 0.0, 1.0)
    cov_y = np.clip(recipe.radius + 0.5 - np.abs(dy), 0.0, 1.0)
    return cov_x * cov_y


def shape_mask(recipe: VideoRecipe, geometry: tuple[int, int], t: int) -> np.ndarray:
    return _coverage(recipe, geometry, t) > 0.5


def render_video(recipe: VideoRecipe, geometry: tuple[int, int], num_frames: int) -> np.ndarray:
    """Render to uint8 frames [T, H, W, 3]."""
    h, w = geometry
    base = np.empty((h, w, 3), dtype=np.float64)
    base[:] = recipe.bg_color
    for top, left, dh, dw, color in recipe.distractors:
        base[top:top + dh, left:left + dw] = color
    frames = np.empty((num_frames, h, w, 3), dtype=np.uint8)
    shape_color = np.asarray(recipe.shape_color)
    for t in range(num_frames):
        cov = _coverage(recipe, geometry, t)[..., None]
        frame = base * (1.0 - cov) + shape_color * cov
        frames[t] = np.clip(np.round(frame), 0, 255).astype(np.uint8)
    return frames


def generate_synthetic_dataset(out_dir: str | Path, *, classes: int = 16,
                               per_class: int = 20, test_per_class: int = 5,
                               num_frames: int = 24, height: int = 48, width: int = 56,
                               seed: int = 0) -> tuple[DatasetManifest, DatasetManifest]:
    """Render the dataset to disk and return (train, test) manifests."""
    if height < 32 or width < 32:
        raise ValueError(f"geometry must be at least 32x32, got {height}x{width}")
    if num_frames < 16:
        raise ValueError(f"need at least 16 frames, got {num_frames}")
    if not 1 <= classes <= MAX_CLASSES:
        raise ValueError(f"classes must be in [1, {MAX_CLASSES}]")
    out_dir = Path(out_dir)
    (out_dir / "videos").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    geometry = (height, width)
    splits = {"train": per_class, "test": test_per_class}
    manifests = {}
    for split, count in splits.items():
        entries = []
        for cls in range(classes):
            for j in range(count):
                vid = f"{split}_{class_name(cls)}_{j:03d}"
                recipe = sample_recipe(cls, geometry, rng)
                frames = render_video(recipe, geometry, num_frames)
                rel = f"videos/{vid}.vpak"
                write_packed_video(out_dir / rel, frames)
                entries.append(ManifestEntry(vid, rel, cls, num_frames))
        manifest = DatasetManifest(entries, classes, root=out_dir)
        save_manifest(manifest, out_dir / f"{split}_manifest.tsv")
        manifests[split] = manifest
    return manifests["train"], manifests["test"]


def motion_displacement_features(frames: np.ndarray, tg_stride: int = 1) -> np.ndarray:
    """(mean dx, mean dy, mean speed) from phase correlation of TG frames.

    An independent, CNN-free readout of the motion class: consecutive TG
    frames of a rigidly drifting scene are circular shifts of each other, so
    their phase-correlation peak recovers the per-frame displacement even
    across the toroidal wrap.
    """
    frames = np.asarray(frames, dtype=np.float64)
    tg = frames[:-tg_stride] - frames[tg_stride:]
    gray = np.abs(tg @ _LUMA).astype(np.float32)
    shifts = []
    for t in range(gray.shape[0] - 1):
        (dx, dy), _ = cv2.phaseCorrelate(gray[t], gray[t + 1])
        shifts.append((dx, dy))
    shifts = np.asarray(shifts)
    mean = shifts.mean(axis=0)
    speed = float(np.hypot(shifts[:, 0], shifts[:, 1]).mean())
    return np.array([mean[0], mean[1], speed])


# ---------------------------------------------------------------------------
# Batch assembly
# ---------------------------------------------------------------------------

@dataclass
class SemiBatch:
    """One optimization step's inputs, all clips as [B, T, Hc, Wc, 3] in (0, 255)."""

    labeled_rgb_weak: np.ndarray
    labeled_tg_weak: np.ndarray
    labels_onehot: np.ndarray
    unlabeled_rgb_weak: np.ndarray
    unlabeled_rgb_strong: np.ndarray
    unlabeled_tg_weak: np.ndarray
    unlabeled_tg_strong: np.ndarray
    labeled_records: list[AugmentationRecord]
    unlabeled_records: list[AugmentationRecord]
    unlabeled_true_labels: np.ndarray  # hidden ground truth, diagnostics only

    @property
    def batch_labeled(self) -> int:
        return self.labeled_rgb_weak.shape[0]

    @property
    def batch_unlabeled(self) -> int:
        return self.unlabeled_rgb_weak.shape[0]


@dataclass
class AugmentSettings:
    short_side: int = 256
    crop_size: int = 224
    area_min: float = 0.3
    area_max: float = 1.0
    strong_num_ops: int = 2
    strong_magnitude: int = 5
    strong_ops: tuple[str, ...] = ()

    def policy(self) -> StrongAugPolicy:
        pool = self.strong_ops if self.strong_ops else None
        if pool:
            return StrongAugPolicy(op_pool=pool, num_ops=self.strong_num_ops,
                                   magnitude=self.strong_magnitude)
        return StrongAugPolicy(num_ops=self.strong_num_ops, magnitude=self.strong_magnitude)


class _ShuffledCycle:
    """Endless shuffled stream over a fixed id list; reshuffles per pass."""

    def __init__(self, ids: list[str], rng: np.random.Generator):
        if not ids:
            raise ValueError("cannot cycle over an empty id list")
        self.ids = list(ids)
        self.rng = rng
        self.queue: list[str] = []

    def take(self, n: int) -> list[str]:
        out = []
        while len(out) < n:
            if not self.queue:
                order = self.rng.permutation(len(self.ids))
                self.queue = [self.ids[i] for i in order]
            out.append(self.queue.pop())
        return out


class SemiBatchSampler:
    """Assembles SemiBatches from a manifest with the shared weak-record contract.

    One epoch is one pass over the unlabeled set; labeled videos cycle with
    reshuffling at whatever pace the labeled batch size dictates.
    """

    def __init__(self, manifest: DatasetManifest, clip_spec: ClipSamplingSpec,
                 augment: AugmentSettings, batch_labeled: int, batch_unlabeled: int,
                 seed: int = 0):
        if not manifest.labeled_ids:
            raise ValueError("manifest has no labeled videos")
        if not manifest.unlabeled_ids:
            raise ValueError("manifest has no unlabeled videos")
        self.manifest = manifest
        self.clip_spec = clip_spec
        self.augment = augment
        self.batch_labeled = batch_labeled
        self.batch_unlabeled = batch_unlabeled
        self.rng = np.random.default_rng(seed)
        self.labeled = _ShuffledCycle(sorted(manifest.labeled_ids), self.rng)
        self.unlabeled = _ShuffledCycle(sorted(manifest.unlabeled_ids), self.rng)
        self._cache: dict[str, np.ndarray] = {}

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.manifest.unlabeled_ids) / self.batch_unlabeled)

    def _frames(self, entry: ManifestEntry) -> np.ndarray:
        cached = self._cache.get(entry.video_id)
        if cached is None:
            frames = load_video(self.manifest.video_path(entry))
            as_u8 = frames.astype(np.uint8)
            cached = as_u8 if np.array_equal(as_u8.astype(np.float64), frames) \
                else frames.astype(np.float32)
            self._cache[entry.video_id] = cached
        return cached.astype(np.float64)

    def _views(self, entry: ManifestEntry, strong: bool):
        frames = self._frames(entry)
        rgb_raw, tg_raw = sample_training_clip(frames, self.clip_spec, self.rng,
                                               source_id=entry.video_id)
        tg_norm = normalize_tg(tg_raw)
        record = sample_weak_record(rgb_raw.spatial_shape, self.rng,
                                    short_side=self.augment.short_side,
                                    output_size=self.augment.crop_size,
                                    area_range=(self.augment.area_min, self.augment.area_max))
        rgb_weak = apply_weak(rgb_raw, record)
        tg_weak = apply_weak(tg_norm, record)
        if not strong:
            return rgb_weak, tg_weak, record, None, None
        policy = self.augment.policy()
        strong_record_rgb = sample_weak_record(rgb_raw.spatial_shape, self.rng,
                                               short_side=self.augment.short_side,
                                               output_size=self.augment.crop_size,
                                               area_range=(self.augment.area_min,
                                                           self.augment.area_max))
        strong_record_tg = sample_weak_record(rgb_raw.spatial_shape, self.rng,
                                              short_side=self.augment.short_side,
                                              output_size=self.augment.crop_size,
                                              area_range=(self.augment.area_min,
                                                          self.augment.area_max))
        rgb_strong = apply_strong(apply_weak(rgb_raw, strong_record_rgb), policy, self.rng)
        tg_strong = apply_strong(apply_weak(tg_norm, strong_record_tg), policy, self.rng)
        return rgb_weak, tg_weak, record, rgb_strong, tg_strong

    def next_batch(self) -> SemiBatch:
        lab_ids = self.labeled.take(self.batch_labeled)
        unlab_ids = self.unlabeled.take(self.batch_unlabeled)
        k = self.manifest.num_classes

        lab_rgb, lab_tg, lab_records, onehot = [], [], [], []
        for vid in lab_ids:
            entry = self.manifest.by_id(vid)
            rgb_w, tg_w, record, _, _ = self._views(entry, strong=False)
            lab_rgb.append(rgb_w.frames)
            lab_tg.append(tg_w.frames)
            lab_records.append(record)
            row = np.zeros(k)
            row[entry.class_id] = 1.0
            onehot.append(row)

        un_rgb_w, un_tg_w, un_rgb_s, un_tg_s, un_records, true_labels = [], [], [], [], [], []
        for vid in unlab_ids:
            entry = self.manifest.by_id(vid)
            rgb_w, tg_w, record, rgb_s, tg_s = self._views(entry, strong=True)
            un_rgb_w.append(rgb_w.frames)
            un_tg_w.append(tg_w.frames)
            un_rgb_s.append(rgb_s.frames)
            un_tg_s.append(tg_s.frames)
            un_records.append(record)
            true_labels.append(entry.class_id)

        return SemiBatch(
            labeled_rgb_weak=np.stack(lab_rgb),
            labeled_tg_weak=np.stack(lab_tg),
            labels_onehot=np.stack(onehot),
            unlabeled_rgb_weak=np.stack(un_rgb_w),
            unlabeled_rgb_strong=np.stack(un_rgb_s),
            unlabeled_tg_weak=np.stack(un_tg_w),
            unlabeled_tg_strong=np.stack(un_tg_s),
            labeled_records=lab_records,
            unlabeled_records=un_records,
            unlabeled_true_labels=np.asarray(true_labels, dtype=np.int64),
        )
