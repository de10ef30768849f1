"""Temporal-gradient computation, clip sampling, and raw video IO.

A video flows through the pipeline as a ``VideoClip``: a float frame stack
tagged with its modality and value range. RGB clips live in (0, 255). A raw
temporal-gradient (TG) clip, the elementwise difference between two frames a
fixed stride apart, lives in (-255, 255) and is mapped into (0, 255) by
``normalize_tg`` before it enters any augmentation or model.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

RGB = "rgb"
TG = "tg"

RGB_RANGE = (0.0, 255.0)
TG_RAW_RANGE = (-255.0, 255.0)

_MAGIC = b"VPAK"
_DTYPE_CODES = {0: np.uint8, 1: np.float32, 2: np.float64}
_DTYPE_TO_CODE = {np.dtype(v): k for k, v in _DTYPE_CODES.items()}


@dataclass
class VideoClip:
    """A [T, H, W, C] frame stack with modality tag and value range."""

    frames: np.ndarray
    modality: str
    value_range: tuple[float, float]
    source_id: str = ""
    start_frame: int = 0

    def __post_init__(self) -> None:
        if self.frames.ndim != 4:
            raise ValueError(f"frames must be [T, H, W, C], got shape {self.frames.shape}")
        t, h, w, c = self.frames.shape
        if t < 1 or h < 1 or w < 1:
            raise ValueError(f"degenerate clip shape {self.frames.shape}")
        if c != 3:
            raise ValueError(f"expected 3 channels, got {c}")
        if self.modality not in (RGB, TG):
            raise ValueError(f"unknown modality {self.modality!r}")
        lo, hi = self.value_range
        fmin, fmax = float(self.frames.min()), float(self.frames.max())
        if fmin < lo - 1e-6 or fmax > hi + 1e-6:
            raise ValueError(
                f"frame values [{fmin}, {fmax}] outside declared range [{lo}, {hi}]"
            )

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    def with_frames(self, frames: np.ndarray) -> "VideoClip":
        return VideoClip(frames, self.modality, self.value_range, self.source_id, self.start_frame)


@dataclass
class ClipSamplingSpec:
    """How clips are cut out of a raw video.

    A training clip takes ``frames_per_clip`` frames at ``frame_stride``,
    so it covers ``frames_per_clip * frame_stride`` raw frames, and needs
    ``tg_stride`` extra trailing frames for the temporal gradient.
    """

    frames_per_clip: int = 8
    frame_stride: int = 8
    tg_stride: int = 1
    clips_per_video_eval: int = 10

    def __post_init__(self) -> None:
        if self.frames_per_clip < 1 or self.frame_stride < 1:
            raise ValueError("frames_per_clip and frame_stride must be >= 1")
        if self.tg_stride < 1:
            raise ValueError("tg_stride must be >= 1")
        if self.clips_per_video_eval < 1:
            raise ValueError("clips_per_video_eval must be >= 1")

    @property
    def span(self) -> int:
        """Raw frames covered by the sampled clip, excluding the TG reserve."""
        return self.frames_per_clip * self.frame_stride

    @property
    def required_frames(self) -> int:
        return self.span + self.tg_stride


def compute_temporal_gradient(rgb_frames: np.ndarray, tg_stride: int,
                              source_id: str = "", start_frame: int = 0) -> VideoClip:
    """Frame difference clip: output[t] = frames[t] - frames[t + tg_stride].

    Input must carry at least ``tg_stride`` more frames than the desired
    output length; the result has ``len(rgb_frames) - tg_stride`` frames in
    the raw (-255, 255) range.
    """
    if tg_stride < 1:
        raise ValueError("tg_stride must be >= 1")
    rgb_frames = np.asarray(rgb_frames, dtype=np.float64)
    if rgb_frames.shape[0] <= tg_stride:
        raise ValueError(
            f"not enough frames for stride {tg_stride}: "
            f"got {rgb_frames.shape[0]}, need at least {tg_stride + 1}"
        )
    diff = rgb_frames[:-tg_stride] - rgb_frames[tg_stride:]
    return VideoClip(diff, TG, TG_RAW_RANGE, source_id=source_id, start_frame=start_frame)


def normalize_tg(tg: VideoClip) -> VideoClip:
    """Map a raw TG clip from (-255, 255) into (0, 255) via (v + 255) / 2."""
    if tg.modality != TG:
        raise ValueError(f"normalize_tg expects a TG clip, got {tg.modality!r}")
    frames = (tg.frames + 255.0) / 2.0
    return VideoClip(frames, TG, RGB_RANGE, tg.source_id, tg.start_frame)


def denormalize_tg(tg: VideoClip) -> VideoClip:
    """Inverse of ``normalize_tg``: v -> 2v - 255."""
    if tg.modality != TG:
        raise ValueError(f"denormalize_tg expects a TG clip, got {tg.modality!r}")
    frames = tg.frames * 2.0 - 255.0
    return VideoClip(frames, TG, TG_RAW_RANGE, tg.source_id, tg.start_frame)


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _gather_window(frames: np.ndarray, start: int, length: int) -> np.ndarray:
    """Take ``length`` frames from ``start``, repeating the last frame past the end."""
    idx = np.minimum(np.arange(start, start + length), frames.shape[0] - 1)
    return frames[idx]


def _clip_pair_at(frames: np.ndarray, start: int, spec: ClipSamplingSpec,
                  source_id: str) -> tuple[VideoClip, VideoClip]:
    """Strided RGB clip plus its frame-aligned TG clip from one raw window.

    The TG is computed densely over the covered window from adjacent raw
    frames (stride ``tg_stride``) and then subsampled at the same strided
    positions as the RGB frames, so the two clips are aligned frame-for-frame.
    """
    window = _gather_window(frames, start, spec.required_frames)
    picks = np.arange(spec.frames_per_clip) * spec.frame_stride
    rgb = VideoClip(window[picks].astype(np.float64), RGB, RGB_RANGE,
                    source_id=source_id, start_frame=start)
    dense_tg = window[:-spec.tg_stride] - window[spec.tg_stride:]
    tg = VideoClip(dense_tg[picks], TG, TG_RAW_RANGE,
                   source_id=source_id, start_frame=start)
    return rgb, tg


def sample_training_clip(frames: np.ndarray, spec: ClipSamplingSpec, rng,
                         source_id: str = "") -> tuple[VideoClip, VideoClip]:
    """Draw one random training clip pair (RGB, raw TG) from a raw video.

    The start index is uniform over every position where the full window
    (span plus TG reserve) fits; shorter videos fall back to start 0 with the
    trailing frames repeated.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[0] == 0:
        raise ValueError("empty video")
    rng = _as_rng(rng)
    max_start = frames.shape[0] - spec.required_frames
    start = int(rng.integers(0, max_start + 1)) if max_start > 0 else 0
    return _clip_pair_at(frames, start, spec, source_id)


def sample_eval_clips(frames: np.ndarray, spec: ClipSamplingSpec,
                      source_id: str = "") -> list[tuple[VideoClip, VideoClip]]:
    """Deterministic clip pairs with starts uniformly spaced over the video."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[0] == 0:
        raise ValueError("empty video")
    m = spec.clips_per_video_eval
    max_start = max(0, frames.shape[0] - spec.span)
    if m == 1:
        starts = [round(max_start / 2)]
    else:
        starts = [round(i * max_start / (m - 1)) for i in range(m)]
    return [_clip_pair_at(frames, s, spec, source_id) for s in starts]


# ---------------------------------------------------------------------------
# Raw video IO: packed binary files and directories of numbered frame images.
# Both readers must yield identical float arrays for identical content.
# ---------------------------------------------------------------------------

def write_packed_video(path: str | Path, frames: np.ndarray) -> None:
    """Write frames as magic + (T, H, W, C, dtype code) header + row-major data."""
    frames = np.ascontiguousarray(frames)
    if frames.ndim != 4:
        raise ValueError(f"frames must be [T, H, W, C], got shape {frames.shape}")
    code = _DTYPE_TO_CODE.get(frames.dtype)
    if code is None:
        raise ValueError(f"unsupported dtype {frames.dtype}; use uint8/float32/float64")
    header = struct.pack("<4IB", *frames.shape, code)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(header)
        f.write(frames.tobytes())


def read_packed_video(path: str | Path) -> np.ndarray:
    """Read a packed video file back as float64 frames in their stored values."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, not a packed video")
        t, h, w, c, code = struct.unpack("<4IB", f.read(17))
        dtype = _DTYPE_CODES.get(code)
        if dtype is None:
            raise ValueError(f"{path}: unknown dtype code {code}")
        data = np.frombuffer(f.read(), dtype=dtype)
    expected = t * h * w * c
    if data.size != expected:
        raise ValueError(f"{path}: truncated payload ({data.size} values, expected {expected})")
    return data.reshape(t, h, w, c).astype(np.float64)


def write_frame_dir(path: str | Path, frames: np.ndarray) -> None:
    """Write frames as numbered PNG images under ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    frames = np.asarray(frames)
    if frames.dtype != np.uint8:
        frames = np.clip(np.round(frames), 0, 255).astype(np.uint8)
    for t in range(frames.shape[0]):
        Image.fromarray(frames[t]).save(path / f"{t:06d}.png")


def read_frame_dir(path: str | Path) -> np.ndarray:
    """Read a directory of numbered frame images back as float64 frames."""
    path = Path(path)
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not files:
        raise ValueError(f"{path}: no frame images found")
    frames = np.stack([np.asarray(Image.open(p).convert("RGB")) for p in files])
    return frames.astype(np.float64)


def load_video(path: str | Path) -> np.ndarray:
    """Dispatch on path type: directory of frames or packed binary file."""
    path = Path(path)
    if path.is_dir():
        return read_frame_dir(path)
    return read_packed_video(path)
