"""Weak and strong video augmentation.

Weak augmentation (resize short side, random resized crop, horizontal flip)
is factored into a sampled ``AugmentationRecord`` plus a deterministic
``apply_weak``, so the exact same spatial transform can be replayed on the
RGB clip and its temporal-gradient twin. Strong augmentation is a
RandAugment-style composition sampled per clip; every frame of a clip
receives identical transform parameters to keep it temporally coherent.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np

from .modalities import RGB, TG, VideoClip, _as_rng

STRONG_OP_POOL = (
    "rotation",
    "color_inversion",
    "translation",
    "contrast",
    "brightness",
    "shear",
    "posterize",
    "solarize",
    "sharpness",
    "autocontrast",
)

CORRUPTION_KINDS = ("contrast_noise", "brightness_noise", "grayscale")

# PIL's SMOOTH kernel, used by the sharpness op as the "fully blurred" endpoint.
_SMOOTH_KERNEL = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float64) / 13.0


@dataclass
class AugmentationRecord:
    """One sampled weak transform, replayable on any clip of the same source."""

    scale_short_side: int = 256
    crop_box: tuple[int, int, int, int] = (0, 0, 256, 256)  # top, left, height, width
    flip: bool = False
    output_size: int = 224
    input_hw: tuple[int, int] = (0, 0)

    def __post_init__(self) -> None:
        top, left, h, w = self.crop_box
        if min(top, left) < 0 or h < 1 or w < 1:
            raise ValueError(f"bad crop box {self.crop_box}")
        rh, rw = _resized_hw(self.input_hw, self.scale_short_side)
        if self.input_hw != (0, 0) and (top + h > rh or left + w > rw):
            raise ValueError(f"crop box {self.crop_box} outside resized frame {(rh, rw)}")


@dataclass
class StrongAugPolicy:
    """RandAugment-style policy: draw ``num_ops`` ops at magnitude ``magnitude``."""

    op_pool: tuple[str, ...] = STRONG_OP_POOL
    num_ops: int = 2
    magnitude: int = 5

    def __post_init__(self) -> None:
        unknown = [op for op in self.op_pool if op not in STRONG_OP_POOL]
        if unknown:
            raise ValueError(f"unknown strong ops {unknown}; pool is {STRONG_OP_POOL}")
        if self.num_ops < 0:
            raise ValueError("num_ops must be >= 0")
        if self.num_ops > 0 and not self.op_pool:
            raise ValueError("op_pool is empty but num_ops > 0")
        if not 0 <= self.magnitude <= 10:
            raise ValueError("magnitude must be on the 0-10 scale")


def _resized_hw(hw: tuple[int, int], short_side: int) -> tuple[int, int]:
    h, w = hw
    if h <= 0 or w <= 0:
        return (0, 0)
    if h <= w:
        return short_side, max(1, round(w * short_side / h))
    return max(1, round(h * short_side / w)), short_side


def _resize_frames(frames: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    h, w = hw
    if frames.shape[1:3] == (h, w):
        return frames
    out = np.empty((frames.shape[0], h, w, frames.shape[3]), dtype=np.float64)
    for t in range(frames.shape[0]):
        out[t] = cv2.resize(frames[t], (w, h), interpolation=cv2.INTER_LINEAR)
    return out


def sample_weak_record(input_shape: tuple[int, int], rng, *,
                       short_side: int = 256, output_size: int = 224,
                       area_range: tuple[float, float] = (0.3, 1.0),
                       aspect_range: tuple[float, float] = (3 / 4, 4 / 3)) -> AugmentationRecord:
    """Sample a weak transform: random resized crop box plus a fair-coin flip.

    The crop box is drawn in post-resize coordinates (short side scaled to
    ``short_side``) by the usual rejection scheme: up to ten attempts at a
    random area/aspect box, then a centered max-square fallback.
    """
    h, w = input_shape
    if h < 1 or w < 1:
        raise ValueError(f"bad input shape {input_shape}")
    rng = _as_rng(rng)
    rh, rw = _resized_hw((h, w), short_side)
    area = rh * rw
    box = None
    for _ in range(10):
        target_area = area * rng.uniform(*area_range)
        aspect = math.exp(rng.uniform(math.log(aspect_range[0]), math.log(aspect_range[1])))
        cw = round(math.sqrt(target_area * aspect))
        ch = round(math.sqrt(target_area / aspect))
        if 0 < cw <= rw and 0 < ch <= rh:
            top = int(rng.integers(0, rh - ch + 1))
            left = int(rng.integers(0, rw - cw + 1))
            box = (top, left, ch, cw)
            break
    if box is None:
        side = min(rh, rw)
        box = ((rh - side) // 2, (rw - side) // 2, side, side)
    flip = bool(rng.uniform() < 0.5)
    return AugmentationRecord(short_side, box, flip, output_size, (h, w))


def apply_weak(clip: VideoClip, record: AugmentationRecord) -> VideoClip:
    """Replay a weak record: resize, crop, resize to output square, maybe flip."""
    if record.input_hw != (0, 0) and clip.spatial_shape != record.input_hw:
        raise ValueError(
            f"clip shape {clip.spatial_shape} does not match record input {record.input_hw}"
        )
    rh, rw = _resized_hw(clip.spatial_shape, record.scale_short_side)
    frames = _resize_frames(clip.frames, (rh, rw))
    top, left, ch, cw = record.crop_box
    if top + ch > rh or left + cw > rw:
        raise ValueError(f"crop box {record.crop_box} outside resized frame {(rh, rw)}")
    frames = frames[:, top:top + ch, left:left + cw, :]
    frames = _resize_frames(frames, (record.output_size, record.output_size))
    if record.flip:
        frames = frames[:, :, ::-1, :]
    frames = np.clip(frames, *clip.value_range)
    return clip.with_frames(np.ascontiguousarray(frames))


# ---------------------------------------------------------------------------
# Strong augmentation ops. Each op maps float frames in (0, 255) to the same
# range; geometric ops fill uncovered pixels with mid-gray so zero-motion TG
# stays neutral. Signed magnitudes are sampled once per clip.
# ---------------------------------------------------------------------------

_FILL = 127.5


def _warp_clip(frames: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    h, w = frames.shape[1:3]
    out = np.empty_like(frames)
    for t in range(frames.shape[0]):
        out[t] = cv2.warpAffine(frames[t], matrix, (w, h), flags=cv2.INTER_LINEAR,
                                borderMode=cv2.BORDER_CONSTANT, borderValue=(_FILL,) * 3)
    return out


def _op_rotation(frames, level, rng):
    angle = level * 30.0
    h, w = frames.shape[1:3]
    matrix = cv2.getRotationMatrix2D((w / 2 - 0.5, h / 2 - 0.5), angle, 1.0)
    return _warp_clip(frames, matrix)


def _op_color_inversion(frames, level, rng):
    return 255.0 - frames


def _op_translation(frames, level, rng):
    h, w = frames.shape[1:3]
    axis = int(rng.integers(0, 2))
    shift = level * 0.3 * (w if axis == 0 else h)
    matrix = np.array([[1, 0, shift if axis == 0 else 0],
                       [0, 1, shift if axis == 1 else 0]], dtype=np.float64)
    return _warp_clip(frames, matrix)


def _blend(frames_a, frames_b, factor):
    return frames_b + factor * (frames_a - frames_b)


def _op_contrast(frames, level, rng):
    factor = 1.0 + level * 0.9
    gray = frames @ np.array([0.299, 0.587, 0.114])
    mean = gray.mean()
    return _blend(frames, np.full_like(frames, mean), factor)


def _op_brightness(frames, level, rng):
    factor = 1.0 + level * 0.9
    return frames * factor


def _op_shear(frames, level, rng):
    shear = level * 0.3
    axis = int(rng.integers(0, 2))
    if axis == 0:
        matrix = np.array([[1, shear, 0], [0, 1, 0]], dtype=np.float64)
    else:
        matrix = np.array([[1, 0, 0], [shear, 1, 0]], dtype=np.float64)
    return _warp_clip(frames, matrix)


def _op_posterize(frames, level, rng):
    bits = 8 - round(abs(level) * 4)  # 8..4 bits kept
    step = 2 ** (8 - bits)
    return np.floor_divide(frames, step) * step


def _op_solarize(frames, level, rng):
    threshold = 255.0 - abs(level) * 255.0
    return np.where(frames >= threshold, 255.0 - frames, frames)


def _op_sharpness(frames, level, rng):
    factor = 1.0 + level * 0.9
    smoothed = np.empty_like(frames)
    for t in range(frames.shape[0]):
        smoothed[t] = cv2.filter2D(frames[t], -1, _SMOOTH_KERNEL,
                                   borderType=cv2.BORDER_REPLICATE)
    return _blend(frames, smoothed, factor)


def _op_autocontrast(frames, level, rng):
    out = np.empty_like(frames)
    for c in range(frames.shape[3]):
        ch = frames[..., c]
        lo, hi = ch.min(), ch.max()
        out[..., c] = (ch - lo) * (255.0 / (hi - lo)) if hi > lo else ch
    return out


_STRONG_OPS = {
    "rotation": (_op_rotation, True),
    "color_inversion": (_op_color_inversion, False),
    "translation": (_op_translation, True),
    "contrast": (_op_contrast, True),
    "brightness": (_op_brightness, True),
    "shear": (_op_shear, True),
    "posterize": (_op_posterize, False),
    "solarize": (_op_solarize, False),
    "sharpness": (_op_sharpness, True),
    "autocontrast": (_op_autocontrast, False),
}


def apply_strong(clip: VideoClip, policy: StrongAugPolicy, rng) -> VideoClip:
    """Apply ``num_ops`` randomly drawn strong ops clip-wide.

    Each op samples a single signed strength ``level`` in [-M/10, M/10]
    (sign dropped for ops that are one-sided) and applies it to every frame,
    so the clip stays temporally coherent. Output is clipped back to (0, 255).
    """
    if policy.num_ops > 0 and not policy.op_pool:
        raise ValueError("cannot sample strong ops from an empty pool")
    rng = _as_rng(rng)
    frames = clip.frames.astype(np.float64)
    for _ in range(policy.num_ops):
        name = policy.op_pool[int(rng.integers(0, len(policy.op_pool)))]
        fn, signed = _STRONG_OPS[name]
        level = policy.magnitude / 10.0
        if signed:
            level *= 1.0 if rng.uniform() < 0.5 else -1.0
        frames = fn(frames, level, rng)
    frames = np.clip(frames, 0.0, 255.0)
    return clip.with_frames(frames)


def corrupt(clip: VideoClip, kind: str, rng) -> VideoClip:
    """Test-time corruption of an RGB clip: enhancer noise or grayscale."""
    if clip.modality != RGB:
        raise ValueError(f"corruptions are defined for RGB clips, got {clip.modality!r}")
    if kind not in CORRUPTION_KINDS:
        raise ValueError(f"unknown corruption {kind!r}; choose from {CORRUPTION_KINDS}")
    rng = _as_rng(rng)
    frames = clip.frames.astype(np.float64)
    if kind == "grayscale":
        gray = frames @ np.array([0.299, 0.587, 0.114])
        frames = np.repeat(gray[..., None], 3, axis=3)
    elif kind == "contrast_noise":
        factor = rng.uniform(0.5, 1.5)
        gray = frames @ np.array([0.299, 0.587, 0.114])
        frames = _blend(frames, np.full_like(frames, gray.mean()), factor)
    else:  # brightness_noise
        factor = rng.uniform(0.5, 1.5)
        frames = frames * factor
    frames = np.clip(frames, 0.0, 255.0)
    return clip.with_frames(frames)
