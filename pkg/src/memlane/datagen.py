"""Procedural road-video sequences with ground-truth road masks.

The road is a perspective-tapered band whose centerline drifts laterally (a
random walk) and bends with a quadratic-in-row curvature that follows an AR(1)
process. Each sequence draws from its own splitmix64 substream, so sequences are
independent of one another and of how many are requested.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .rng import SplitMix64, derive_seed

ROAD_RGB = (0.50, 0.50, 0.50)
GROUND_RGB = (0.36, 0.42, 0.20)
SKY_RGB = (0.62, 0.78, 0.95)

MAX_RETRIES = 100
MIN_ROAD_FRACTION = 0.05
MAX_ROAD_FRACTION = 0.70
MIN_CONSECUTIVE_IOU = 0.6
# initial lateral offset spread, in multiples of lateral_drift_std
INITIAL_OFFSET_SCALE = 5.0


class GenerationError(RuntimeError):
    def __init__(self, message: str, params: "SceneParams"):
        super().__init__(f"{message} (params: {params})")
        self.params = params


@dataclass(frozen=True)
class SceneParams:
    seed: int = 42
    num_sequences: int = 10
    frames_per_sequence: int = 30
    image_size: int = 64
    curvature_ar_coeff: float = 0.9
    curvature_noise_std: float = 0.05
    lateral_drift_std: float = 0.01
    road_base_width: float = 0.45
    perspective_taper: float = 0.8
    horizon_fraction: float = 0.35
    noise_amplitude: float = 0.08

    def __post_init__(self):
        for name in ("curvature_noise_std", "lateral_drift_std", "road_base_width", "perspective_taper", "noise_amplitude"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 <= self.curvature_ar_coeff < 1:
            raise ValueError("curvature_ar_coeff must lie in [0, 1)")
        if not 0 < self.horizon_fraction < 1:
            raise ValueError("horizon must lie inside the image")
        if self.num_sequences < 0 or self.frames_per_sequence < 1 or self.image_size < 2:
            raise ValueError("need num_sequences >= 0, frames_per_sequence >= 1, image_size >= 2")

    @property
    def horizon_row(self) -> float:
        return self.horizon_fraction * self.image_size


@dataclass
class SequenceSample:
    frames: np.ndarray  # (T, 3, H, W) float32 in [0, 1]
    masks: np.ndarray  # (T, 1, H, W) uint8 in {0, 1}
    seed: int
    index: int
    flipped: bool = False

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def image_size(self) -> tuple[int, int]:
        return self.frames.shape[2], self.frames.shape[3]


def road_mask(params: SceneParams, curvature: float, offset: float) -> np.ndarray:
    """Binary (H, W) mask of the road band for one frame's dynamics state."""
    h = w = params.image_size
    horizon = params.horizon_row
    rows = np.arange(h, dtype=np.float64)
    cols = np.arange(w, dtype=np.float64) + 0.5
    depth = (rows - horizon) / (h - horizon)
    center = (0.5 + offset) * w + curvature * depth**2 * w
    half_width = params.road_base_width * w / 2 * (1 - params.perspective_taper * (h - rows) / (h - horizon))
    inside = np.abs(cols[None, :] - center[:, None]) <= half_width[:, None]
    below = rows > horizon
    return (inside & below[:, None]).astype(np.uint8)


def render(params: SceneParams, mask: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """RGB frame for a road mask plus a (3, H, W) additive noise field."""
    h = w = params.image_size
    sky = np.broadcast_to((np.arange(h) <= params.horizon_row)[:, None], (h, w))
    base = np.empty((3, h, w), dtype=np.float64)
    for ch in range(3):
        base[ch] = np.where(mask == 1, ROAD_RGB[ch], np.where(sky, SKY_RGB[ch], GROUND_RGB[ch]))
    return np.clip(base + noise, 0.0, 1.0).astype(np.float32)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    return 1.0 if union == 0 else np.count_nonzero(a & b) / union


def _violations(masks: np.ndarray) -> str | None:
    fractions = masks.reshape(len(masks), -1).mean(axis=1)
    if fractions.min() < MIN_ROAD_FRACTION or fractions.max() > MAX_ROAD_FRACTION:
        return f"road fraction range [{fractions.min():.3f}, {fractions.max():.3f}]"
    if len(masks) > 1:
        ious = [mask_iou(masks[t], masks[t + 1]) for t in range(len(masks) - 1)]
        if np.mean(ious) < MIN_CONSECUTIVE_IOU:
            return f"mean consecutive IoU {np.mean(ious):.3f}"
    return None


def _attempt(params: SceneParams, rng: SplitMix64) -> tuple[np.ndarray, np.ndarray]:
    t_count = params.frames_per_sequence
    rho = params.curvature_ar_coeff
    eps = rng.normal(t_count + 1) * params.curvature_noise_std
    drift = rng.normal(t_count + 1) * params.lateral_drift_std
    # stationary start for the AR(1) curvature; both vanish when their noise is off
    curvature = eps[0] / math.sqrt(1 - rho * rho)
    offset = drift[0] * INITIAL_OFFSET_SCALE
    frames = np.empty((t_count, 3, params.image_size, params.image_size), dtype=np.float32)
    masks = np.empty((t_count, 1, params.image_size, params.image_size), dtype=np.uint8)
    for t in range(t_count):
        if t:
            curvature = rho * curvature + eps[t]
            offset = offset + drift[t]
        masks[t, 0] = road_mask(params, curvature, offset)
    # one sensor-noise field per sequence: frozen dynamics give identical frames
    size = params.image_size
    amp = params.noise_amplitude
    noise = rng.uniform(3 * size * size, -amp, amp).reshape(3, size, size)
    for t in range(t_count):
        frames[t] = render(params, masks[t, 0], noise)
    return frames, masks


def generate_sequence(params: SceneParams, index: int) -> SequenceSample:
    rng = SplitMix64(derive_seed(params.seed, index))
    problem = None
    for _ in range(MAX_RETRIES):
        frames, masks = _attempt(params, rng)
        problem = _violations(masks)
        if problem is None:
            return SequenceSample(frames, masks, params.seed, index)
    raise GenerationError(f"sequence {index}: {problem} after {MAX_RETRIES} retries", params)


def generate(params: SceneParams) -> list[SequenceSample]:
    return [generate_sequence(params, i) for i in range(params.num_sequences)]


def flip_sample(sample: SequenceSample) -> SequenceSample:
    return replace(
        sample,
        frames=np.ascontiguousarray(sample.frames[..., ::-1]),
        masks=np.ascontiguousarray(sample.masks[..., ::-1]),
        flipped=not sample.flipped,
    )


def flip_augment(samples: list[SequenceSample]) -> list[SequenceSample]:
    """Originals followed by their horizontal mirrors."""
    return list(samples) + [flip_sample(s) for s in samples]


def split_dataset(samples: list[SequenceSample], train_fraction: float = 0.8) -> tuple[list, list]:
    """Split by sequence, keeping order: the first ``train_fraction`` go to training."""
    cut = int(round(len(samples) * train_fraction))
    return samples[:cut], samples[cut:]
