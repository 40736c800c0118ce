"""IoU, temporal consistency and Table-style aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor

TC_DENOMINATOR_FLOOR = 1e-6


@dataclass
class MetricsRow:
    name: str
    strategy: str
    avg_iou: float
    avg_fps: float
    temporal_consistency: float
    tc_unnormalized: bool = False

    def __post_init__(self):
        if not 0.0 <= self.avg_iou <= 1.0:
            raise ValueError(f"avg_iou must lie in [0, 1], got {self.avg_iou}")


def _array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def binarize(pred, threshold: float = 0.5) -> np.ndarray:
    return _array(pred) > threshold


def binary_iou(p: np.ndarray, g: np.ndarray) -> float:
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def iou(pred, gt, threshold: float = 0.5) -> float:
    """IoU of ``pred > threshold`` against a binary ground truth; empty/empty is 1."""
    p, g = _array(pred), _array(gt)
    if p.shape != g.shape:
        raise ValueError(f"iou: shape mismatch {p.shape} vs {g.shape}")
    return binary_iou(p > threshold, g > 0.5)


@dataclass
class TemporalConsistency:
    value: float
    prediction_iou: float
    ground_truth_iou: float
    unnormalized: bool


def temporal_consistency(preds: Sequence, gts: Sequence, threshold: float = 0.5) -> TemporalConsistency:
    """Mean consecutive-prediction IoU over mean consecutive-ground-truth IoU.

    When the ground truth itself has (near) zero overlap frame to frame, the
    ratio is meaningless; the raw prediction-pair IoU is reported and flagged.
    """
    if len(preds) != len(gts):
        raise ValueError(f"temporal_consistency: {len(preds)} predictions vs {len(gts)} masks")
    if len(preds) < 2:
        raise ValueError("temporal_consistency needs at least 2 frames")
    p = [binarize(x, threshold) for x in preds]
    g = [binarize(x, 0.5) for x in gts]
    pred_pairs = float(np.mean([binary_iou(a, b) for a, b in zip(p[:-1], p[1:])]))
    gt_pairs = float(np.mean([binary_iou(a, b) for a, b in zip(g[:-1], g[1:])]))
    if gt_pairs < TC_DENOMINATOR_FLOOR:
        return TemporalConsistency(pred_pairs, pred_pairs, gt_pairs, True)
    return TemporalConsistency(pred_pairs / gt_pairs, pred_pairs, gt_pairs, False)


def mean(values: Sequence[float]) -> float:
    """Order-independent mean (exactly rounded sum)."""
    return math.fsum(values) / len(values) if len(values) else float("nan")


@dataclass
class Evaluation:
    row: MetricsRow
    per_sequence_iou: list[float]
    per_sequence_tc: list[float]
    predictions: list[list[np.ndarray]]


def evaluate(
    params,
    samples: Sequence,
    policy,
    name: str = "model",
    warmup: int = 0,
    threshold: float = 0.5,
) -> Evaluation:
    """Stream every sequence (memory reset between sequences) and aggregate.

    IoU is averaged over all frames, temporal consistency per sequence then
    averaged, FPS pooled over all post-warmup frame latencies.
    """
    from .inference import run_stream

    if not samples:
        raise ValueError("evaluate needs at least one sequence")
    frame_ious: list[float] = []
    seq_ious: list[float] = []
    seq_tcs: list[float] = []
    latencies: list[float] = []
    predictions = []
    any_unnormalized = False
    for sample in samples:
        probs, schedule = run_stream(sample.frames, params, policy)
        ious = [iou(p, m, threshold) for p, m in zip(probs, sample.masks)]
        frame_ious.extend(ious)
        seq_ious.append(mean(ious))
        if len(probs) >= 2:
            tc = temporal_consistency(probs, list(sample.masks), threshold)
            seq_tcs.append(tc.value)
            any_unnormalized |= tc.unnormalized
        latencies.extend(schedule.latencies()[warmup:])
        predictions.append(probs)
    fps = len(latencies) / math.fsum(latencies)
    row = MetricsRow(
        name=name,
        strategy=policy.label,
        avg_iou=mean(frame_ious),
        avg_fps=fps,
        temporal_consistency=mean(seq_tcs) if seq_tcs else float("nan"),
        tc_unnormalized=any_unnormalized,
    )
    return Evaluation(row, seq_ious, seq_tcs, predictions)
