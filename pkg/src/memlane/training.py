"""Interleaved training over short sequences with a last-frame loss.

Each optimizer step unrolls the shared memory over ``seq_len`` frames, picking
the extractor per frame at random (slow with probability ``p_slow``), scores
only the final frame and backpropagates through the whole unroll.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .datagen import SequenceSample
from .model import ArchitectureConfig, ExtractorKind, MemoryState, ModelParams, forward_frame, init_params
from .nn import AdamState, adam_step, clip_grad_norm
from .rng import SplitMix64, derive_seed
from .tensor import Tensor, bce_with_logits

log = logging.getLogger(__name__)

Frame = tuple[Tensor, Tensor]


class Pipeline(str, enum.Enum):
    BATCHED = "batched"
    SEQUENTIAL = "sequential"


@dataclass
class TrainConfig:
    pipeline: Pipeline = Pipeline.SEQUENTIAL
    seq_len: int = 6
    p_slow_train: float = 0.7
    epochs: int = 10
    lr: float = 3e-4
    seed: int = 0
    clip_norm: float | None = None

    def __post_init__(self):
        self.pipeline = Pipeline(self.pipeline)
        if self.seq_len < 2:
            raise ValueError(f"seq_len must be >= 2, got {self.seq_len}")
        if not 0.0 <= self.p_slow_train <= 1.0:
            raise ValueError(f"p_slow_train must lie in [0, 1], got {self.p_slow_train}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def sample_extractor(rng: SplitMix64, p_slow: float) -> ExtractorKind:
    return ExtractorKind.SLOW if rng.random() < p_slow else ExtractorKind.FAST


def _frame_tensors(sample: SequenceSample, t: int) -> Frame:
    return Tensor(sample.frames[t]), Tensor(sample.masks[t].astype(np.float32))


def make_training_sequence(sample: SequenceSample, pipeline: Pipeline | str, start: int, seq_len: int = 6) -> list[Frame]:
    """Batched repeats frame ``start``; sequential takes frames ``start..start+seq_len-1``."""
    pipeline = Pipeline(pipeline)
    t_count = len(sample)
    if pipeline == Pipeline.BATCHED:
        if not 0 <= start < t_count:
            raise IndexError(f"frame {start} outside a {t_count}-frame sequence")
        frame = _frame_tensors(sample, start)
        return [frame] * seq_len
    if start < 0 or start + seq_len > t_count:
        raise IndexError(f"window [{start}, {start + seq_len}) outside a {t_count}-frame sequence")
    return [_frame_tensors(sample, t) for t in range(start, start + seq_len)]


def unrolled_loss(
    seq: Sequence[Frame], params: ModelParams, kinds: Sequence[ExtractorKind], state: MemoryState | None = None
) -> Tensor:
    """Forward the sequence threading memory; BCE on the final frame only."""
    if state is None:
        state = MemoryState.zeros(params.arch, dtype=next(iter(params.values())).dtype)
    logits = None
    for (image, _), kind in zip(seq, kinds):
        logits, state = forward_frame(image, kind, state, params)
    return bce_with_logits(logits, seq[-1][1])


def train_sequence(
    seq: Sequence[Frame],
    params: ModelParams,
    opt_state: AdamState,
    rng: SplitMix64,
    p_slow: float,
    clip_norm: float | None = None,
    kinds: Sequence[ExtractorKind] | None = None,
    on_start: Callable[[MemoryState], None] | None = None,
) -> float:
    """One optimizer step on one sequence; returns the final-frame loss."""
    state = MemoryState.zeros(params.arch, dtype=next(iter(params.values())).dtype)
    if on_start is not None:
        on_start(state)
    if kinds is None:
        kinds = [sample_extractor(rng, p_slow) for _ in seq]
    loss = unrolled_loss(seq, params, kinds, state)
    loss.backward()
    for p in params.values():
        # a branch unused in this unroll still takes an Adam step (moment decay only)
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    if clip_norm is not None:
        clip_grad_norm(params.values(), clip_norm)
    adam_step(params.tensors, opt_state)
    params.zero_grads()
    return loss.item()


@dataclass
class TrainResult:
    params: ModelParams
    epoch_losses: list[float] = field(default_factory=list)
    steps: int = 0


def training_windows(dataset: Sequence[SequenceSample], seq_len: int) -> list[tuple[int, int]]:
    """Non-overlapping (sample index, window start) pairs."""
    windows = []
    for i, sample in enumerate(dataset):
        for start in range(0, len(sample) - seq_len + 1, seq_len):
            windows.append((i, start))
    return windows


def train(
    dataset: Sequence[SequenceSample],
    config: TrainConfig,
    arch: ArchitectureConfig | None = None,
    params: ModelParams | None = None,
    on_epoch_end: Callable[[int, ModelParams, float], None] | None = None,
) -> TrainResult:
    if not dataset:
        raise ValueError("train needs a nonempty dataset")
    if arch is None:
        arch = ArchitectureConfig(input_size=dataset[0].frames.shape[-1])
    if params is None:
        params = init_params(arch, config.seed)
    rng = SplitMix64(derive_seed(config.seed, 1))
    opt = AdamState(lr=config.lr)
    windows = training_windows(dataset, config.seq_len)
    if not windows:
        raise ValueError(f"no sequence holds {config.seq_len} frames")
    result = TrainResult(params)
    for epoch in range(config.epochs):
        order = rng.shuffle(list(windows))
        losses = []
        for i, start in order:
            sample = dataset[i]
            if config.pipeline == Pipeline.BATCHED:
                # one frame drawn from the window, repeated seq_len times
                frame = start + int(rng.random() * config.seq_len)
                seq = make_training_sequence(sample, Pipeline.BATCHED, frame, config.seq_len)
            else:
                seq = make_training_sequence(sample, Pipeline.SEQUENTIAL, start, config.seq_len)
            losses.append(train_sequence(seq, params, opt, rng, config.p_slow_train, config.clip_norm))
            result.steps += 1
        mean_loss = float(np.mean(losses))
        result.epoch_losses.append(mean_loss)
        log.info("epoch %d/%d mean loss %.5f", epoch + 1, config.epochs, mean_loss)
        if on_epoch_end is not None:
            on_epoch_end(epoch, params, mean_loss)
    return result
