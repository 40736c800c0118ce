"""Streaming inference with extractor-selection policies.

A policy picks the fast or slow extractor per frame. Frame 0 of a stream is
always slow so the memory is seeded by the accurate extractor. With
``clear_on_slow`` the ConvLSTM state is zeroed before every slow frame.
"""

from __future__ import annotations

import csv
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .model import ExtractorKind, MemoryState, ModelParams, forward_frame
from .rng import SplitMix64
from .tensor import Tensor, stable_sigmoid, no_grad


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class Policy:
    variant: str  # "always-fast" | "always-slow" | "one-in" | "randn"
    n: int = 1
    theta: float = 0.0
    clear_on_slow: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.variant not in ("always-fast", "always-slow", "one-in", "randn"):
            raise PolicyError(f"unknown policy variant {self.variant!r}")
        if self.variant == "one-in" and self.n < 1:
            raise PolicyError(f"one-in:N needs N >= 1, got {self.n}")
        if self.variant == "randn" and not 0.0 <= self.theta <= 1.0:
            raise PolicyError(f"randn:THETA needs THETA in [0, 1], got {self.theta}")

    @classmethod
    def one_in(cls, n: int, **kw) -> "Policy":
        return cls("one-in", n=n, **kw)

    @classmethod
    def rand_threshold(cls, theta: float, **kw) -> "Policy":
        return cls("randn", theta=theta, **kw)

    @classmethod
    def always_fast(cls, **kw) -> "Policy":
        return cls("always-fast", **kw)

    @classmethod
    def always_slow(cls, **kw) -> "Policy":
        return cls("always-slow", **kw)

    @classmethod
    def parse(cls, text: str, **kw) -> "Policy":
        """Parse ``always-fast``, ``always-slow``, ``one-in:N`` or ``randn:THETA``."""
        text = text.strip().lower()
        if text in ("always-fast", "always-slow"):
            return cls(text, **kw)
        m = re.fullmatch(r"one-in:(-?\d+)", text)
        if m:
            return cls.one_in(int(m.group(1)), **kw)
        m = re.fullmatch(r"randn:([0-9]*\.?[0-9]+(?:e-?\d+)?)", text)
        if m:
            return cls.rand_threshold(float(m.group(1)), **kw)
        raise PolicyError(f"cannot parse policy {text!r}; use always-fast, always-slow, one-in:N or randn:THETA")

    @property
    def label(self) -> str:
        if self.variant == "one-in":
            return f"one-in-{self.n}"
        if self.variant == "randn":
            return f"randn>{self.theta:g}"
        return self.variant

    def make_rng(self) -> SplitMix64:
        return SplitMix64(self.seed)


def decide(policy: Policy, frame_index: int, rng: SplitMix64 | None = None) -> ExtractorKind:
    if policy.variant == "always-fast":
        return ExtractorKind.FAST
    if policy.variant == "always-slow":
        return ExtractorKind.SLOW
    if policy.variant == "one-in":
        # index 0 is a multiple of n, so the bootstrap frame is slow by construction
        return ExtractorKind.SLOW if frame_index % policy.n == 0 else ExtractorKind.FAST
    if frame_index == 0:
        return ExtractorKind.SLOW
    if rng is None:
        raise PolicyError("randn policy needs its PRNG stream")
    return ExtractorKind.SLOW if rng.random() > policy.theta else ExtractorKind.FAST


@dataclass
class FrameDecision:
    frame: int
    kind: ExtractorKind
    cleared: bool
    latency_s: float


@dataclass
class Schedule:
    decisions: list[FrameDecision] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.decisions)

    def kinds(self) -> list[ExtractorKind]:
        return [d.kind for d in self.decisions]

    def slow_count(self) -> int:
        return sum(d.kind == ExtractorKind.SLOW for d in self.decisions)

    def latencies(self) -> list[float]:
        return [d.latency_s for d in self.decisions]

    def same_decisions(self, other: "Schedule") -> bool:
        return [(d.frame, d.kind, d.cleared) for d in self.decisions] == [
            (d.frame, d.kind, d.cleared) for d in other.decisions
        ]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["frame", "kind", "cleared", "latency_s"])
            for d in self.decisions:
                writer.writerow([d.frame, str(d.kind), int(d.cleared), f"{d.latency_s:.9f}"])


def _as_tensor(frame) -> Tensor:
    return frame if isinstance(frame, Tensor) else Tensor(frame)


def run_stream(
    frames: Sequence,
    params: ModelParams,
    policy: Policy,
    on_clear: Callable[[int], None] | None = None,
) -> tuple[list[np.ndarray], Schedule]:
    """Run one stream; returns per-frame road probabilities (1,H,W) and the schedule.

    Latency covers the model forward only.
    """
    if len(frames) == 0:
        raise ValueError("run_stream needs at least one frame")
    rng = policy.make_rng()
    state = MemoryState.zeros(params.arch, dtype=next(iter(params.values())).dtype)
    probs: list[np.ndarray] = []
    schedule = Schedule()
    inputs = [_as_tensor(f) for f in frames]
    with no_grad():
        for index, image in enumerate(inputs):
            kind = decide(policy, index, rng)
            cleared = kind == ExtractorKind.SLOW and policy.clear_on_slow
            start = time.perf_counter()
            if cleared:
                state.clear()
            logits, state = forward_frame(image, kind, state, params)
            latency = time.perf_counter() - start
            if cleared and on_clear is not None:
                on_clear(index)
            probs.append(stable_sigmoid(logits.data))
            schedule.decisions.append(FrameDecision(index, kind, cleared, latency))
    return probs, schedule


def profile_fps(frames: Sequence, params: ModelParams, policy: Policy, warmup: int = 10) -> float:
    """Frames per second over the frames after ``warmup``, from forward latencies only."""
    if not 0 <= warmup < len(frames):
        raise ValueError(f"warmup must be in [0, {len(frames)}), got {warmup}")
    _, schedule = run_stream(frames, params, policy)
    measured = schedule.latencies()[warmup:]
    return len(measured) / sum(measured)
