"""Finite-difference verification of the analytic gradients (64-bit)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .datagen import SceneParams, generate
from .model import ArchitectureConfig, ExtractorKind, ModelParams, init_params
from .rng import SplitMix64
from .tensor import Tensor, no_grad, precision, record_relu_signs
from .training import unrolled_loss


# Central differences of an O(1) float64 loss carry ~1e-11 absolute roundoff at
# h=1e-5, so gradients below this floor are compared on an absolute scale.
GRAD_FLOOR = 1e-6
KINK_REFINEMENTS = 3


def relative_error(a: float, n: float, floor: float = GRAD_FLOOR) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    worst_index: int
    analytic: float
    numeric: float
    entries_checked: int
    size: int
    directional_rel_error: float
    kinks_refined: int = 0
    kinks_skipped: int = 0


def _check_error(c: ParamCheck) -> float:
    """Worst error of one tensor; an unverified directional check counts as infinite."""
    if math.isnan(c.directional_rel_error):
        return math.inf
    return max(c.max_rel_error, c.directional_rel_error)


@dataclass
class GradCheckReport:
    tolerance: float
    checks: list[ParamCheck] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max((_check_error(c) for c in self.checks), default=0.0)

    @property
    def passed(self) -> bool:
        return bool(self.checks) and self.max_error < self.tolerance

    def failures(self) -> list[ParamCheck]:
        return [c for c in self.checks if not _check_error(c) < self.tolerance]

    def format(self) -> str:
        lines = [
            f"{'parameter':<24} {'entries':>11} {'max_rel_err':>12} {'dir_rel_err':>12} {'kinks':>9}"
            "  worst [index] analytic / numeric"
        ]
        for c in self.checks:
            lines.append(
                f"{c.name:<24} {c.entries_checked:>5}/{c.size:<5} {c.max_rel_error:>12.3e} {c.directional_rel_error:>12.3e}"
                f" {c.kinks_refined:>4}/{c.kinks_skipped:<4} [{c.worst_index}] {c.analytic:+.6e} / {c.numeric:+.6e}"
            )
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"{verdict}: max relative error {self.max_error:.3e} (tolerance {self.tolerance:g})")
        return "\n".join(lines)


def _same_pieces(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(
    f: Callable[[ModelParams], Tensor],
    params: ModelParams,
    tolerance: float = 1e-4,
    h: float = 1e-5,
    max_entries: int | None = 32,
    seed: int = 0,
    max_direction_tries: int = 20,
    floor: float = GRAD_FLOOR,
) -> GradCheckReport:
    """Compare backprop gradients of ``f`` with central differences.

    Runs on a float64 copy of ``params``. Per tensor, ``max_entries`` entries
    are checked individually (all of them when None; the largest-gradient entry
    always included), plus one directional derivative along a random direction
    spanning the whole tensor. Relative errors use ``max(|a|, |n|, floor)`` as
    denominator.

    A probe whose two evaluations sit on different linear pieces of some relu
    measures a kink, not the derivative. Its step is shrunk tenfold (up to
    ``KINK_REFINEMENTS`` times) until both sides share a piece; if none does,
    the probe is skipped and a fresh entry or direction drawn. Both cases are
    counted in the report. Failures are reported, never raised.
    """
    rng = SplitMix64(seed)
    report = GradCheckReport(tolerance)
    with precision(np.float64):
        p64 = params.copy(np.float64)
        p64.zero_grads()
        f(p64).backward()
        analytic = {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for n, t in p64.items()}

        def value() -> tuple[float, list[np.ndarray]]:
            with no_grad(), record_relu_signs() as signs:
                return f(p64).item(), signs

        def probe(flat: np.ndarray, step: int | np.ndarray) -> tuple[float | None, bool]:
            """Central difference along one entry or a unit direction: (value, refined)."""
            saved = flat.copy()
            for level in range(KINK_REFINEMENTS + 1):
                eps = h * 10.0**-level
                sides = []
                for sign in (1.0, -1.0):
                    if isinstance(step, np.ndarray):
                        flat += sign * eps * step
                    else:
                        flat[step] += sign * eps
                    sides.append(value())
                    flat[:] = saved
                (fp, sp), (fm, sm) = sides
                if _same_pieces(sp, sm):
                    return (fp - fm) / (2 * eps), level > 0
            return None, True

        for name, t in p64.items():
            flat = t.data.reshape(-1)
            grad = analytic[name].reshape(-1)
            if max_entries is None or flat.size <= max_entries:
                queue = list(range(flat.size))
                spares: list[int] = []
            else:
                order = rng.shuffle(list(range(flat.size)))
                top = int(np.argmax(np.abs(grad)))
                order.remove(top)
                queue = [top] + order[: max_entries - 1]
                spares = order[max_entries - 1 :]
            worst = (0.0, 0, 0.0, 0.0)
            checked = refined = skipped = 0
            while queue:
                idx = queue.pop(0)
                numeric, was_refined = probe(flat, idx)
                if numeric is None:
                    skipped += 1
                    if spares:
                        queue.append(spares.pop(0))
                    continue
                refined += was_refined
                checked += 1
                err = relative_error(float(grad[idx]), numeric, floor)
                if err >= worst[0]:
                    worst = (err, idx, float(grad[idx]), numeric)

            dir_err = float("nan")
            for _ in range(max_direction_tries):
                direction = rng.normal(flat.size)
                direction /= np.linalg.norm(direction)
                numeric, was_refined = probe(flat, direction)
                if numeric is None:
                    skipped += 1
                    continue
                refined += was_refined
                dir_err = relative_error(float(grad @ direction), numeric, floor)
                break

            report.checks.append(
                ParamCheck(name, worst[0], worst[1], worst[2], worst[3], checked, flat.size, dir_err, refined, skipped)
            )
    return report


def model_check_problem(
    size: int = 16, seed: int = 0, kinds: tuple[ExtractorKind, ...] = (ExtractorKind.SLOW, ExtractorKind.FAST, ExtractorKind.SLOW)
) -> tuple[Callable[[ModelParams], Tensor], ModelParams]:
    """Last-frame BCE of a short interleaved unroll on a synthetic clip.

    The mixed extractor schedule routes gradient into both extractors, the
    memory (through every step) and the decoder.
    """
    arch = ArchitectureConfig(input_size=size)
    params = init_params(arch, seed)
    clip = generate(SceneParams(seed=seed, num_sequences=1, frames_per_sequence=len(kinds), image_size=size))[0]

    def f(p: ModelParams) -> Tensor:
        seq = [
            (Tensor(clip.frames[t], dtype=np.float64), Tensor(clip.masks[t], dtype=np.float64))
            for t in range(len(kinds))
        ]
        return unrolled_loss(seq, p, kinds)

    return f, params
