"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, get_tape, no_grad

DEFAULT_STEP = 1e-5
# Denominator floor so that gradients that are analytically zero compare
# on an absolute scale instead of dividing round-off by round-off.
DENOM_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    checked: int
    worst: str = ""
    per_input: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), DENOM_FLOOR)
    return np.abs(analytic - numeric) / denom


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor] | dict[str, Tensor],
               tolerance: float = 1e-6, step: float = DEFAULT_STEP,
               max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare backward() against central differences of ``fn``.

    ``fn`` takes no arguments and rebuilds a scalar from the current values
    of ``params``; it must be deterministic. ``max_entries`` caps the number
    of probed entries per tensor (sampled without replacement).
    """
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(f"input{i}", p) for i, p in enumerate(params)]
    rng = rng if rng is not None else np.random.default_rng(0)

    flags = [p.requires_grad for _, p in named]
    for _, p in named:
        p.requires_grad = True
        p.grad = np.zeros_like(p.data)
    get_tape().clear()
    loss = fn()
    backward(loss)
    analytic = {name: p.grad.copy() for name, p in named}

    worst, worst_name, checked = 0.0, "", 0
    per_input: dict[str, float] = {}
    with no_grad():
        for name, p in named:
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            num = np.empty(idx.size)
            for n, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + step
                f_plus = fn().item()
                flat[i] = orig - step
                f_minus = fn().item()
                flat[i] = orig
                num[n] = (f_plus - f_minus) / (2.0 * step)
            err = relative_error(analytic[name].reshape(-1)[idx], num)
            e = float(err.max()) if err.size else 0.0
            per_input[name] = e
            checked += idx.size
            if e > worst or not np.isfinite(e):
                worst, worst_name = e, name
    for (_, p), flag in zip(named, flags):
        p.requires_grad = flag
    return GradCheckReport(worst, tolerance, checked, worst_name, per_input)


def check_operator(op: Callable[..., Tensor], shapes: Sequence[tuple[int, ...]],
                   tolerance: float = 1e-6, seed: int = 0,
                   init: Callable[[np.random.Generator, tuple[int, ...]], np.ndarray] | None = None,
                   **kwargs) -> GradCheckReport:
    """Gradient-check ``op`` on random inputs of ``shapes``.

    Non-scalar outputs are reduced with a fixed random projection so every
    output element contributes.
    """
    rng = np.random.default_rng(seed)
    make = init or (lambda r, s: r.standard_normal(s))
    inputs = [Tensor(make(rng, s), requires_grad=True) for s in shapes]
    with no_grad():
        out_shape = op(*inputs, **kwargs).shape
    proj = Tensor(rng.standard_normal(out_shape))

    def fn():
        return (op(*inputs, **kwargs) * proj).sum()

    return grad_check(fn, inputs, tolerance=tolerance, rng=rng)
