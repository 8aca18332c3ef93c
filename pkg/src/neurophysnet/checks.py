"""Self-verification suite behind ``neurophysnet verify``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .diffcore import Tensor, check_operator, grad_check, ops
from .diffcore.gradcheck import DENOM_FLOOR
from .fhn import (FhnParams, StatePair, build_coupling_matrix, fhn_residuals, integrate_rk4,
                  jacobian_trace, physics_loss, rest_state)
from .sigproc import FilterBankSpec, design_cheby2_bandpass, design_filter_bank


@dataclass
class CheckResult:
    group: str
    name: str
    measured: float
    threshold: float
    op: str  # "<", "<=", ">=", "in"
    passed: bool
    upper: float | None = None

    def describe(self) -> str:
        bound = (f"[{self.threshold:g}, {self.upper:g}]" if self.op == "in"
                 else f"{self.op} {self.threshold:g}")
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.group:<9} {self.name:<34} {self.measured:<12.4g} {bound}"


def _below(group, name, value, limit, strict=True) -> CheckResult:
    ok = value < limit if strict else value <= limit
    return CheckResult(group, name, float(value), limit, "<" if strict else "<=", bool(ok))


def _at_least(group, name, value, limit) -> CheckResult:
    return CheckResult(group, name, float(value), limit, ">=", bool(value >= limit))


# ------------------------------------------------------------------- gradients

def _away_from_zero(rng, shape):
    x = rng.uniform(0.1, 2.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def gradient_checks() -> list[CheckResult]:
    g = "gradcheck"
    rng = np.random.default_rng(11)
    gamma4 = Tensor(rng.uniform(0.5, 1.5, 4))
    beta4 = Tensor(rng.standard_normal(4))
    attn_w = [Tensor(rng.standard_normal(s) * 0.3) for s in [(8, 8), (8,)] * 4]
    cases: list[tuple[str, Callable[[], object], float]] = [
        ("linear", lambda: check_operator(ops.linear, [(3, 5), (4, 5), (4,)]), 1e-6),
        ("conv2d", lambda: check_operator(lambda x, k: ops.conv2d(x, k, padding=1),
                                          [(2, 3, 8, 8), (4, 3, 3, 3)]), 1e-6),
        ("conv1d", lambda: check_operator(lambda x, k: ops.conv1d(x, k, padding=2),
                                          [(2, 3, 12), (4, 3, 5)]), 1e-6),
        ("maxpool2d", lambda: check_operator(lambda x: ops.maxpool2d(x, 2, 2), [(2, 2, 6, 6)]), 1e-6),
        ("relu", lambda: check_operator(ops.relu, [(4, 5)], init=_away_from_zero), 1e-6),
        ("softmax", lambda: check_operator(ops.softmax, [(3, 6)]), 1e-6),
        ("batchnorm", lambda: check_operator(
            lambda x: ops.batch_norm(x, gamma4, beta4, np.zeros(4), np.ones(4), True),
            [(5, 4, 3)]), 1e-6),
        ("layernorm", lambda: check_operator(
            lambda x: ops.layer_norm(x, gamma4, beta4), [(5, 4)]), 1e-6),
        ("cross_entropy", lambda: check_operator(
            lambda z: ops.cross_entropy(z, np.arange(8) % 4), [(8, 4)]), 1e-6),
        ("attention", lambda: _attention_check(rng, attn_w), 1e-5),
        ("attention key bias (abs)", lambda: _key_bias_check(rng, attn_w), 1e-9),
        ("physics_loss", lambda: _physics_check(rng), 1e-5),
    ]
    out = []
    for name, run, tol in cases:
        report = run()
        value = report if isinstance(report, float) else report.max_rel_error
        out.append(_below(g, name, value, tol))
    return out


ATTN_NAMES = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


def _attention_loss(rng, weights):
    x = Tensor(rng.standard_normal((4, 2, 8)))
    proj = Tensor(rng.standard_normal((4, 2, 8)))
    return x, lambda: (ops.multi_head_attention(x, *weights, heads=2) * proj).sum()


def _attention_check(rng, weights):
    # The key bias shifts every score in a row equally, so softmax cancels it
    # and its gradient is identically zero; a relative error there only
    # measures finite-difference round-off. It is checked on an absolute scale.
    x, fn = _attention_loss(rng, weights)
    params = {n: w for n, w in zip(ATTN_NAMES, weights) if n != "bk"}
    params["x"] = x
    return grad_check(fn, params)


def _key_bias_check(rng, weights) -> float:
    """Largest |gradient| of the key bias, analytic or numeric."""
    _, fn = _attention_loss(rng, weights)
    bk = weights[ATTN_NAMES.index("bk")]
    report = grad_check(fn, {"bk": bk})
    numeric_bound = report.per_input["bk"] * DENOM_FLOOR  # |a - n| with the floor active
    return float(max(np.abs(bk.grad).max(), numeric_bound))


def _physics_check(rng):
    v = Tensor(rng.standard_normal((2, 3, 6)))
    w = Tensor(rng.standard_normal((2, 3, 6)))
    k = build_coupling_matrix(3, 0.1)
    return grad_check(lambda: physics_loss(StatePair(v, w, 0.5), FhnParams(), k), {"v": v, "w": w})


# ------------------------------------------------------------------------- FHN

def fhn_checks() -> list[CheckResult]:
    g = "fhn"
    p = FhnParams()
    v_star, w_star = rest_state(p)
    traj = integrate_rk4(v_star, w_star, p, None, 1.0, 1e-3)
    drift = max(np.abs(traj.v - v_star).max(), np.abs(traj.w - w_star).max())
    ref = integrate_rk4(0.0, 0.0, p, None, 10.0, 1e-4)
    e1 = abs(integrate_rk4(0.0, 0.0, p, None, 10.0, 1e-2).v[0, -1] - ref.v[0, -1])
    e2 = abs(integrate_rk4(0.0, 0.0, p, None, 10.0, 5e-3).v[0, -1] - ref.v[0, -1])
    fine = integrate_rk4(0.0, 0.0, p, None, 40.0, 1e-3)
    norms = []
    for stride in (20, 10):
        s = StatePair(fine.v[..., ::stride], fine.w[..., ::stride], 1e-3 * stride)
        f_v, f_w = fhn_residuals(s, p)
        norms.append(np.sqrt(np.mean(f_v.data ** 2 + f_w.data ** 2)))
    halving = norms[0] / norms[1]
    return [
        _below(g, "rest state stationarity", drift, 1e-6),
        CheckResult(g, "jacobian trace at rest", jacobian_trace(v_star, p), 0.0, ">",
                    jacobian_trace(v_star, p) > 0),
        _at_least(g, "rk4 convergence factor", e1 / e2, 12.0),
        CheckResult(g, "residual halving factor", halving, 1.8, "in", bool(1.8 <= halving <= 2.2), 2.2),
    ]


# ---------------------------------------------------------------------- filter

def filter_checks() -> list[CheckResult]:
    g = "filter"
    fs = 250.0
    c = design_cheby2_bandpass((8.0, 12.0), 4, 30.0, fs)
    grid = np.linspace(0.0, fs / 2, 4096)
    db = 20 * np.log10(np.abs(c.response(grid, fs)) + 1e-300)

    def at(f):
        return db[np.argmin(np.abs(grid - f))]

    bank = design_filter_bank(FilterBankSpec(), fs)
    max_pole = max(np.abs(f.poles()).max() for f in bank)
    return [
        _at_least(g, "passband 10 Hz (dB)", at(10.0), -3.0),
        _below(g, "stopband 4 Hz (dB)", at(4.0), -30.0, strict=False),
        _below(g, "stopband 16 Hz (dB)", at(16.0), -30.0, strict=False),
        _below(g, "max pole radius, default bank", max_pole, 1.0),
    ]


GROUPS: dict[str, Callable[[], list[CheckResult]]] = {
    "gradcheck": gradient_checks,
    "fhn": fhn_checks,
    "filter": filter_checks,
}


def run_checks(only: list[str] | None = None) -> list[CheckResult]:
    results = []
    for name, fn in GROUPS.items():
        if only and name not in only:
            continue
        results.extend(fn())
    return results
