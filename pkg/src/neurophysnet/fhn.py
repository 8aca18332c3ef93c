"""Coupled FitzHugh-Nagumo dynamics, reference integration and physics loss.

Variables are (v, w): v is the fast activation (membrane potential), w the
slow recovery. Node index is the second-to-last axis, time the last.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .diffcore import Tensor, as_tensor, ops
from .errors import DivergenceError, ParameterError, ShapeError
from .sigproc import TrialSet


@dataclass(frozen=True)
class FhnParams:
    epsilon: float = 0.08
    a: float = 0.7
    b: float = 0.8
    stimulus: float = 0.5
    dt: float = 1.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ParameterError(f"epsilon must be positive, got {self.epsilon}")
        if not self.dt > 0:
            raise ParameterError(f"dt must be positive, got {self.dt}")


@dataclass(frozen=True)
class CouplingMatrix:
    matrix: np.ndarray
    strength: float

    @property
    def n_nodes(self) -> int:
        return self.matrix.shape[0]


@dataclass
class StatePair:
    """Fields v and w of identical shape ``(..., nodes, time)``."""

    v: Tensor | np.ndarray
    w: Tensor | np.ndarray
    dt: Optional[float] = None

    def __post_init__(self):
        if tuple(self.v.shape) != tuple(self.w.shape):
            raise ShapeError(f"v shape {tuple(self.v.shape)} != w shape {tuple(self.w.shape)}")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.v.shape)


def build_coupling_matrix(n_nodes: int, strength: float = 0.1) -> CouplingMatrix:
    """All-to-all coupling: ``strength`` off the diagonal, zero on it."""
    if n_nodes < 1:
        raise ParameterError(f"need at least one node, got {n_nodes}")
    k = (np.ones((n_nodes, n_nodes)) - np.eye(n_nodes)) * strength
    return CouplingMatrix(k, float(strength))


def _matrix(coupling) -> np.ndarray | None:
    if coupling is None:
        return None
    return coupling.matrix if isinstance(coupling, CouplingMatrix) else np.asarray(coupling, dtype=float)


def coupling_term(v: np.ndarray, coupling) -> np.ndarray:
    """``sum_j K_ij (v_j - v_i)`` over the last axis of ``v``.

    A stacked ``(..., N, N)`` matrix applies one coupling per leading index.
    """
    k = _matrix(coupling)
    if k.ndim == 2:
        return v @ k.T - v * k.sum(axis=1)
    return np.einsum("...ij,...j->...i", k, v) - v * k.sum(axis=-1)


def fhn_rhs(v, w, params: FhnParams = FhnParams(), coupling=None):
    """Time derivatives (dv, dw) with nodes on the last axis."""
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    dv = v - v ** 3 / 3.0 - w + params.stimulus
    if coupling is not None:
        dv = dv + coupling_term(v, coupling)
    dw = params.epsilon * (v + params.a - params.b * w)
    return dv, dw


def rest_state(params: FhnParams = FhnParams()) -> tuple[float, float]:
    """The uncoupled fixed point, from the real root of the nullcline cubic."""
    # v - v^3/3 - (v + a)/b + I = 0  ->  v^3 + 3(1/b - 1) v + 3(a/b - I) = 0
    roots = np.roots([1.0, 0.0, 3.0 * (1.0 / params.b - 1.0), 3.0 * (params.a / params.b - params.stimulus)])
    real = roots[np.abs(roots.imag) < 1e-9].real
    v = float(real.min())
    return v, (v + params.a) / params.b


def jacobian_trace(v: float, params: FhnParams = FhnParams()) -> float:
    return 1.0 - v * v - params.epsilon * params.b


def integrate_rk4(v0, w0, params: FhnParams = FhnParams(), coupling=None, t_end: float = 1.0,
                  dt_int: float = 1e-3, record_every: int = 1) -> StatePair:
    """Classical fixed-step RK4.

    ``v0``/``w0`` may carry leading batch axes; nodes are the last axis.
    Returns fields shaped ``(..., nodes, samples)`` including the initial
    state, sampled every ``record_every`` steps.
    """
    if not dt_int > 0:
        raise ParameterError(f"dt_int must be positive, got {dt_int}")
    if t_end < dt_int:
        raise ParameterError(f"t_end {t_end} shorter than one step {dt_int}")
    v = np.array(v0, dtype=float, ndmin=1)
    w = np.array(w0, dtype=float, ndmin=1)
    n_steps = int(round(t_end / dt_int))
    n_rec = n_steps // record_every + 1
    vs = np.empty(v.shape + (n_rec,))
    ws = np.empty(w.shape + (n_rec,))
    vs[..., 0], ws[..., 0] = v, w
    h = dt_int
    eps, a, b, stim = params.epsilon, params.a, params.b, params.stimulus
    k = _matrix(coupling)
    if k is not None and not k.any():
        k = None
    if k is not None:
        rowsum = k.sum(axis=-1)
        kt = k.T if k.ndim == 2 else None

    def rhs(v, w):
        # fhn_rhs without the per-call conversions; this loop runs millions of times
        dv = v - v * v * v / 3.0 - w + stim
        if k is not None:
            dv += (v @ kt if kt is not None else np.einsum("...ij,...j->...i", k, v)) - v * rowsum
        return dv, eps * (v + a - b * w)

    # overflow surfaces as DivergenceError below, not as a numpy warning
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(1, n_steps + 1):
            k1v, k1w = rhs(v, w)
            k2v, k2w = rhs(v + 0.5 * h * k1v, w + 0.5 * h * k1w)
            k3v, k3w = rhs(v + 0.5 * h * k2v, w + 0.5 * h * k2w)
            k4v, k4w = rhs(v + h * k3v, w + h * k3w)
            v = v + h / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
            w = w + h / 6.0 * (k1w + 2 * k2w + 2 * k3w + k4w)
            if step % record_every == 0:
                if not (np.isfinite(v).all() and np.isfinite(w).all()):
                    raise DivergenceError("non-finite state in RK4 integration", step=step)
                vs[..., step // record_every] = v
                ws[..., step // record_every] = w
    if not (np.all(np.isfinite(v)) and np.all(np.isfinite(w))):
        raise DivergenceError("non-finite state in RK4 integration", step=n_steps)
    return StatePair(vs, ws, dt_int * record_every)


def finite_diff_dt(x, dt: float) -> Tensor:
    """Forward difference along the last axis; one sample shorter."""
    x = as_tensor(x)
    if x.shape[-1] < 2:
        raise ShapeError(f"need at least 2 time points, got shape {x.shape}")
    return (x[..., 1:] - x[..., :-1]) * (1.0 / dt)


def fhn_residuals(s: StatePair, params: FhnParams = FhnParams(), coupling=None):
    """Residuals of the discretized dynamics on the first T-1 samples."""
    v, w = as_tensor(s.v), as_tensor(s.w)
    if v.shape != w.shape:
        raise ShapeError(f"v shape {v.shape} != w shape {w.shape}")
    if v.ndim < 2 or v.shape[-1] < 2:
        raise ShapeError(f"need (..., nodes, time>=2) fields, got {v.shape}")
    dt = s.dt if s.dt is not None else params.dt
    dv = finite_diff_dt(v, dt)
    dw = finite_diff_dt(w, dt)
    v0, w0 = v[..., :-1], w[..., :-1]
    rhs_v = v0 - v0 ** 3 * (1.0 / 3.0) - w0 + params.stimulus
    k = _matrix(coupling)
    if k is not None:
        if k.shape != (v.shape[-2], v.shape[-2]):
            raise ShapeError(f"coupling matrix {k.shape} does not match {v.shape[-2]} nodes")
        rhs_v = rhs_v + ops.matmul(Tensor(k), v0) - v0 * Tensor(k.sum(axis=1)[:, None])
    f_v = dv - rhs_v
    f_w = dw - (v0 + params.a - w0 * params.b) * params.epsilon
    return f_v, f_w


def physics_loss(s: StatePair, params: FhnParams = FhnParams(), coupling=None) -> Tensor:
    """Mean over residual points of ``f_v**2 + f_w**2``."""
    f_v, f_w = fhn_residuals(s, params, coupling)
    return (f_v * f_v + f_w * f_w).mean()


def write_trajectory_csv(path, s: StatePair, t0: float = 0.0, skip_initial: bool = True) -> int:
    """Write ``t,node,v,w`` rows (9 significant digits); returns the row count."""
    v = np.asarray(s.v.data if isinstance(s.v, Tensor) else s.v)
    w = np.asarray(s.w.data if isinstance(s.w, Tensor) else s.w)
    v = v.reshape(-1, v.shape[-1])
    w = w.reshape(-1, w.shape[-1])
    start = 1 if skip_initial else 0
    n_nodes, n_t = v.shape
    dt = s.dt or 1.0
    rows = 0
    with open(path, "w", newline="") as fh:
        fh.write("t,node,v,w\n")
        for k in range(start, n_t):
            t = f"{t0 + k * dt:.9g}"
            fh.write("".join(f"{t},{i},{v[i, k]:.9g},{w[i, k]:.9g}\n" for i in range(n_nodes)))
            rows += n_nodes
    return rows


# ----------------------------------------------------------- synthetic data

@dataclass(frozen=True)
class SynthConfig:
    n_trials: int = 200
    n_channels: int = 4
    n_classes: int = 2
    noise_sigma: float = 1.0
    sample_rate_hz: float = 100.0
    n_samples: int = 200
    n_nodes: int = 4
    time_scale: float = 400.0   # model time units per second
    amplitude: float = 10.0     # microvolts per unit of v
    dt_int: float = 0.2
    burn_in: float = 50.0       # model time discarded before recording


def class_params(k: int) -> tuple[float, float]:
    """(stimulus, coupling strength) used for class ``k``."""
    return 0.3 + 0.1 * k, 0.05 + 0.05 * k


def synthesize_trialset(n_trials: int = 200, n_channels: int = 4, classes: int = 2,
                        noise_sigma: float = 1.0, seed: int = 0, **overrides) -> TrialSet:
    """Labeled trials generated from class-specific coupled FHN networks.

    Each trial starts from a random state, is integrated with RK4, has its
    node potentials mixed to ``n_channels`` by one seeded matrix, and gets
    white noise of scale ``noise_sigma``. Labels cycle 0..classes-1.
    """
    if classes < 2:
        raise ParameterError(f"need at least 2 classes, got {classes}")
    cfg = SynthConfig(n_trials=n_trials, n_channels=n_channels, n_classes=classes,
                      noise_sigma=noise_sigma, **overrides)
    rng = np.random.default_rng(seed)
    mixing = rng.standard_normal((cfg.n_channels, cfg.n_nodes)) / np.sqrt(cfg.n_nodes)
    labels = np.arange(cfg.n_trials) % classes
    if cfg.n_trials == 0:
        return TrialSet(np.zeros((0, cfg.n_channels, cfg.n_samples), np.float32), labels,
                        cfg.sample_rate_hz, classes)
    steps_per_sample = cfg.time_scale / cfg.sample_rate_hz / cfg.dt_int
    record_every = int(round(steps_per_sample))
    if record_every < 1 or abs(record_every - steps_per_sample) > 1e-9:
        raise ParameterError("time_scale / sample_rate must be a multiple of dt_int")
    burn_steps = int(round(cfg.burn_in / cfg.dt_int / record_every))
    t_end = (burn_steps + cfg.n_samples - 1) * record_every * cfg.dt_int
    init = rng.uniform(-2.0, 2.0, size=(cfg.n_trials, 2, cfg.n_nodes))
    stim = np.array([class_params(k)[0] for k in labels])[:, None]
    coupling = np.stack([build_coupling_matrix(cfg.n_nodes, class_params(k)[1]).matrix
                         for k in labels])
    # stimulus as a per-trial column lets every class integrate in one call
    params = FhnParams(stimulus=stim)
    traj = integrate_rk4(init[:, 0], init[:, 1], params, coupling, t_end, cfg.dt_int, record_every)
    v = traj.v[..., burn_steps:burn_steps + cfg.n_samples]  # (trials, nodes, samples)
    trials = cfg.amplitude * np.einsum("cn,bnt->bct", mixing, v)
    trials += cfg.noise_sigma * rng.standard_normal(trials.shape)
    return TrialSet(trials.astype(np.float32), labels, cfg.sample_rate_hz, classes)
