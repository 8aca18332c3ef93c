"""Training loop, evaluation, data splits and the experiment protocols."""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .diffcore import Parameter, Tensor, backward, cross_entropy, get_tape, no_grad
from .errors import ConfigurationError, DivergenceError, ParameterError, UsageError
from .fhn import FhnParams, StatePair, build_coupling_matrix, physics_loss
from .network import NetConfig, NeuroPhysNet
from .sigproc import FilterBankSpec, TrialSet, WindowSpec, preprocess

log = logging.getLogger(__name__)

FRACTIONS = (1.0, 0.8, 0.5, 0.3)


@dataclass
class TrainConfig:
    lam: float = 0.1
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 100
    seed: int = 0
    optimizer: str = "adam"
    data_fraction: float = 1.0
    vw_only: bool = False
    coupling_in_loss: bool = True
    coupling_strength: float = 0.1

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigurationError(f"lambda must be >= 0, got {self.lam}")
        if self.lr < 0:
            raise ConfigurationError(f"learning rate must be >= 0, got {self.lr}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch size must be >= 1 and epochs >= 0")
        if not 0.0 < self.data_fraction <= 1.0:
            raise ConfigurationError(f"data fraction must lie in (0, 1], got {self.data_fraction}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class EpochRecord:
    epoch: int
    loss_total: float
    loss_cls: float
    loss_phys: float
    acc_train: float
    acc_eval: float


@dataclass
class MetricsLog:
    records: list[EpochRecord] = field(default_factory=list)
    wall_time: float = 0.0

    HEADER = ("epoch", "loss_total", "loss_cls", "loss_phys", "acc_train", "acc_eval")

    def append(self, rec: EpochRecord) -> None:
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self) -> str:
        lines = [",".join(self.HEADER)]
        for r in self.records:
            lines.append(f"{r.epoch},{r.loss_total:.6g},{r.loss_cls:.6g},{r.loss_phys:.6g},"
                         f"{r.acc_train:.6g},{r.acc_eval:.6g}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


# ---------------------------------------------------------------------- losses

def total_loss(logits, labels, s: StatePair, params: FhnParams, lam: float,
               coupling=None) -> tuple[Tensor, Tensor, Tensor]:
    """Cross-entropy plus ``lam`` times the physics residual loss.

    Returns (total, classification, physics).
    """
    if lam < 0:
        raise ParameterError(f"lambda must be >= 0, got {lam}")
    cls = cross_entropy(logits, labels)
    phys = physics_loss(s, params, coupling)
    return cls + phys * lam, cls, phys


class Adam:
    def __init__(self, params: list[Parameter], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params: list[Parameter], lr: float):
        self.params = params
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            p.data -= self.lr * p.grad


# ---------------------------------------------------------------- preprocessing

@dataclass
class PipelineConfig:
    """Windowing and filter-bank settings; ``None`` means derive from the rate."""

    window_len: int | None = None
    stride: int | None = None
    bands: tuple[tuple[float, float], ...] | None = None
    filter_order: int = 4
    stopband_atten_db: float = 30.0
    transition_hz: float = 2.0
    residual_dt: float = 1.0  # physics time step, model time units per output sample

    def window(self, sample_rate_hz: float) -> WindowSpec:
        d = WindowSpec.default(sample_rate_hz)
        w = self.window_len or d.window_len
        return WindowSpec(w, self.stride or max(1, w // 2))

    def bank(self) -> FilterBankSpec:
        if self.bands is None:
            return FilterBankSpec(order=self.filter_order, stopband_atten_db=self.stopband_atten_db,
                                  transition_hz=self.transition_hz)
        return FilterBankSpec(tuple(self.bands), self.filter_order, self.stopband_atten_db,
                              self.transition_hz)

    def dt(self, sample_rate_hz: float | None = None) -> float:
        return self.residual_dt

    def run(self, data: TrialSet) -> np.ndarray:
        return preprocess(data, self.window(data.sample_rate_hz), self.bank())


def build_network(x: np.ndarray, n_classes: int, seed: int, pinn: dict | None = None,
                  featx: dict | None = None) -> NeuroPhysNet:
    _, W, F, C, om = x.shape
    return NeuroPhysNet(NetConfig.for_input(W, F, C, om, n_classes, seed, pinn, featx))


# ---------------------------------------------------------------------- training

def _physics_setup(net: NeuroPhysNet, cfg: TrainConfig, dt: float):
    params = FhnParams(dt=dt)
    coupling = build_coupling_matrix(net.cfg.pinn.num_nodes, cfg.coupling_strength) \
        if cfg.coupling_in_loss else None
    return params, coupling


def train(net: NeuroPhysNet, x: np.ndarray, y: np.ndarray, cfg: TrainConfig, dt: float,
          x_eval: np.ndarray | None = None, y_eval: np.ndarray | None = None) -> MetricsLog:
    """Mini-batch optimization of cross-entropy + lam * physics loss.

    ``x`` is the preprocessed (B, W, F, C, window) array, ``dt`` the
    residual time step. Shuffling uses a generator seeded from ``cfg.seed``.
    """
    y = np.asarray(y, dtype=np.int64)
    n = len(x)
    if n == 0:
        raise UsageError("training set is empty")
    if cfg.vw_only:
        net.freeze_trunk()
    params, coupling = _physics_setup(net, cfg, dt)
    trainable = net.parameters()
    opt = Adam(trainable, cfg.lr) if cfg.optimizer == "adam" else SGD(trainable, cfg.lr)
    rng = np.random.default_rng([cfg.seed, 1])
    metrics = MetricsLog()
    start = time.perf_counter()
    tape = get_tape()
    for epoch in range(1, cfg.epochs + 1):
        net.train()
        order = rng.permutation(n)
        sums = np.zeros(3)
        correct = 0
        for b, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            tape.clear()
            logits, fields = net(x[idx], dt)
            loss, cls, phys = total_loss(logits, y[idx], fields, params, cfg.lam, coupling)
            values = np.array([loss.item(), cls.item(), phys.item()])
            if not np.all(np.isfinite(values)):
                tape.clear()
                raise DivergenceError(f"non-finite loss {values.tolist()}", epoch=epoch, batch=b)
            net.zero_grad()
            backward(loss)
            opt.step()
            sums += values * len(idx)
            correct += int((logits.data.argmax(axis=1) == y[idx]).sum())
        acc_train = correct / n
        if x_eval is not None and len(x_eval):
            acc_eval = evaluate(net, x_eval, y_eval)[0]
        else:
            acc_eval = evaluate(net, x, y)[0]
        l_tot, l_cls, l_phys = sums / n
        metrics.append(EpochRecord(epoch, l_tot, l_cls, l_phys, acc_train, acc_eval))
        log.info("epoch %d loss %.4g (cls %.4g phys %.4g) acc %.3f/%.3f",
                 epoch, l_tot, l_cls, l_phys, acc_train, acc_eval)
    metrics.wall_time = time.perf_counter() - start
    return metrics


def evaluate(net, x: np.ndarray, y: np.ndarray, n_classes: int | None = None,
             batch_size: int = 256) -> tuple[float, np.ndarray]:
    """Eval-mode accuracy and confusion matrix (rows: true, columns: predicted).

    Argmax ties resolve to the lowest class index.
    """
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise UsageError("cannot evaluate on an empty set")
    was_training = getattr(net, "training", False)
    net.eval()
    try:
        logits = np.concatenate([net.logits(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])
    finally:
        if was_training:
            net.train()
    k = n_classes or logits.shape[1]
    pred = logits.argmax(axis=1)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (y, pred), 1)
    return float((pred == y).mean()), confusion


# ------------------------------------------------------------------------ splits

def stratified_subsample(labels: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Sorted indices of round(fraction * n) trials, allocated per class by largest remainder."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigurationError(f"fraction must lie in (0, 1], got {fraction}")
    labels = np.asarray(labels)
    n_keep = int(round(fraction * len(labels)))
    classes = np.unique(labels)
    counts = np.array([(labels == c).sum() for c in classes])
    quota = counts * n_keep / len(labels)
    take = np.floor(quota).astype(int)
    short = n_keep - take.sum()
    for i in np.argsort(-(quota - take), kind="stable")[:short]:
        take[i] += 1
    picked = [rng.permutation(np.flatnonzero(labels == c))[:t] for c, t in zip(classes, take)]
    return np.sort(np.concatenate(picked)) if picked else np.array([], dtype=np.int64)


def stratified_kfold(labels: np.ndarray, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Validation index sets that partition the trials, class-balanced."""
    if k < 2:
        raise ConfigurationError(f"need k >= 2 folds, got {k}")
    labels = np.asarray(labels)
    fold_of = np.empty(len(labels), dtype=np.int64)
    offset = 0
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        fold_of[idx] = (np.arange(idx.size) + offset) % k
        offset += idx.size
    return [np.flatnonzero(fold_of == f) for f in range(k)]


def holdout_split(labels: np.ndarray, eval_fraction: float, rng: np.random.Generator):
    """(train_idx, eval_idx) with a stratified eval share."""
    ev = stratified_subsample(labels, eval_fraction, rng)
    mask = np.ones(len(labels), dtype=bool)
    mask[ev] = False
    return np.flatnonzero(mask), ev


# --------------------------------------------------------------------- protocols

@dataclass
class ProtocolConfig:
    protocol: str = "holdout"        # "holdout" or "cv"
    folds: int = 5
    eval_fraction: float = 0.2
    fractions: tuple[float, ...] = (1.0,)
    seeds: tuple[int, ...] = (0,)
    jobs: int = 1

    def __post_init__(self):
        if self.protocol not in ("holdout", "cv"):
            raise ConfigurationError(f"unknown protocol {self.protocol!r}")
        for f in self.fractions:
            if not 0.0 < f <= 1.0:
                raise ConfigurationError(f"fraction must lie in (0, 1], got {f}")


@dataclass
class ReportRow:
    protocol: str
    fraction: float
    seed: int
    fold: int
    acc: float


def fit_and_score(x: np.ndarray, y: np.ndarray, train_idx: np.ndarray, eval_idx: np.ndarray,
                  n_classes: int, cfg: TrainConfig, dt: float, net_overrides: dict | None = None,
                  ) -> tuple[float, MetricsLog]:
    """Train a fresh network on a (sub)sampled training split; eval accuracy."""
    rng = np.random.default_rng([cfg.seed, 2])
    if cfg.data_fraction < 1.0:
        keep = stratified_subsample(y[train_idx], cfg.data_fraction, rng)
        train_idx = train_idx[keep]
    overrides = net_overrides or {}
    net = build_network(x, n_classes, cfg.seed, overrides.get("pinn"), overrides.get("featx"))
    metrics = train(net, x[train_idx], y[train_idx], cfg, dt, x[eval_idx], y[eval_idx])
    return evaluate(net, x[eval_idx], y[eval_idx], n_classes)[0], metrics


def _task(args):
    x, y, tr, ev, k, cfg, dt, overrides, row = args
    acc, _ = fit_and_score(x, y, tr, ev, k, cfg, dt, overrides)
    return replace(row, acc=acc)


def run_protocol(data: TrialSet, pipe: PipelineConfig, train_cfg: TrainConfig,
                 proto: ProtocolConfig, eval_data: TrialSet | None = None,
                 net_overrides: dict | None = None) -> list[ReportRow]:
    """Run every (fraction, seed, fold) combination and return one row each.

    Holdout uses ``eval_data`` when given, else a stratified split of
    ``data``. Independent runs are spread over ``proto.jobs`` processes.
    """
    x = pipe.run(data)
    y = data.labels
    dt = pipe.dt(data.sample_rate_hz)
    name = "cv" if proto.protocol == "cv" else "holdout"
    if train_cfg.vw_only:
        name += "-vw"
    tasks = []
    for seed in proto.seeds:
        split_rng = np.random.default_rng([seed, 3])
        if proto.protocol == "cv":
            if eval_data is not None:
                raise ConfigurationError("cross-validation uses a single data set")
            folds = stratified_kfold(y, proto.folds, split_rng)
            splits = [(np.setdiff1d(np.arange(len(y)), f), f) for f in folds]
            xs, ys = x, y
        elif eval_data is not None:
            xe = pipe.run(eval_data)
            xs, ys = np.concatenate([x, xe]), np.concatenate([y, eval_data.labels])
            splits = [(np.arange(len(y)), np.arange(len(y), len(ys)))]
        else:
            splits = [holdout_split(y, proto.eval_fraction, split_rng)]
            xs, ys = x, y
        for fraction in proto.fractions:
            cfg = replace(train_cfg, seed=seed, data_fraction=fraction)
            for fold, (tr, ev) in enumerate(splits):
                row = ReportRow(name, fraction, seed, fold, float("nan"))
                tasks.append((xs, ys, tr, ev, data.n_classes, cfg, dt, net_overrides, row))
    if proto.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=proto.jobs) as pool:
            return list(pool.map(_task, tasks))
    return [_task(t) for t in tasks]


def write_report_csv(rows: list[ReportRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["protocol", "fraction", "seed", "fold", "acc"])
        for r in rows:
            writer.writerow([r.protocol, f"{r.fraction:g}", r.seed, r.fold, f"{r.acc:.6g}"])


def summarize(rows: list[ReportRow]) -> dict[tuple[str, float], float]:
    """Mean accuracy per (protocol, fraction)."""
    groups: dict[tuple[str, float], list[float]] = {}
    for r in rows:
        groups.setdefault((r.protocol, r.fraction), []).append(r.acc)
    return {key: float(np.mean(v)) for key, v in groups.items()}


def config_dict(cfg) -> dict:
    return asdict(cfg)
