"""Convolution + transformer network mapping filter-bank windows to (v, w) fields."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .diffcore import (BatchNorm, Conv2d, Dropout, Linear, Module, Parameter,
                       TransformerEncoder, as_tensor, ops)
from .errors import ConfigurationError
from .fhn import StatePair


def _conv_len(n: int, k: int, p: int) -> int:
    return n + 2 * p - k + 1


def _pool_len(n: int, k: int, s: int) -> int:
    return (n - k) // s + 1 if n >= k else 0


@dataclass
class PinnConfig:
    n_bands: int
    n_channels: int
    window_len: int
    n_windows: int
    f1: int = 32
    f2: int = 64
    k1: tuple[int, int] = (3, 3)
    k2: tuple[int, int] = (3, 3)
    p1: tuple[int, int] = (1, 1)
    p2: tuple[int, int] = (1, 1)
    pool: tuple[int, int] = (2, 2)
    pool_stride: tuple[int, int] = (2, 2)
    hidden_dim: int = 128
    layers: int = 2
    heads: int = 4
    dropout: float = 0.5
    encoder_dropout: float = 0.1
    num_nodes: int | None = None
    data_points: int | None = None

    def __post_init__(self):
        for name in ("k1", "k2", "p1", "p2", "pool", "pool_stride"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.num_nodes is None:
            self.num_nodes = self.n_channels
        if self.data_points is None:
            self.data_points = max(2, self.window_len // 5)
        self.validate()

    def validate(self) -> None:
        counts = dict(n_bands=self.n_bands, n_channels=self.n_channels, window_len=self.window_len,
                      n_windows=self.n_windows, f1=self.f1, f2=self.f2, hidden_dim=self.hidden_dim,
                      layers=self.layers, heads=self.heads, num_nodes=self.num_nodes,
                      data_points=self.data_points)
        for name, v in counts.items():
            if v < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {v}")
        if self.hidden_dim % self.heads:
            raise ConfigurationError(f"hidden_dim {self.hidden_dim} not divisible by {self.heads} heads")
        for rate in (self.dropout, self.encoder_dropout):
            if not 0.0 <= rate < 1.0:
                raise ConfigurationError(f"dropout must lie in [0, 1), got {rate}")
        self.flat_dim()

    def feature_map(self) -> tuple[int, int, int]:
        """(channels, height, width) after the second pooling stage."""
        h, w = self.n_channels, self.window_len
        for stage, (k, p) in (("conv1", (self.k1, self.p1)), ("conv2", (self.k2, self.p2))):
            h, w = _conv_len(h, k[0], p[0]), _conv_len(w, k[1], p[1])
            if h < 1 or w < 1:
                raise ConfigurationError(f"{stage}: kernel {k} does not fit the padded input")
            pool_stage = stage.replace("conv", "pool")
            h = _pool_len(h, self.pool[0], self.pool_stride[0])
            w = _pool_len(w, self.pool[1], self.pool_stride[1])
            if h < 1 or w < 1:
                raise ConfigurationError(f"{pool_stage}: window {self.pool} does not fit the feature map")
        return self.f2, h, w

    def flat_dim(self) -> int:
        c, h, w = self.feature_map()
        return c * h * w

    def to_dict(self) -> dict:
        return asdict(self)


class PinnModel(Module):
    """conv-bn-relu-pool x2 -> fc -> transformer over windows -> (v, w) head."""

    def __init__(self, cfg: PinnConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.conv1 = Conv2d(cfg.n_bands, cfg.f1, cfg.k1, cfg.p1, rng)
        self.bn1 = BatchNorm(cfg.f1)
        self.conv2 = Conv2d(cfg.f1, cfg.f2, cfg.k2, cfg.p2, rng)
        self.bn2 = BatchNorm(cfg.f2)
        self.fc = Linear(cfg.flat_dim(), cfg.hidden_dim, rng)
        self.drop = Dropout(cfg.dropout, rng)
        self.position = Parameter(rng.normal(0.0, 0.02, size=(cfg.n_windows, cfg.hidden_dim)))
        self.encoder = TransformerEncoder(cfg.hidden_dim, cfg.heads, cfg.layers, cfg.encoder_dropout, rng)
        self.head = Linear(cfg.hidden_dim, 2 * cfg.num_nodes * cfg.data_points, rng)

    def trunk(self) -> list[Module]:
        """Layers before the output head."""
        return [self.conv1, self.bn1, self.conv2, self.bn2, self.fc, self.encoder]

    def forward(self, x, dt: float | None = None) -> StatePair:
        cfg = self.cfg
        x = as_tensor(x)
        if x.ndim != 5:
            raise ConfigurationError(f"input: expected (B, W, F, C, window), got {x.shape}")
        B, W, F, C, om = x.shape
        if (F, C, om) != (cfg.n_bands, cfg.n_channels, cfg.window_len):
            raise ConfigurationError(
                f"input: (F, C, window) = {(F, C, om)} but model expects "
                f"{(cfg.n_bands, cfg.n_channels, cfg.window_len)}")
        if W > cfg.n_windows:
            raise ConfigurationError(f"input: {W} windows exceed the {cfg.n_windows} position slots")
        h = x.reshape(B * W, F, C, om)
        h = ops.maxpool2d(ops.relu(self.bn1(self.conv1(h))), cfg.pool, cfg.pool_stride)
        h = ops.maxpool2d(ops.relu(self.bn2(self.conv2(h))), cfg.pool, cfg.pool_stride)
        h = h.reshape(B * W, -1)
        h = self.drop(ops.relu(self.fc(h)))
        seq = h.reshape(B, W, cfg.hidden_dim).transpose(1, 0, 2)
        seq = seq + self.position[:W].reshape(W, 1, cfg.hidden_dim)
        enc = self.encoder(seq).transpose(1, 0, 2).reshape(B * W, cfg.hidden_dim)
        out = self.head(enc).reshape(B, W, 2 * cfg.num_nodes, cfg.data_points)
        n = cfg.num_nodes
        return StatePair(out[:, :, :n, :], out[:, :, n:, :], dt)
