"""Node-level temporal features from the (v, w) fields, and the class head."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .diffcore import BatchNorm, Conv1d, LayerNorm, Linear, Module, Tensor, as_tensor, ops
from .errors import ConfigurationError
from .fhn import StatePair


@dataclass
class FeatxConfig:
    time_len: int          # windows * data_points
    f1: int = 16
    f2: int = 32
    kernel: int = 5
    padding: int = 2
    pool: int = 2
    pool_stride: int = 2
    latent_dim: int = 64
    n_classes: int = 2

    def __post_init__(self):
        for name, v in asdict(self).items():
            if v < 1 and name != "padding":
                raise ConfigurationError(f"{name} must be >= 1, got {v}")
        if self.padding < 0:
            raise ConfigurationError(f"padding must be >= 0, got {self.padding}")
        self.flat_dim()

    def flat_dim(self) -> int:
        t = self.time_len
        for stage in (1, 2):
            t = t + 2 * self.padding - self.kernel + 1
            if t < 1:
                raise ConfigurationError(f"conv{stage}: kernel {self.kernel} longer than padded series")
            if t < self.pool:
                raise ConfigurationError(
                    f"pool{stage}: time axis of length {t} too short for pooling window {self.pool}")
            t = (t - self.pool) // self.pool_stride + 1
        return self.f2 * t

    def to_dict(self) -> dict:
        return asdict(self)


class FeatureBranch(Module):
    """conv1d-bn-relu-pool x2 -> flatten -> fc -> relu, on (rows, 1, T)."""

    def __init__(self, cfg: FeatxConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.conv1 = Conv1d(1, cfg.f1, cfg.kernel, cfg.padding, rng)
        self.bn1 = BatchNorm(cfg.f1)
        self.conv2 = Conv1d(cfg.f1, cfg.f2, cfg.kernel, cfg.padding, rng)
        self.bn2 = BatchNorm(cfg.f2)
        self.fc = Linear(cfg.flat_dim(), cfg.latent_dim, rng)

    def forward(self, x):
        c = self.cfg
        h = ops.maxpool1d(ops.relu(self.bn1(self.conv1(x))), c.pool, c.pool_stride)
        h = ops.maxpool1d(ops.relu(self.bn2(self.conv2(h))), c.pool, c.pool_stride)
        return ops.relu(self.fc(h.reshape(h.shape[0], -1)))


class FeatureExtractor(Module):
    """Separate v and w branches fused by addition and layer normalization."""

    def __init__(self, cfg: FeatxConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.v_branch = FeatureBranch(cfg, rng)
        self.w_branch = FeatureBranch(cfg, rng)
        self.norm = LayerNorm(cfg.latent_dim)

    @staticmethod
    def fold(x) -> Tensor:
        """(B, W, N, P) -> (B*N, 1, W*P): nodes to rows, windows into time."""
        x = as_tensor(x)
        B, W, N, P = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B * N, 1, W * P)

    def node_features(self, s: StatePair) -> Tensor:
        """Fused per-node features, shaped (B, N, latent)."""
        B, W, N, P = s.shape
        if W * P != self.cfg.time_len:
            raise ConfigurationError(
                f"fields carry {W}x{P}={W * P} time points, extractor built for {self.cfg.time_len}")
        v_fc = self.v_branch(self.fold(s.v))
        w_fc = self.w_branch(self.fold(s.w))
        return self.norm(v_fc + w_fc).reshape(B, N, self.cfg.latent_dim)

    def forward(self, s: StatePair) -> Tensor:
        return self.node_features(s).mean(axis=1)


class Classifier(Module):
    def __init__(self, latent_dim: int, n_classes: int, rng: np.random.Generator):
        self.linear = Linear(latent_dim, n_classes, rng)

    def forward(self, features):
        return self.linear(features)


def extract_features(s: StatePair, extractor: FeatureExtractor) -> Tensor:
    return extractor(s)


def classify(features, head: Classifier) -> Tensor:
    return head(features)
