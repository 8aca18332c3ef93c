"""The full model set (PINN trunk, feature extractor, classifier) and checkpoints."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffcore import Module, Tensor, no_grad
from .errors import FormatError
from .featx import Classifier, FeatureExtractor, FeatxConfig
from .fhn import StatePair
from .pinn import PinnConfig, PinnModel

CHECKPOINT_MAGIC = b"NPNW"
CHECKPOINT_VERSION = 1


@dataclass
class NetConfig:
    pinn: PinnConfig
    featx: FeatxConfig
    seed: int = 0

    @classmethod
    def for_input(cls, n_windows: int, n_bands: int, n_channels: int, window_len: int,
                  n_classes: int, seed: int = 0, pinn: dict | None = None,
                  featx: dict | None = None) -> "NetConfig":
        pc = PinnConfig(n_bands=n_bands, n_channels=n_channels, window_len=window_len,
                        n_windows=n_windows, **(pinn or {}))
        fc = FeatxConfig(time_len=n_windows * pc.data_points, n_classes=n_classes, **(featx or {}))
        return cls(pc, fc, seed)

    def to_dict(self) -> dict:
        return {"pinn": self.pinn.to_dict(), "featx": self.featx.to_dict(), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(PinnConfig(**d["pinn"]), FeatxConfig(**d["featx"]), int(d.get("seed", 0)))


class NeuroPhysNet(Module):
    """Input windows -> (v, w) fields -> fused features -> class logits."""

    def __init__(self, cfg: NetConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.pinn = PinnModel(cfg.pinn, rng)
        self.featx = FeatureExtractor(cfg.featx, rng)
        self.head = Classifier(cfg.featx.latent_dim, cfg.featx.n_classes, rng)
        self.rng = rng  # shared by every dropout layer

    def forward(self, x, dt: float | None = None) -> tuple[Tensor, StatePair]:
        fields = self.pinn(x, dt)
        return self.head(self.featx(fields)), fields

    def logits(self, x) -> np.ndarray:
        with no_grad():
            return self.forward(x)[0].data

    def freeze_trunk(self) -> None:
        for layer in self.pinn.trunk():
            layer.set_trainable(False)
        self.pinn.position.trainable = False


# ------------------------------------------------------------------ checkpoints

def save_checkpoint(net: NeuroPhysNet, path, extra: dict | None = None) -> None:
    """Little-endian: magic, u32 version, u32 + JSON config, u32 count, blobs.

    Each blob is u32 name length, UTF-8 name, u32 rank, u32 dims, f64 data.
    """
    record = json.dumps({"net": net.cfg.to_dict(), "extra": extra or {}}, sort_keys=True).encode()
    state = net.state_dict()
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
             struct.pack("<I", len(record)), record, struct.pack("<I", len(state))]
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[NeuroPhysNet, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}", 0)
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise FormatError("truncated checkpoint", pos)
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    (version,) = take("<I")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    (n,) = take("<I")
    if pos + n > len(raw):
        raise FormatError("truncated config record", pos)
    record = json.loads(raw[pos:pos + n])
    pos += n
    (count,) = take("<I")
    state = {}
    for _ in range(count):
        (ln,) = take("<I")
        name = raw[pos:pos + ln].decode()
        pos += ln
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I") if ndim else ()
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(raw):
            raise FormatError(f"truncated data for {name}", pos)
        state[name] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes", pos)
    net = NeuroPhysNet(NetConfig.from_dict(record["net"]))
    net.load_state_dict(state)
    return net, record.get("extra", {})
