"""Trial containers, windowing, Chebyshev II filter banks and EEGB files."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal

from .errors import ConfigurationError, DataError, DesignError, FormatError

EEGB_MAGIC = b"EEGB"
EEGB_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIf")


@dataclass
class TrialSet:
    """Labeled trials shaped (n_trials, channels, samples)."""

    trials: np.ndarray
    labels: np.ndarray
    sample_rate_hz: float
    n_classes: int

    def __post_init__(self):
        self.trials = np.asarray(self.trials)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.trials.ndim != 3:
            raise DataError(f"trials must be (n, channels, samples), got shape {self.trials.shape}")
        if self.labels.shape != (self.trials.shape[0],):
            raise DataError(f"{self.labels.size} labels for {self.trials.shape[0]} trials")
        if self.sample_rate_hz <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return self.trials.shape[0]

    @property
    def channel_count(self) -> int:
        return self.trials.shape[1]

    @property
    def n_samples(self) -> int:
        return self.trials.shape[2]

    def subset(self, index) -> "TrialSet":
        return TrialSet(self.trials[index], self.labels[index], self.sample_rate_hz, self.n_classes)


@dataclass(frozen=True)
class WindowSpec:
    window_len: int
    stride: int

    def __post_init__(self):
        if self.window_len <= 0 or self.stride <= 0 or self.stride > self.window_len:
            raise ConfigurationError(
                f"window spec needs 0 < stride <= window, got window={self.window_len}, stride={self.stride}")

    @classmethod
    def default(cls, sample_rate_hz: float) -> "WindowSpec":
        """One-second windows with half-second hop."""
        w = int(round(sample_rate_hz))
        return cls(w, max(1, w // 2))

    def n_windows(self, n_samples: int) -> int:
        if self.window_len > n_samples:
            raise ConfigurationError(f"window length {self.window_len} exceeds trial length {n_samples}")
        return (n_samples - self.window_len) // self.stride + 1


def default_bands() -> tuple[tuple[float, float], ...]:
    return tuple((float(lo), float(lo + 4)) for lo in range(4, 40, 4))


@dataclass(frozen=True)
class FilterBankSpec:
    bands: tuple[tuple[float, float], ...] = field(default_factory=default_bands)
    order: int = 4
    stopband_atten_db: float = 30.0
    transition_hz: float = 2.0

    def __post_init__(self):
        if not self.bands:
            raise ConfigurationError("filter bank needs at least one band")
        object.__setattr__(self, "bands", tuple((float(lo), float(hi)) for lo, hi in self.bands))

    def validate(self, sample_rate_hz: float) -> None:
        nyq = sample_rate_hz / 2.0
        for lo, hi in self.bands:
            if not 0 < lo < hi < nyq:
                raise DesignError(f"band ({lo}, {hi}) Hz must satisfy 0 < low < high < {nyq} Hz")


@dataclass(frozen=True)
class BiquadCascade:
    """Second-order sections ``(b0, b1, b2, a1, a2)`` with a separate gain."""

    sections: np.ndarray
    gain: float

    def sos(self) -> np.ndarray:
        """scipy-style ``(n, 6)`` array with the gain folded into section 0."""
        s = np.empty((len(self.sections), 6))
        s[:, :3] = self.sections[:, :3]
        s[:, 3] = 1.0
        s[:, 4:] = self.sections[:, 3:]
        s[0, :3] *= self.gain
        return s

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots([1.0, a1, a2]) for a1, a2 in self.sections[:, 3:]])

    def is_stable(self) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1.0))

    def response(self, freqs_hz: np.ndarray, sample_rate_hz: float) -> np.ndarray:
        """Complex frequency response evaluated directly from the sections."""
        z = np.exp(-2j * np.pi * np.asarray(freqs_hz, dtype=float) / sample_rate_hz)
        h = np.full(z.shape, self.gain, dtype=complex)
        for b0, b1, b2, a1, a2 in self.sections:
            h *= (b0 + b1 * z + b2 * z * z) / (1.0 + a1 * z + a2 * z * z)
        return h

    def filter(self, x: np.ndarray, axis: int = -1) -> np.ndarray:
        """Causal filtering from zero initial state."""
        return signal.sosfilt(self.sos(), x, axis=axis)


def design_cheby2_bandpass(band: tuple[float, float], order: int, atten_db: float,
                           sample_rate_hz: float, transition_hz: float = 2.0) -> BiquadCascade:
    """Chebyshev II bandpass whose stopband starts ``transition_hz`` outside ``band``."""
    lo, hi = float(band[0]), float(band[1])
    nyq = sample_rate_hz / 2.0
    if not 0 < lo < hi < nyq:
        raise DesignError(f"band ({lo}, {hi}) Hz must satisfy 0 < low < high < {nyq} Hz")
    stop = (lo - transition_hz, hi + transition_hz)
    if not 0 < stop[0] < stop[1] < nyq:
        raise DesignError(f"stopband edges {stop} Hz fall outside (0, {nyq}) Hz")
    if order < 1 or atten_db <= 0:
        raise DesignError(f"need order >= 1 and positive attenuation, got {order}, {atten_db}")
    sos = signal.cheby2(order, atten_db, stop, btype="bandpass", fs=sample_rate_hz, output="sos")
    gain = float(np.prod(sos[:, 0]))
    if gain == 0.0:
        raise DesignError(f"degenerate design for band {band}")
    sections = np.column_stack([sos[:, 0:3] / sos[:, 0:1], sos[:, 4:6]])
    cascade = BiquadCascade(sections, gain)
    if not cascade.is_stable():
        raise DesignError(f"band {band}: pole on or outside the unit circle")
    return cascade


@lru_cache(maxsize=64)
def _cached_bank(spec: FilterBankSpec, sample_rate_hz: float) -> tuple[BiquadCascade, ...]:
    spec.validate(sample_rate_hz)
    return tuple(design_cheby2_bandpass(b, spec.order, spec.stopband_atten_db, sample_rate_hz,
                                        spec.transition_hz) for b in spec.bands)


def design_filter_bank(spec: FilterBankSpec, sample_rate_hz: float) -> tuple[BiquadCascade, ...]:
    return _cached_bank(spec, float(sample_rate_hz))


def segment_temporal(x, spec: WindowSpec) -> np.ndarray:
    """Cut (B, C, T) trials into (B, W, C, window) slices; the tail is dropped."""
    arr = x.trials if isinstance(x, TrialSet) else np.asarray(x)
    n_win = spec.n_windows(arr.shape[-1])
    win = sliding_window_view(arr, spec.window_len, axis=-1)[:, :, ::spec.stride][:, :, :n_win]
    return np.ascontiguousarray(win.transpose(0, 2, 1, 3), dtype=np.float64)


def apply_filter_bank(x: np.ndarray, spec: FilterBankSpec, sample_rate_hz: float) -> np.ndarray:
    """(B, W, C, window) -> (B, W, F, C, window), each window filtered from zero state."""
    x = np.asarray(x, dtype=np.float64)
    bank = design_filter_bank(spec, sample_rate_hz)
    out = np.stack([f.filter(x, axis=-1) for f in bank], axis=2)
    return out


def preprocess(data: TrialSet, window: WindowSpec, bank: FilterBankSpec) -> np.ndarray:
    """Segment then band-decompose: the network's (B, W, F, C, window) input."""
    return apply_filter_bank(segment_temporal(data, window), bank, data.sample_rate_hz)


# ---------------------------------------------------------------------- EEGB

def save_eegb(data: TrialSet, path) -> None:
    n, C, T = data.trials.shape
    if data.n_classes > 256:
        raise DataError("EEGB stores labels as u8; at most 256 classes")
    rec = np.empty(n, dtype=_record_dtype(C, T))
    rec["label"] = data.labels
    rec["x"] = data.trials
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(EEGB_MAGIC, EEGB_VERSION, n, C, T, data.n_classes, data.sample_rate_hz))
        fh.write(rec.tobytes())


def _record_dtype(C: int, T: int) -> np.dtype:
    return np.dtype([("label", "u1"), ("x", "<f4", (C, T))])


def load_eegb(path) -> TrialSet:
    raw = Path(path).read_bytes()
    return parse_eegb(raw)


def parse_eegb(raw: bytes) -> TrialSet:
    if len(raw) < 4 or raw[:4] != EEGB_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {EEGB_MAGIC!r}", 0)
    if len(raw) < _HEADER.size:
        raise FormatError(f"truncated header: {len(raw)} of {_HEADER.size} bytes", len(raw))
    _, version, n, C, T, n_classes, fs = _HEADER.unpack_from(raw, 0)
    if version != EEGB_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if n and (C == 0 or T == 0):
        raise FormatError("zero channels or samples with non-empty trial list", 12)
    if not fs > 0:
        raise FormatError(f"sample rate must be positive, got {fs}", 24)
    dt = _record_dtype(C, T)
    expected = _HEADER.size + n * dt.itemsize
    if len(raw) < expected:
        complete = (len(raw) - _HEADER.size) // dt.itemsize
        raise FormatError(f"truncated payload: {n} trials declared, {complete} complete",
                          _HEADER.size + complete * dt.itemsize)
    if len(raw) > expected:
        raise FormatError(f"{len(raw) - expected} trailing bytes after last trial", expected)
    rec = np.frombuffer(raw, dtype=dt, count=n, offset=_HEADER.size)
    labels = rec["label"].astype(np.int64)
    bad = np.flatnonzero(labels >= n_classes)
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"trial {i}: label {labels[i]} >= declared class count {n_classes}",
                          _HEADER.size + i * dt.itemsize)
    trials = np.array(rec["x"], dtype=np.float32).reshape(n, C, T)
    return TrialSet(trials, labels, float(fs), int(n_classes))
