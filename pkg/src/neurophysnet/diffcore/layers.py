"""Parameter containers and the layer set the networks are built from."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from ..errors import ConfigurationError, ParameterError
from . import ops
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor with an always-allocated gradient."""

    def __init__(self, data, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.grad = np.zeros_like(self.data)

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


class Module:
    """Base class: walks attributes to find parameters, buffers and children."""

    training: bool = True
    _buffers: tuple[str, ...] = ()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, list) and value and all(isinstance(m, Module) for m in value):
                for i, m in enumerate(value):
                    yield f"{name}.{i}", m

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self, trainable_only: bool = True) -> list[Parameter]:
        return [p for _, p in self.named_parameters() if p.trainable or not trainable_only]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: buf.copy() for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise ConfigurationError(f"state is missing entries: {sorted(missing)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ConfigurationError(f"{name}: stored shape {value.shape} != model shape {p.shape}")
            p.data = value.copy()
            p.zero_grad()
        for name, buf in buffers.items():
            buf[...] = state[name]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters(trainable_only=False):
            p.zero_grad()

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters(trainable_only=False):
            p.trainable = flag

    def count_parameters(self, trainable_only: bool = False) -> int:
        return sum(p.size for p in self.parameters(trainable_only))


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / math.sqrt(d_in)
        self.weight = Parameter(_uniform(rng, bound, (d_out, d_in)))
        self.bias = Parameter(_uniform(rng, bound, (d_out,))) if bias else None

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel, padding, rng: np.random.Generator,
                 bias: bool = False):
        kh, kw = ops._pair(kernel)
        bound = 1.0 / math.sqrt(c_in * kh * kw)
        self.weight = Parameter(_uniform(rng, bound, (c_out, c_in, kh, kw)))
        self.bias = Parameter(_uniform(rng, bound, (c_out,))) if bias else None
        self.padding = ops._pair(padding)

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.padding)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, padding: int, rng: np.random.Generator,
                 bias: bool = False):
        bound = 1.0 / math.sqrt(c_in * kernel)
        self.weight = Parameter(_uniform(rng, bound, (c_out, c_in, kernel)))
        self.bias = Parameter(_uniform(rng, bound, (c_out,))) if bias else None
        self.padding = int(padding)

    def forward(self, x):
        return ops.conv1d(x, self.weight, self.bias, self.padding)


class BatchNorm(Module):
    """Batch normalization over axis 1 for inputs of any rank >= 2."""

    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        if channels < 1:
            raise ParameterError("batchnorm needs at least one channel")
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              self.training, self.momentum, self.eps)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        if dim < 1:
            raise ParameterError("layernorm needs a non-empty normalized axis")
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)


class Dropout(Module):
    def __init__(self, rate: float, rng: np.random.Generator):
        if not 0.0 <= rate < 1.0:
            raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng

    def forward(self, x):
        return ops.dropout(x, self.rate, self.training, self.rng)


class MultiheadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if heads < 1 or dim % heads:
            raise ConfigurationError(f"model dimension {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def forward(self, x, need_weights: bool = False):
        return ops.multi_head_attention(
            x, self.q.weight, self.q.bias, self.k.weight, self.k.bias,
            self.v.weight, self.v.bias, self.out.weight, self.out.bias,
            self.heads, need_weights=need_weights)


class TransformerEncoderLayer(Module):
    """Post-norm encoder block: attention and a x4 ReLU feed-forward."""

    def __init__(self, dim: int, heads: int, dropout: float, rng: np.random.Generator,
                 ff_mult: int = 4):
        self.attn = MultiheadAttention(dim, heads, rng)
        self.ff1 = Linear(dim, ff_mult * dim, rng)
        self.ff2 = Linear(ff_mult * dim, dim, rng)
        self.norm1 = LayerNorm(dim)
        self.norm2 = LayerNorm(dim)
        self.drop_attn = Dropout(dropout, rng)
        self.drop_ff = Dropout(dropout, rng)

    def forward(self, x):
        x = self.norm1(x + self.drop_attn(self.attn(x)))
        return self.norm2(x + self.drop_ff(self.ff2(ops.relu(self.ff1(x)))))


class TransformerEncoder(Module):
    def __init__(self, dim: int, heads: int, n_layers: int, dropout: float,
                 rng: np.random.Generator):
        if n_layers < 1:
            raise ConfigurationError("transformer needs at least one layer")
        self.layers = [TransformerEncoderLayer(dim, heads, dropout, rng) for _ in range(n_layers)]

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x
