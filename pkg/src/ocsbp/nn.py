"""Parameters, a small module system, layers, and the Adam update."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class RngState:
    """Seeded random stream (PCG64) used for init, seed scores and noise.

    ``spawn`` derives independent child streams deterministically, which is
    how per-batch-element and per-record streams are obtained.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._seq = np.random.SeedSequence(self.seed)
        self.generator = np.random.Generator(np.random.PCG64(self._seq))

    @classmethod
    def derived(cls, seed: int, *keys: int) -> "RngState":
        """Stream keyed by (seed, *keys), e.g. a record index or a step number."""
        rng = cls.__new__(cls)
        rng.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        rng._seq = np.random.SeedSequence([rng.seed, *(int(k) for k in keys)])
        rng.generator = np.random.Generator(np.random.PCG64(rng._seq))
        return rng

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self.generator.uniform(low, high, size=shape)

    def open_uniform(self, shape) -> np.ndarray:
        """Draws strictly inside (0, 1)."""
        u = self.generator.random(size=shape)
        return np.where(u == 0.0, np.nextafter(0.0, 1.0), u)

    def normal(self, shape) -> np.ndarray:
        return self.generator.standard_normal(size=shape)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def spawn(self, n: int) -> list["RngState"]:
        children = []
        for child in self._seq.spawn(n):
            rng = RngState.__new__(RngState)
            rng.seed = self.seed
            rng._seq = child
            rng.generator = np.random.Generator(np.random.PCG64(child))
            children.append(rng)
        return children


class Parameter(Tensor):
    """Learnable leaf tensor carrying its Adam moments."""

    __slots__ = ("name", "exp_avg", "exp_avg_sq", "step")

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.exp_avg = np.zeros_like(self.data)
        self.exp_avg_sq = np.zeros_like(self.data)
        self.step = 0

    def reset_state(self) -> None:
        self.exp_avg = np.zeros_like(self.data)
        self.exp_avg_sq = np.zeros_like(self.data)
        self.step = 0


class Module:
    """Attribute-discovered parameter container with dotted names."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def store(self) -> "ParameterStore":
        return ParameterStore(self.named_parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ParameterStore:
    """Ordered, uniquely named collection of parameters."""

    def __init__(self, named: Iterator[tuple[str, Parameter]] = ()):
        self._params: OrderedDict[str, Parameter] = OrderedDict()
        for name, param in named:
            self.add(name, param)

    def add(self, name: str, param: Parameter) -> None:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        param.name = name
        self._params[name] = param

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.items())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def values(self) -> list[Parameter]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def count(self) -> int:
        return sum(p.size for p in self._params.values())


def adam_step(store: ParameterStore, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """Bias-corrected Adam update of every parameter, then zero the grads."""
    missing = [name for name, p in store if p.grad is None]
    if missing:
        raise ValueError("adam_step: no gradient for parameters: " + ", ".join(missing))
    b1, b2 = betas
    for _, p in store:
        g = p.grad
        p.step += 1
        p.exp_avg *= b1
        p.exp_avg += (1 - b1) * g
        p.exp_avg_sq *= b2
        p.exp_avg_sq += (1 - b2) * (g * g)
        m_hat = p.exp_avg / (1 - b1 ** p.step)
        v_hat = p.exp_avg_sq / (1 - b2 ** p.step)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype, copy=False)
        p.grad = np.zeros_like(p.data)


# layers -----------------------------------------------------------------


def _uniform(rng: RngState, shape, bound: float) -> np.ndarray:
    return rng.uniform(shape, -bound, bound)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: RngState, bias: bool = True):
        bound = 1.0 / math.sqrt(n_in)
        self.weight = Parameter(_uniform(rng, (n_in, n_out), bound))
        self.bias = Parameter(_uniform(rng, (n_out,), bound)) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    """Zero-padded square convolution, weights stored (k, k, C_in, C_out)."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: RngState, stride: int = 1):
        bound = 1.0 / math.sqrt(c_in * k * k)
        self.weight = Parameter(_uniform(rng, (k, k, c_in, c_out), bound))
        self.bias = Parameter(_uniform(rng, (c_out,), bound))
        self.stride = stride

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride)


class ConvTranspose2d(Module):
    """Transposed convolution that multiplies spatial size by ``stride``."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: RngState, stride: int = 2):
        bound = 1.0 / math.sqrt(c_out * k * k)
        self.weight = Parameter(_uniform(rng, (k, k, c_out, c_in), bound))
        self.bias = Parameter(_uniform(rng, (c_out,), bound))
        self.stride = stride

    def forward(self, x):
        return T.conv_transpose2d(x, self.weight, self.bias, stride=self.stride)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int = 8):
        if channels % groups:
            raise ValueError(f"GroupNorm: {channels} channels not divisible into {groups} groups")
        self.groups = groups
        self.scale = Parameter(np.ones(channels))
        self.shift = Parameter(np.zeros(channels))

    def forward(self, x):
        return T.group_norm(x, self.groups, self.scale, self.shift)


class LayerNorm(Module):
    def __init__(self, features: int):
        self.scale = Parameter(np.ones(features))
        self.shift = Parameter(np.zeros(features))

    def forward(self, x):
        return T.layer_norm(x, self.scale, self.shift)


class ConvGNReLU(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: RngState, stride: int = 1,
                 transpose: bool = False, groups: int = 8):
        layer = ConvTranspose2d if transpose else Conv2d
        self.conv = layer(c_in, c_out, k, rng, stride=stride)
        self.norm = GroupNorm(c_out, groups)

    def forward(self, x):
        return T.relu(self.norm(self.conv(x)))


class LSTMCell(Module):
    """Standard LSTM cell with gates ordered (input, forget, cell, output)."""

    def __init__(self, n_in: int, hidden: int, rng: RngState):
        bound = 1.0 / math.sqrt(hidden)
        self.hidden = hidden
        self.w_input = Parameter(_uniform(rng, (n_in, 4 * hidden), bound))
        self.w_hidden = Parameter(_uniform(rng, (hidden, 4 * hidden), bound))
        self.bias = Parameter(_uniform(rng, (4 * hidden,), bound))

    def forward(self, x, state):
        h, c = state
        gates = T.linear(x, self.w_input, self.bias) + T.linear(h, self.w_hidden)
        n = self.hidden
        i = T.sigmoid(gates[..., :n])
        f = T.sigmoid(gates[..., n : 2 * n])
        g = T.tanh(gates[..., 2 * n : 3 * n])
        o = T.sigmoid(gates[..., 3 * n :])
        c = f * c + i * g
        h = o * T.tanh(c)
        return h, c
