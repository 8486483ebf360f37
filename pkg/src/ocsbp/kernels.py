"""Distance kernels mapping embedding pairs to similarities in [0, 1]."""

from __future__ import annotations

import enum
import math

import numpy as np

from . import tensor as T
from .nn import Module, Parameter
from .tensor import Tensor


class KernelKind(str, enum.Enum):
    GAUSSIAN = "gaussian"
    LAPLACIAN = "laplacian"
    EPANECHNIKOV = "epanechnikov"

    @classmethod
    def parse(cls, value) -> "KernelKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown kernel {value!r}; expected one of {names}") from None


def kernel_init_sigma(kind, K: int) -> float:
    """Scale at which a kernel centred on one of K square cells drops to 0.5
    at the cell's inscribed radius 1/sqrt(K), for coordinates in [-1, 1]."""
    kind = KernelKind.parse(kind)
    if K < 1:
        raise ValueError(f"kernel_init_sigma: K must be >= 1, got {K}")
    if kind is KernelKind.GAUSSIAN:
        return 1.0 / (K * math.log(2.0))
    if kind is KernelKind.LAPLACIAN:
        return 1.0 / (math.sqrt(K) * math.log(2.0))
    return 2.0 / K


def squared_distance(field, seed) -> Tensor:
    """||field[..., i, j, :] - seed[..., :]||^2 as an (..., H, W) map."""
    field, seed = T._lift(field), T._lift(seed)
    if field.shape[-1] != seed.shape[-1] or field.shape[:-3] != seed.shape[:-1]:
        raise T.ShapeError("kernel_eval", field.shape, seed.shape)
    lead = seed.shape[:-1]
    diff = field - T.reshape(seed, lead + (1, 1, seed.shape[-1]))
    return T.sum_(diff * diff, axis=-1)


def kernel_eval(kind, sigma, seed, field) -> Tensor:
    """Alpha map psi(field, seed) for an (..., H, W, D) field and (..., D) seed.

    ``sigma`` is a positive float or a scalar Tensor. The Laplacian uses a
    square root whose gradient is taken as 0 at zero distance and the
    Epanechnikov clamp has subgradient 0, so both stay finite everywhere.
    """
    kind = KernelKind.parse(kind)
    sq = squared_distance(field, seed)
    if kind is KernelKind.GAUSSIAN:
        return T.exp(-(sq / sigma))
    if kind is KernelKind.LAPLACIAN:
        return T.exp(-(T.sqrt(sq) / sigma))
    return T.relu(1.0 - sq / sigma)


class DistanceKernel(Module):
    """Kernel with a learnable scale stored as log(sigma) so sigma stays positive."""

    def __init__(self, kind=KernelKind.GAUSSIAN, K: int = 7, sigma: float | None = None):
        self.kind = KernelKind.parse(kind)
        sigma = kernel_init_sigma(self.kind, K) if sigma is None else sigma
        if sigma <= 0:
            raise ValueError("kernel scale must be positive")
        self.log_sigma = Parameter(np.asarray(math.log(sigma)))

    @property
    def sigma(self) -> Tensor:
        return T.exp(self.log_sigma)

    def forward(self, field, seed) -> Tensor:
        return kernel_eval(self.kind, self.sigma, seed, field)


class ThresholdKernel:
    """Binary kernel: 1 within squared radius ``radius_sq`` of the seed, else 0.

    Not differentiable; used to exercise hard-partition behaviour.
    """

    def __init__(self, radius_sq: float):
        self.radius_sq = radius_sq

    def __call__(self, field, seed) -> Tensor:
        sq = squared_distance(field, seed)
        return Tensor((sq.data < self.radius_sq).astype(sq.data.dtype))
