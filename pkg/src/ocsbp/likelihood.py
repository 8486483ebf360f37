"""Spatial Gaussian mixture likelihood and KL terms."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import tensor as T
from .nn import RngState
from .tensor import Tensor

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
MASK_EPS = 1e-10


@dataclass
class SceneComponents:
    """Per-slot RGB means (..., K, H, W, C) in (0, 1) and mask logits (..., K, H, W)."""

    means: Tensor
    mask_logits: Tensor

    @classmethod
    def from_probabilities(cls, means, pi) -> "SceneComponents":
        pi = T._lift(pi)
        return cls(T._lift(means), T.log(T.maximum(pi, MASK_EPS)))

    @property
    def num_slots(self) -> int:
        return self.mask_logits.shape[-3]

    @cached_property
    def masks_pi(self) -> Tensor:
        return T.softmax(self.mask_logits, axis=-3)

    @cached_property
    def log_pi(self) -> Tensor:
        return T.log_softmax(self.mask_logits, axis=-3)

    def mixture_mean(self) -> Tensor:
        return T.sum_(self.means * T.expand_dims(self.masks_pi, -1), axis=-4)


@dataclass
class DiagGaussian:
    mean: Tensor
    log_std: Tensor

    @property
    def std(self) -> Tensor:
        return T.exp(self.log_std)

    def sample(self, rng: RngState) -> Tensor:
        noise = rng.normal(self.mean.shape).astype(self.mean.dtype)
        return self.mean + self.std * noise

    @classmethod
    def standard(cls, shape, dtype=None) -> "DiagGaussian":
        dtype = dtype or T.get_default_dtype()
        return cls(Tensor(np.zeros(shape, dtype)), Tensor(np.zeros(shape, dtype)))


def sgmm_log_likelihood(x, comps: SceneComponents, sigma_x: float = 0.7) -> Tensor:
    """log p(x | z) summed over pixels and channels, one value per image.

    ``x`` is (H, W, C) or (B, H, W, C); the result is a scalar or shape (B,).
    """
    if sigma_x <= 0:
        raise ValueError(f"sgmm_log_likelihood: sigma_x must be positive, got {sigma_x}")
    x = T._lift(x)
    means = comps.means
    if means.shape[:-4] + means.shape[-3:] != x.shape:
        raise T.ShapeError("sgmm_log_likelihood", x.shape, means.shape)
    x_k = T.expand_dims(x, -4)
    log_normal = (-HALF_LOG_2PI - math.log(sigma_x)) - (x_k - means) ** 2 * (0.5 / sigma_x**2)
    per_value = T.logsumexp(log_normal + T.expand_dims(comps.log_pi, -1), axis=-4)
    return T.sum_(per_value, axis=(-3, -2, -1))


def gaussian_kl(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last axis."""
    if q.mean.shape[-1] != p.mean.shape[-1]:
        raise T.ShapeError("gaussian_kl", q.mean.shape, p.mean.shape)
    var_ratio = T.exp(2.0 * (q.log_std - p.log_std))
    mean_term = (q.mean - p.mean) ** 2 * T.exp(-2.0 * p.log_std)
    per_dim = (p.log_std - q.log_std) + 0.5 * (var_ratio + mean_term) - 0.5
    return T.sum_(per_dim, axis=-1)


def _check_categorical(name: str, probs: np.ndarray, axis: int) -> None:
    err = np.abs(probs.sum(axis=axis) - 1.0).max(initial=0.0)
    if err > 1e-4 or (probs < -1e-6).any():
        raise ValueError(f"mask_consistency_kl: {name} is not normalised over slots (max error {err:.3g})")


def mask_consistency_kl(m, pi) -> Tensor:
    """sum_{ij} sum_k m log(m / pi) over (..., K, H, W) maps, pi held constant.

    0 log 0 is 0; both arguments are floored at 1e-10 inside the logs.
    """
    masks = m.masks if hasattr(m, "masks") else T._lift(m)
    pi_data = pi.data if isinstance(pi, Tensor) else np.asarray(pi)
    if masks.shape != pi_data.shape:
        raise T.ShapeError("mask_consistency_kl", masks.shape, pi_data.shape)
    _check_categorical("attention masks", masks.data, -3)
    _check_categorical("object masks", pi_data, -3)
    log_pi = np.log(np.maximum(pi_data, MASK_EPS)).astype(masks.dtype)
    log_m = T.log(T.maximum(masks, MASK_EPS))
    return T.sum_(masks * (log_m - log_pi), axis=(-3, -2, -1))
