"""Instance colouring stick-breaking process.

Clusters a map of pixel embeddings into a randomly ordered set of soft
attention masks. Each step picks the pixel maximising scope * seed-score,
builds an alpha map from its embedding's kernel similarity to every pixel,
emits ``scope * alpha`` as a mask and shrinks the scope by ``1 - alpha``.
The remaining scope becomes the last mask, so masks always sum to one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from . import tensor as T
from .nn import RngState
from .tensor import Tensor

REFERENCE_PIXELS = 64 * 64


@dataclass(frozen=True)
class FixedK:
    k: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"FixedK: k must be >= 1, got {self.k}")

    @property
    def max_steps(self) -> int:
        return self.k - 1

    def __str__(self) -> str:
        return f"fixed:{self.k}"


@dataclass(frozen=True)
class MassThreshold:
    """Stop when a candidate mask holds less than ``tau_pixels`` of mass.

    ``tau_pixels`` is given at 64x64 resolution and rescaled by area for
    other image sizes; at most ``k_max - 1`` kernel steps are taken.
    """

    tau_pixels: float
    k_max: int

    def __post_init__(self):
        if self.tau_pixels <= 0 or self.k_max < 1:
            raise ValueError(f"MassThreshold: need tau > 0 and k_max >= 1, got {self.tau_pixels}, {self.k_max}")

    @property
    def max_steps(self) -> int:
        return self.k_max - 1

    def threshold(self, height: int, width: int) -> float:
        return self.tau_pixels * (height * width) / REFERENCE_PIXELS

    def __str__(self) -> str:
        return f"mass:{self.tau_pixels:g},{self.k_max}"


StopPolicy = Union[FixedK, MassThreshold]


def parse_stop_policy(text: str) -> StopPolicy:
    """Parse ``fixed:K`` or ``mass:TAU,KMAX``."""
    mode, _, rest = text.partition(":")
    try:
        if mode == "fixed":
            return FixedK(int(rest))
        if mode == "mass":
            tau, k_max = rest.split(",")
            return MassThreshold(float(tau), int(k_max))
    except ValueError as exc:
        raise ValueError(f"bad stop policy {text!r}: {exc}") from None
    raise ValueError(f"bad stop policy {text!r}; expected fixed:K or mass:TAU,KMAX")


@dataclass
class AttentionMaskSet:
    """Masks stacked as (..., K, H, W); ``seeds`` holds the (i, j) of each kernel step."""

    masks: Tensor
    seeds: np.ndarray
    scopes: list = field(default_factory=list, repr=False)

    @property
    def num_slots(self) -> int:
        return self.masks.shape[-3]

    def mask(self, k: int) -> Tensor:
        return self.masks[..., k, :, :]


def icsbp_cluster(embeddings, kernel: Callable, policy: StopPolicy, rng: RngState) -> AttentionMaskSet:
    """Run the stick-breaking clustering on (H, W, D) or (B, H, W, D) embeddings.

    ``kernel(field, seed)`` returns the alpha map; gradients flow through it
    and through the scope, never through seed selection. A mass threshold is
    evaluated per image and therefore needs an unbatched (or B == 1) input.
    """
    emb = T._lift(embeddings)
    unbatched = emb.ndim == 3
    if unbatched:
        emb = T.expand_dims(emb, 0)
    if emb.ndim != 4 or emb.shape[-1] < 1:
        raise T.ShapeError("icsbp_cluster", emb.shape)
    b, h, w, _ = emb.shape
    if isinstance(policy, MassThreshold) and b != 1:
        raise ValueError("icsbp_cluster: MassThreshold stops per image; pass one image at a time")

    scores = rng.open_uniform((b, h, w))
    scope = Tensor(np.ones((b, h, w), dtype=emb.dtype))
    rows = np.arange(b)
    masks, seeds, scopes = [], [], [scope.data]
    tau = policy.threshold(h, w) if isinstance(policy, MassThreshold) else None

    for _ in range(policy.max_steps):
        flat = np.argmax((scope.data * scores).reshape(b, -1), axis=1)
        T.record_branch("seed", flat)
        i, j = np.divmod(flat, w)
        seed = emb[rows, i, j]
        alpha = kernel(emb, seed)
        mask = scope * alpha
        if tau is not None and float(mask.data.sum()) < tau:
            break
        masks.append(mask)
        seeds.append(np.stack([i, j], axis=-1))
        scope = scope * (1.0 - alpha)
        scopes.append(scope.data)
    masks.append(scope)

    stacked = T.stack(masks, axis=1)
    seed_arr = np.stack(seeds, axis=1) if seeds else np.zeros((b, 0, 2), dtype=np.int64)
    if unbatched:
        stacked = stacked[0]
        seed_arr = seed_arr[0]
        scopes = [s[0] for s in scopes]
    return AttentionMaskSet(stacked, seed_arr, scopes)


def icsbp_count_slots(masks: AttentionMaskSet) -> int:
    return masks.num_slots
