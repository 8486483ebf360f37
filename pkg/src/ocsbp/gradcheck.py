"""Central finite-difference checks of reverse-mode gradients.

Every check runs in float64. Samples whose finite-difference stencil
crosses a recorded branch (relu, clip, max, seed argmax) are reported as
kinked instead of compared, since the derivative is undefined there.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class GradCheck:
    rel_error: float
    kinked: bool
    analytic: np.ndarray
    numeric: np.ndarray

    def ok(self, tol: float = 1e-4) -> bool:
        return not self.kinked and self.rel_error <= tol


def rel_error(a, b, floor: float = 1e-10) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def _evaluate(fn, arrays, probe):
    with T.branch_recorder() as branches:
        out = fn(*[Tensor(a) for a in arrays])
    value = np.asarray(out.data, dtype=np.float64)
    if probe is not None:
        value = float((value * probe).sum())
    return float(value), branches


def _same(a, b) -> bool:
    return len(a) == len(b) and all(ka == kb and np.array_equal(da, db) for (ka, da), (kb, db) in zip(a, b))


def check_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-6,
                    probe: np.ndarray | None = None) -> GradCheck:
    """Compare autodiff and coordinate-wise central differences for all inputs.

    ``fn`` maps Tensors to a Tensor; a non-scalar output is contracted with
    ``probe`` (a fixed random array) to give a scalar.
    """
    with T.precision(np.float64):
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        with T.branch_recorder() as base:
            out = fn(*leaves)
        loss = out if probe is None else T.sum_(out * Tensor(probe))
        loss.backward()
        analytic = np.concatenate([np.ravel(l.grad) if l.grad is not None else np.zeros(l.data.size)
                                   for l in leaves])
        numeric = []
        for i, a in enumerate(arrays):
            for j in range(a.size):
                vals = []
                for sign in (1.0, -1.0):
                    shifted = [x.copy() for x in arrays]
                    shifted[i].flat[j] += sign * h
                    v, rec = _evaluate(fn, shifted, probe)
                    if not _same(rec, base):
                        return GradCheck(np.inf, True, analytic, np.array([]))
                    vals.append(v)
                numeric.append((vals[0] - vals[1]) / (2 * h))
        numeric = np.asarray(numeric)
    return GradCheck(rel_error(analytic, numeric), False, analytic, numeric)


def check_directional(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], rng: np.random.Generator,
                      directions: int = 3, h: float = 1e-6) -> GradCheck:
    """Compare grad . v against (L(p + h v) - L(p - h v)) / 2h along random unit directions.

    ``params`` are float64 leaf tensors modified in place and restored.
    """
    for p in params:
        p.grad = None
    with T.branch_recorder() as base:
        loss = loss_fn()
    loss.backward()
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    originals = [p.data.copy() for p in params]
    analytic, numeric = [], []
    try:
        for _ in range(directions):
            vs = [rng.standard_normal(p.data.shape) for p in params]
            norm = np.sqrt(sum((v * v).sum() for v in vs))
            vs = [v / norm for v in vs]
            analytic.append(sum((g * v).sum() for g, v in zip(grads, vs)))
            vals = []
            for sign in (1.0, -1.0):
                for p, o, v in zip(params, originals, vs):
                    p.data = o + sign * h * v
                with T.no_grad(), T.branch_recorder() as rec:
                    vals.append(float(loss_fn().data))
                if not _same(rec, base):
                    return GradCheck(np.inf, True, np.asarray(analytic), np.asarray(numeric))
            numeric.append((vals[0] - vals[1]) / (2 * h))
    finally:
        for p, o in zip(params, originals):
            p.data = o
            p.grad = None
    return GradCheck(rel_error(analytic, numeric), False, np.asarray(analytic), np.asarray(numeric))
