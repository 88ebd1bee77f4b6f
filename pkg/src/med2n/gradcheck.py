"""Central finite-difference gradient checks for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, backward


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-6, coords=None) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place.

    ``coords`` restricts the probe to some flat indices (others stay zero).
    """
    g = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in (range(x.size) if coords is None else coords):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||), with 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def check_op(op: Callable[..., Tensor], inputs: Sequence[np.ndarray], rng: np.random.Generator,
             eps: float = 1e-6) -> float:
    """Worst relative error over all inputs for the scalar projection sum(op(*x) * r)."""
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    out0 = op(*[Tensor(a) for a in arrays])
    r = rng.standard_normal(out0.shape)

    def value() -> float:
        return float((op(*[Tensor(a) for a in arrays]).data * r).sum())

    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = op(*tensors)
    loss = (out * Tensor(r)).sum()
    backward(loss)
    worst = 0.0
    for t, a in zip(tensors, arrays):
        analytic = t.grad if t.grad is not None else np.zeros_like(a)
        worst = max(worst, relative_error(analytic, numeric_grad(value, a, eps)))
    return worst


def check_params(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6,
                 max_coords: int | None = None, rng: np.random.Generator | None = None) -> dict[int, float]:
    """Relative error per parameter of a scalar loss built by ``loss_fn``.

    With ``max_coords`` only that many random coordinates per parameter are probed.
    """
    for p in params:
        p.grad = None
    backward(loss_fn())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    errors = {}
    for k, p in enumerate(params):
        coords = None
        if max_coords is not None and p.size > max_coords:
            rng = rng if rng is not None else np.random.default_rng(0)
            coords = rng.choice(p.size, max_coords, replace=False)
        numeric = numeric_grad(lambda: loss_fn().item(), p.data, eps, coords)
        a = analytic[k]
        if coords is not None:
            a, numeric = a.reshape(-1)[coords], numeric.reshape(-1)[coords]
        errors[k] = relative_error(a, numeric)
    return errors
