"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .errors import SpeechSeekError
from .tensor import Tensor, no_grad

__all__ = ["grad_check", "GradCheckError"]


class GradCheckError(SpeechSeekError):
    """The function was non-finite or not scalar at the probed point."""


def grad_check(f, args, eps: float = 1e-4, rel_floor: float = 1e-4,
               max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Compare the reverse-mode gradient of ``f`` against central differences.

    Parameters
    ----------
    f : callable
        Maps ``len(args)`` Tensors to a scalar Tensor. Must be deterministic:
        any internal sampling has to be frozen by the caller.
    args : sequence of array-like
        The point at which to check; promoted to float64.
    eps : float
        Central-difference step.
    rel_floor : float
        Denominator floor for the relative error, so coordinates with
        near-zero gradient are compared absolutely at ``tol * rel_floor``.
    max_coords : int, optional
        If set, check at most this many randomly chosen coordinates per
        argument instead of every coordinate.
    rng : numpy Generator, optional
        Source for coordinate sampling when ``max_coords`` is set.

    Returns
    -------
    float
        Maximum relative error over all checked coordinates.
    """
    base = [np.array(a, dtype=np.float64) for a in args]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in base]
    out = f(*tensors)
    if out.data.size != 1:
        raise GradCheckError(f"grad_check needs a scalar function, got shape {out.data.shape}")
    if not np.isfinite(out.data).all():
        raise GradCheckError("function is non-finite at the base point")
    out.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def evaluate(point):
        with no_grad():
            val = f(*[Tensor(p) for p in point]).data
        return float(val)

    if rng is None:
        rng = np.random.default_rng(0)

    max_rel = 0.0
    work = [a.copy() for a in base]
    for k, arr in enumerate(work):
        n = arr.size
        if n == 0:
            continue
        coords = np.arange(n)
        if max_coords is not None and n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False)
        flat = arr.reshape(-1)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + eps
            f_plus = evaluate(work)
            flat[idx] = orig - eps
            f_minus = evaluate(work)
            flat[idx] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise GradCheckError(f"function non-finite near arg {k}, coordinate {idx}")
            fd = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic[k].reshape(-1)[idx])
            rel = abs(a - fd) / max(abs(a), abs(fd), rel_floor)
            if rel > max_rel:
                max_rel = rel
    return max_rel
