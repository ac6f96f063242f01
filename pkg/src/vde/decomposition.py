"""Split a velocity into a part along the latent and a part orthogonal to it.

    v = alpha * x + beta * |x| * u,    u . x = 0,  |u| = 1
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flow_core import DimensionMismatch, as_vector

X_NORM_FLOOR = 1e-12
RESIDUAL_RTOL = 1e-10


class ZeroLatentNorm(ValueError):
    pass


class NonFiniteInput(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Decomposition:
    alpha: float
    beta: float
    u: np.ndarray
    t: float


def orthogonal_unit(x: np.ndarray, hint: np.ndarray | None = None) -> np.ndarray:
    """A unit vector orthogonal to ``x``.

    Uses ``hint`` projected off ``x`` when that is well conditioned, otherwise
    Gram-Schmidt on the first standard basis vector not parallel to ``x``.
    """
    xn = x / np.linalg.norm(x)
    if hint is not None:
        r = hint - np.dot(hint, xn) * xn
        nr = np.linalg.norm(r)
        if nr > 1e-6 * np.linalg.norm(hint):
            return r / nr
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = 1.0
        r = e - xn[k] * xn
        nr = np.linalg.norm(r)
        if nr > 1e-6:
            r = r / nr
            # one more pass keeps |u.x| at rounding level
            r = r - np.dot(r, xn) * xn
            return r / np.linalg.norm(r)
    raise ValueError("latent dimension must be >= 2")


def decompose(v, x, t: float, fallback_u=None) -> Decomposition:
    v, x = as_vector(v), as_vector(x)
    if v.shape != x.shape:
        raise DimensionMismatch(f"dimension mismatch: {v.size} vs {x.size}")
    if not (np.all(np.isfinite(v)) and np.all(np.isfinite(x))):
        raise NonFiniteInput("non-finite velocity or latent")
    xx = float(np.dot(x, x))
    xnorm = np.sqrt(xx)
    if xnorm <= X_NORM_FLOOR:
        raise ZeroLatentNorm(f"|x| = {xnorm:g} is too small to decompose against")
    alpha = float(np.dot(v, x)) / xx
    r = v - alpha * x
    # one re-orthogonalisation pass; cancellation in v - alpha*x can leave a
    # component along x well above rounding when v is nearly parallel to x
    c = float(np.dot(r, x)) / xx
    alpha += c
    r = r - c * x
    rnorm = float(np.linalg.norm(r))
    if rnorm > RESIDUAL_RTOL * float(np.linalg.norm(v)):
        return Decomposition(alpha, rnorm / xnorm, r / rnorm, float(t))
    hint = None if fallback_u is None else as_vector(fallback_u)
    return Decomposition(alpha, 0.0, orthogonal_unit(x, hint), float(t))


def recompose(d: Decomposition, x) -> np.ndarray:
    x = as_vector(x)
    if d.u.shape != x.shape:
        raise DimensionMismatch(f"dimension mismatch: {d.u.size} vs {x.size}")
    xnorm = float(np.linalg.norm(x))
    if xnorm <= X_NORM_FLOOR:
        raise ZeroLatentNorm(f"|x| = {xnorm:g} is too small")
    return d.alpha * x + (d.beta * xnorm) * d.u
