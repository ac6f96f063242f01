"""Latents, time grids and the small amount of vector algebra everything else uses.

All math is done on flat float64 vectors. A grid shape is carried along as
metadata so metrics like SSIM can view the latent as an image.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DimensionMismatch(ValueError):
    pass


def as_vector(a) -> np.ndarray:
    """Return ``a`` as a flat float64 array (Latent, ndarray or sequence)."""
    if isinstance(a, Latent):
        return a.data
    return np.asarray(a, dtype=np.float64).reshape(-1)


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionMismatch(f"dimension mismatch: {a.size} vs {b.size}")


@dataclass(frozen=True, eq=False)
class Latent:
    data: np.ndarray
    shape: tuple[int, ...]

    def __init__(self, data, shape=None):
        arr = np.array(data, dtype=np.float64).reshape(-1)
        if shape is None:
            shape = (arr.size,)
        shape = tuple(int(s) for s in shape)
        if len(shape) not in (1, 2) or int(np.prod(shape)) != arr.size:
            raise ValueError(f"shape {shape} does not match {arr.size} entries")
        if arr.size < 2:
            raise ValueError("latent dimension must be >= 2")
        if not np.all(np.isfinite(arr)):
            raise ValueError("latent has non-finite entries")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "shape", shape)

    @property
    def dim(self) -> int:
        return self.data.size

    @property
    def is_grid(self) -> bool:
        return len(self.shape) == 2

    def grid(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    def with_data(self, data) -> "Latent":
        return Latent(data, self.shape)

    def to_json(self) -> dict:
        return {"shape": list(self.shape), "data": [float(x) for x in self.data]}

    @classmethod
    def from_json(cls, obj: dict) -> "Latent":
        return cls(obj["data"], obj["shape"])


@dataclass(frozen=True, eq=False)
class TimeGrid:
    steps: np.ndarray

    def __init__(self, steps):
        arr = np.array(steps, dtype=np.float64).reshape(-1)
        if arr.size < 1:
            raise ValueError("time grid needs at least one step")
        if arr[0] != 0.0 or arr[-1] >= 1.0:
            raise ValueError("time grid must start at 0 and end below 1")
        if np.any(np.diff(arr) <= 0):
            raise ValueError("time grid must be strictly increasing")
        arr.setflags(write=False)
        object.__setattr__(self, "steps", arr)

    @classmethod
    def uniform(cls, T: int) -> "TimeGrid":
        if T < 1:
            raise ValueError("T must be >= 1")
        return cls(np.arange(T) / T)

    @classmethod
    def shifted(cls, T: int, shift: float) -> "TimeGrid":
        """SD3-style timestep shift applied to the uniform grid (shift=1 is uniform)."""
        if shift <= 0:
            raise ValueError("shift must be positive")
        s = 1.0 - np.arange(T) / T  # noise level, 1 -> 1/T
        s = shift * s / (1.0 + (shift - 1.0) * s)
        return cls(1.0 - s)

    @property
    def T(self) -> int:
        return self.steps.size

    @property
    def deltas(self) -> np.ndarray:
        """Step sizes; the last one carries the state to t = 1."""
        return np.diff(np.append(self.steps, 1.0))

    def __len__(self) -> int:
        return self.T


def interpolate(x0, x1, t: float):
    """Point on the straight path from ``x0`` (t=0) to ``x1`` (t=1)."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    a, b = as_vector(x0), as_vector(x1)
    _check_same(a, b)
    out = t * b + (1.0 - t) * a
    if isinstance(x0, Latent):
        return x0.with_data(out)
    return out


def dot(a, b) -> float:
    a, b = as_vector(a), as_vector(b)
    _check_same(a, b)
    return float(np.dot(a, b))


def norm(a) -> float:
    return float(np.linalg.norm(as_vector(a)))


def axpy(s: float, a, b) -> np.ndarray:
    a, b = as_vector(a), as_vector(b)
    _check_same(a, b)
    return s * a + b
