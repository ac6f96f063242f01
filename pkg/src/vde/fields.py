"""Velocity fields u(x, t): analytic, synthetic and a small MLP.

Every field counts its own evaluations; that counter is the NFE meter.
"""
from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .decomposition import X_NORM_FLOOR, ZeroLatentNorm
from .flow_core import DimensionMismatch, as_vector


class DegenerateDirection(ValueError):
    pass


class VelocityField:
    """Base class. Subclasses implement ``_velocity(x, t)`` on flat float64 vectors."""

    def __init__(self, dim: int):
        self.dim = int(dim)
        self._count = 0
        self._lock = threading.Lock()

    @property
    def eval_count(self) -> int:
        return self._count

    def reset_count(self) -> None:
        with self._lock:
            self._count = 0

    def evaluate(self, x, t: float, condition=None) -> np.ndarray:
        # condition is accepted for signature compatibility; no built-in field uses it
        x = as_vector(x)
        if x.size != self.dim:
            raise DimensionMismatch(f"field expects dim {self.dim}, got {x.size}")
        with self._lock:
            self._count += 1
        return self._velocity(x, float(t))

    __call__ = evaluate

    def _velocity(self, x: np.ndarray, t: float) -> np.ndarray:
        raise NotImplementedError


class ConstantField(VelocityField):
    def __init__(self, k):
        self.k = as_vector(k).copy()
        super().__init__(self.k.size)

    def _velocity(self, x, t):
        return self.k.copy()


class GaussianAnalyticField(VelocityField):
    """Exact marginal velocity between N(0, I) noise and N(mu1, s1^2 I) data.

    With x_t = t x1 + (1-t) x0 the pair (x1 - x0, x_t) is jointly Gaussian, so

        E[x1 - x0 | x_t = x] = mu1 + k(t) (x - t mu1),
        k(t) = (t s1^2 - (1 - t)) / (t^2 s1^2 + (1 - t)^2).
    """

    def __init__(self, mu1, s1: float = 1.0):
        self.mu1 = as_vector(mu1).copy()
        if s1 <= 0:
            raise ValueError("s1 must be positive")
        self.s1 = float(s1)
        super().__init__(self.mu1.size)

    def gain(self, t: float) -> float:
        s2 = self.s1**2
        return (t * s2 - (1.0 - t)) / (t * t * s2 + (1.0 - t) ** 2)

    def _velocity(self, x, t):
        if not 0.0 <= t < 1.0:
            raise ValueError(f"t={t} outside [0, 1)")
        k = self.gain(t)
        return self.mu1 + k * (x - t * self.mu1)


@dataclass
class PiecewisePolynomial:
    """Scalar function of t. ``pieces[j]`` holds ascending-power coefficients
    used on [breaks[j-1], breaks[j]); the last piece extends to +inf."""

    pieces: list[list[float]]
    breaks: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.pieces = [[float(c) for c in piece] for piece in self.pieces]
        self.breaks = [float(b) for b in self.breaks]
        if len(self.pieces) != len(self.breaks) + 1:
            raise ValueError("need exactly one more piece than breakpoints")
        if any(b2 <= b1 for b1, b2 in zip(self.breaks, self.breaks[1:])):
            raise ValueError("breakpoints must be increasing")

    @classmethod
    def constant(cls, c: float) -> "PiecewisePolynomial":
        return cls([[float(c)]])

    @classmethod
    def affine(cls, c0: float, c1: float) -> "PiecewisePolynomial":
        return cls([[float(c0), float(c1)]])

    def __call__(self, t: float) -> float:
        j = int(np.searchsorted(self.breaks, t, side="right"))
        return float(sum(c * t**p for p, c in enumerate(self.pieces[j])))

    def to_json(self) -> dict:
        return {"pieces": self.pieces, "breaks": self.breaks}


class ControlledField(VelocityField):
    """v = a(t) x + b(t) |x| unit(w - proj_x w).

    Decomposing the output recovers (a(t), b(t)) exactly, which makes this
    field an oracle for the estimator.
    """

    def __init__(self, a: Callable[[float], float], b: Callable[[float], float], w):
        self.a = a
        self.b = b
        self.w = as_vector(w).copy()
        super().__init__(self.w.size)

    def direction(self, x: np.ndarray) -> np.ndarray:
        xx = float(np.dot(x, x))
        if np.sqrt(xx) <= X_NORM_FLOOR:
            raise ZeroLatentNorm("|x| too small")
        p = self.w - (np.dot(self.w, x) / xx) * x
        pn = np.linalg.norm(p)
        if pn <= 1e-12 * np.linalg.norm(self.w):
            raise DegenerateDirection("reference vector is parallel to x")
        return p / pn

    def _velocity(self, x, t):
        return self.a(t) * x + self.b(t) * np.linalg.norm(x) * self.direction(x)


# --- MLP -------------------------------------------------------------------

_GELU_C = np.sqrt(2.0 / np.pi)


def _gelu(z):
    return 0.5 * z * (1.0 + np.tanh(_GELU_C * (z + 0.044715 * z**3)))


def _gelu_grad(z):
    inner = _GELU_C * (z + 0.044715 * z**3)
    th = np.tanh(inner)
    return 0.5 * (1.0 + th) + 0.5 * z * (1.0 - th**2) * _GELU_C * (1.0 + 3 * 0.044715 * z**2)


# name -> (f, f'(z))
ACTIVATIONS = {
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z: (z > 0).astype(np.float64)),
    "gelu": (_gelu, _gelu_grad),
}


@dataclass(frozen=True)
class TimeFeatures:
    fourier_pairs: int = 4
    include_raw: bool = True

    @property
    def width(self) -> int:
        return int(self.include_raw) + 2 * self.fourier_pairs

    def __call__(self, t) -> np.ndarray:
        """Features for a scalar t or a batch of shape (B,); returns (..., width).

        Order: [t] then (sin(2^k pi t), cos(2^k pi t)) for k = 0, 1, ...
        """
        t = np.asarray(t, dtype=np.float64)
        cols = [t] if self.include_raw else []
        for k in range(self.fourier_pairs):
            w = (2.0**k) * np.pi
            cols += [np.sin(w * t), np.cos(w * t)]
        if not cols:
            return np.zeros(t.shape + (0,))
        return np.stack(cols, axis=-1)


@dataclass
class Layer:
    w: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)


class MlpField(VelocityField):
    """Feed-forward net over [x, time_features(t)]; activation between layers, linear output."""

    def __init__(self, layers: Sequence[Layer], activation: str = "tanh",
                 time_features: TimeFeatures = TimeFeatures()):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if not layers:
            raise ValueError("need at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.w.shape[0] != nxt.w.shape[1]:
                raise ValueError("layer shapes do not compose")
        for layer in layers:
            if layer.b.shape != (layer.w.shape[0],):
                raise ValueError("bias shape does not match layer output")
            if not (np.all(np.isfinite(layer.w)) and np.all(np.isfinite(layer.b))):
                raise ValueError("non-finite parameters")
        self.layers = list(layers)
        self.activation = activation
        self.time_features = time_features
        in_dim = self.layers[0].w.shape[1] - time_features.width
        if in_dim < 1 or self.layers[-1].w.shape[0] != in_dim:
            raise ValueError("input/output widths inconsistent with time features")
        super().__init__(in_dim)

    @classmethod
    def init_random(cls, dim: int, hidden: Sequence[int], rng: np.random.Generator,
                    activation: str = "tanh", time_features: TimeFeatures = TimeFeatures()):
        sizes = [dim + time_features.width, *hidden, dim]
        layers = []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            w = rng.standard_normal((n_out, n_in)) * np.sqrt(1.0 / n_in)
            layers.append(Layer(w, np.zeros(n_out)))
        return cls(layers, activation, time_features)

    def forward(self, x: np.ndarray, t) -> np.ndarray:
        """Batched forward pass: x is (B, dim), t is (B,). Does not touch eval_count."""
        h = np.concatenate([x, self.time_features(t)], axis=-1)
        f, _ = ACTIVATIONS[self.activation]
        for layer in self.layers[:-1]:
            h = f(h @ layer.w.T + layer.b)
        last = self.layers[-1]
        return h @ last.w.T + last.b

    def _velocity(self, x, t):
        return self.forward(x[None, :], np.array([t]))[0]

    def to_json(self) -> dict:
        return {
            "layers": [
                {"in": int(l.w.shape[1]), "out": int(l.w.shape[0]),
                 "w": [float(v) for v in l.w.ravel()], "b": [float(v) for v in l.b]}
                for l in self.layers
            ],
            "activation": self.activation,
            "time_features": {"fourier_pairs": self.time_features.fourier_pairs,
                              "include_raw": self.time_features.include_raw},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MlpField":
        layers = []
        for spec in obj["layers"]:
            n_in, n_out = int(spec["in"]), int(spec["out"])
            w = np.array(spec["w"], dtype=np.float64)
            b = np.array(spec["b"], dtype=np.float64)
            if w.size != n_in * n_out or b.size != n_out:
                raise ValueError("layer weights do not match declared shape")
            layers.append(Layer(w.reshape(n_out, n_in), b))
        tf = obj.get("time_features", {})
        return cls(layers, obj.get("activation", "tanh"),
                   TimeFeatures(int(tf.get("fourier_pairs", 4)), bool(tf.get("include_raw", True))))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n")

    @classmethod
    def load(cls, path) -> "MlpField":
        return cls.from_json(json.loads(Path(path).read_text()))
