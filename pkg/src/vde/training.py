"""Toy 2-D datasets and a conditional flow-matching trainer for MlpField.

Backprop is written out by hand for the small MLP; the optimiser is Adam.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .fields import ACTIVATIONS, Layer, MlpField, TimeFeatures

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


# --- datasets ----------------------------------------------------------------

def two_moons(n: int, rng: np.random.Generator, noise: float = 0.05) -> np.ndarray:
    """Interleaved half circles (upper: centre (0,0); lower: centre (1, 0.5))."""
    n_up = n // 2
    theta = rng.uniform(0.0, np.pi, n)
    upper = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    lower = np.stack([1.0 - np.cos(theta), 0.5 - np.sin(theta)], axis=1)
    pts = np.where((np.arange(n) < n_up)[:, None], upper, lower)
    return pts + noise * rng.standard_normal((n, 2))


def gaussian_ring(n: int, rng: np.random.Generator, modes: int = 8, radius: float = 2.0,
                  std: float = 0.1) -> np.ndarray:
    k = rng.integers(0, modes, n)
    ang = 2.0 * np.pi * k / modes
    centres = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return centres + std * rng.standard_normal((n, 2))


def checkerboard(n: int, rng: np.random.Generator, cells: int = 4, size: float = 4.0) -> np.ndarray:
    """Uniform over the dark squares of a cells x cells board centred at the origin."""
    side = size / cells
    # dark squares are those with (i + j) even
    i = rng.integers(0, cells, n)
    j = (rng.integers(0, cells // 2 + cells % 2, n) * 2 + (i % 2)) % cells
    u = rng.uniform(0.0, 1.0, (n, 2))
    x = (i + u[:, 0]) * side - size / 2
    y = (j + u[:, 1]) * side - size / 2
    return np.stack([x, y], axis=1)


DATASETS = {"two-moons": two_moons, "gaussian-ring": gaussian_ring, "checkerboard": checkerboard}


@dataclass
class ToyDataset:
    name: str = "two-moons"

    def __post_init__(self):
        if self.name not in DATASETS:
            raise ValueError(f"unknown dataset {self.name!r}; choose from {sorted(DATASETS)}")

    dim = 2

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return DATASETS[self.name](n, rng)


@dataclass
class PointMass:
    """All data at a single point; the flow-matching target is then trivially learnable."""

    point: tuple[float, ...] = (2.0, 2.0)

    @property
    def dim(self) -> int:
        return len(self.point)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return np.tile(np.asarray(self.point, dtype=np.float64), (n, 1))


# --- trainer -----------------------------------------------------------------

@dataclass
class TrainConfig:
    iterations: int = 5000
    batch_size: int = 256
    lr: float = 1e-3
    hidden: tuple[int, ...] = (128, 128)
    activation: str = "tanh"
    fourier_pairs: int = 4
    include_raw_t: bool = True
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_batch: int = 4096
    log_every: int = 500


@dataclass
class TrainResult:
    field: MlpField
    initial_loss: float
    final_loss: float
    heldout_loss: float
    zero_predictor_loss: float
    history: list[tuple[int, float]] = field(default_factory=list)


def _cfm_batch(dataset, n: int, rng: np.random.Generator):
    x1 = dataset.sample(n, rng)
    x0 = rng.standard_normal(x1.shape)
    t = rng.uniform(0.0, 1.0, n)
    xt = t[:, None] * x1 + (1.0 - t[:, None]) * x0
    return xt, t, x1 - x0


def flow_matching_loss(net: MlpField, xt, t, target) -> float:
    return float(np.mean((net.forward(xt, t) - target) ** 2))


def loss_and_grads(net: MlpField, xt: np.ndarray, t: np.ndarray, target: np.ndarray):
    """Mean squared error over batch and output dims, and its gradients per layer."""
    f, fprime = ACTIVATIONS[net.activation]
    h = np.concatenate([xt, net.time_features(t)], axis=1)
    inputs, pre = [h], []
    for layer in net.layers[:-1]:
        z = h @ layer.w.T + layer.b
        pre.append(z)
        h = f(z)
        inputs.append(h)
    out = h @ net.layers[-1].w.T + net.layers[-1].b
    diff = out - target
    loss = float(np.mean(diff**2))

    grads = [None] * len(net.layers)
    delta = 2.0 * diff / diff.size
    for k in range(len(net.layers) - 1, -1, -1):
        grads[k] = (delta.T @ inputs[k], delta.sum(axis=0))
        if k > 0:
            delta = (delta @ net.layers[k].w) * fprime(pre[k - 1])
    return loss, grads


def train_flow_matching(dataset, config: TrainConfig = TrainConfig()) -> TrainResult:
    rng = np.random.default_rng(config.seed)
    tf = TimeFeatures(config.fourier_pairs, config.include_raw_t)
    net = MlpField.init_random(dataset.dim, config.hidden, rng, config.activation, tf)

    held = _cfm_batch(dataset, config.eval_batch, np.random.default_rng([config.seed, 1]))
    zero_loss = float(np.mean(held[2] ** 2))
    initial = flow_matching_loss(net, *held)

    m = [(np.zeros_like(l.w), np.zeros_like(l.b)) for l in net.layers]
    v = [(np.zeros_like(l.w), np.zeros_like(l.b)) for l in net.layers]
    history = []
    loss = initial
    b1, b2 = config.beta1, config.beta2
    for it in range(1, config.iterations + 1):
        loss, grads = loss_and_grads(net, *_cfm_batch(dataset, config.batch_size, rng))
        if not math.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at iteration {it}")
        step = config.lr * math.sqrt(1.0 - b2**it) / (1.0 - b1**it)
        for k, layer in enumerate(net.layers):
            for j, (param, g) in enumerate(zip((layer.w, layer.b), grads[k])):
                mk, vk = m[k][j], v[k][j]
                mk *= b1
                mk += (1.0 - b1) * g
                vk *= b2
                vk += (1.0 - b2) * g * g
                param -= step * mk / (np.sqrt(vk) + config.eps)
        if it % config.log_every == 0 or it == config.iterations:
            history.append((it, loss))
            log.info("iter %d loss %.5f", it, loss)

    heldout = flow_matching_loss(net, *held)
    final = loss if config.iterations else initial
    if not math.isfinite(heldout):
        raise TrainingDiverged("held-out loss is not finite")
    # re-wrap so parameter validation runs on the trained weights
    trained = MlpField([Layer(l.w, l.b) for l in net.layers], net.activation, tf)
    return TrainResult(trained, initial, final, heldout, zero_loss, history)
