"""Anchor-and-estimate machinery.

A schedule marks every step Full (run the model) or Estimated. Full steps are
decomposed and pushed into a two-slot anchor history; Estimated steps
extrapolate (alpha, beta) linearly in t through the two anchors, reuse the
newest anchor's direction, and rebuild a velocity around the current latent.
"""
from __future__ import annotations

import enum
import json
from collections import deque
from dataclasses import dataclass

import numpy as np

from .decomposition import X_NORM_FLOOR, Decomposition, ZeroLatentNorm
from .flow_core import DimensionMismatch, as_vector

COEF_FLOOR = 1e-9


class InsufficientHistory(ValueError):
    pass


class CoincidentAnchors(ValueError):
    pass


class StepMode(str, enum.Enum):
    FULL = "F"
    ESTIMATED = "E"


@dataclass(frozen=True)
class SamplingSchedule:
    T: int
    W: int
    n: int
    plan: tuple[StepMode, ...]
    calls_per_step: int = 1

    @property
    def full_count(self) -> int:
        return sum(1 for m in self.plan if m is StepMode.FULL)

    @property
    def nfe(self) -> int:
        return self.calls_per_step * self.full_count

    def __str__(self) -> str:
        """Warm-up block, then one group per anchor cycle, e.g. ``FFFFFFF EEF EEF E F``."""
        s = "".join(m.value for m in self.plan)
        head, body, tail = s[: self.W], s[self.W:-1], s[-1:]
        if self.W >= self.T:
            return s
        cycle = self.n + 1
        groups = [body[i:i + cycle] for i in range(0, len(body), cycle)]
        return " ".join([head, *groups, tail]) if groups else f"{head} {tail}"

    def to_json(self) -> dict:
        return {"T": self.T, "W": self.W, "n": self.n, "calls_per_step": self.calls_per_step,
                "plan": "".join(m.value for m in self.plan), "full_steps": self.full_count,
                "nfe": self.nfe}


def plan_schedule(T: int, W: int, n: int, calls_per_step: int = 1) -> SamplingSchedule:
    """Warm-up of W Full steps, then cycles of n Estimated + 1 Full; the last step is Full.

    A trailing partial cycle stays Estimated. Full count is
    W + 1 + (T - 1 - W) // (n + 1).
    """
    if n < 1:
        raise ValueError("interval n must be >= 1")
    if W < 2:
        raise ValueError("warm-up W must be >= 2 to seed two anchors")
    if W > T - 1:
        raise ValueError(f"warm-up W={W} must be <= T-1={T - 1}")
    if calls_per_step < 1:
        raise ValueError("calls_per_step must be >= 1")
    plan = [StepMode.FULL] * W
    for k in range(T - 1 - W):
        plan.append(StepMode.FULL if k % (n + 1) == n else StepMode.ESTIMATED)
    plan.append(StepMode.FULL)
    return SamplingSchedule(T, W, n, tuple(plan), calls_per_step)


def full_step_count(T: int, W: int, n: int) -> int:
    return W + 1 + (T - 1 - W) // (n + 1)


class AnchorHistory:
    """The two most recent Full-step decompositions, oldest first."""

    def __init__(self):
        self._items: deque[Decomposition] = deque(maxlen=2)

    def push(self, d: Decomposition) -> None:
        if self._items and d.t == self._items[-1].t:
            raise CoincidentAnchors(f"anchor time {d.t} repeated")
        self._items.append(d)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    @property
    def latest(self) -> Decomposition:
        if not self._items:
            raise InsufficientHistory("no anchors yet")
        return self._items[-1]

    def pair(self) -> tuple[Decomposition, Decomposition]:
        if len(self._items) < 2:
            raise InsufficientHistory(f"need 2 anchors, have {len(self._items)}")
        return self._items[0], self._items[1]


def line_through(t1: float, y1: float, t2: float, y2: float, t: float) -> float:
    return y1 + (y2 - y1) / (t2 - t1) * (t - t1)


def extrapolate_coefficients(history: AnchorHistory, t: float) -> tuple[float, float]:
    older, newer = history.pair()
    if older.t == newer.t:
        raise CoincidentAnchors(f"both anchors at t={older.t}")
    return (line_through(older.t, older.alpha, newer.t, newer.alpha, t),
            line_through(older.t, older.beta, newer.t, newer.beta, t))


def estimate_velocity(x, t: float, history: AnchorHistory) -> np.ndarray:
    """alpha_hat * x + beta_hat * |x| * u_newest, built from the *current* latent."""
    x = as_vector(x)
    alpha, beta = extrapolate_coefficients(history, t)
    u = history.latest.u
    if u.shape != x.shape:
        raise DimensionMismatch(f"dimension mismatch: {u.size} vs {x.size}")
    xnorm = float(np.linalg.norm(x))
    if xnorm <= X_NORM_FLOOR:
        raise ZeroLatentNorm(f"|x| = {xnorm:g} is too small")
    return alpha * x + (beta * xnorm) * u


# --- stable phase -------------------------------------------------------------

@dataclass(frozen=True)
class StablePhaseConfig:
    epsilon: float = 0.02
    delta: float = 0.99

    def __post_init__(self):
        if not (0 < self.epsilon < 1 and 0 < self.delta < 1):
            raise ValueError("epsilon and delta must lie in (0, 1)")


def relative_error(estimate: float, actual: float, floor: float = COEF_FLOOR) -> float:
    """|estimate - actual| / max(|actual|, floor)."""
    return abs(estimate - actual) / max(abs(actual), floor)


def is_stable_at(d0: Decomposition, d1: Decomposition, d2: Decomposition,
                 cfg: StablePhaseConfig = StablePhaseConfig()) -> bool:
    """Does extrapolation from d0, d1 predict d2 within epsilon, with u0.u1 > delta?"""
    a_hat = line_through(d0.t, d0.alpha, d1.t, d1.alpha, d2.t)
    b_hat = line_through(d0.t, d0.beta, d1.t, d1.beta, d2.t)
    err = max(relative_error(a_hat, d2.alpha), relative_error(b_hat, d2.beta))
    if err >= cfg.epsilon:
        return False
    return float(np.dot(d0.u, d1.u)) > cfg.delta


def detect_stable_phase(trace, cfg: StablePhaseConfig = StablePhaseConfig()) -> int | None:
    """First index i at which the trace is stable, or None."""
    trace = list(trace)
    if len(trace) < 3:
        raise ValueError("need at least 3 full-step decompositions")
    for i in range(len(trace) - 2):
        if is_stable_at(trace[i], trace[i + 1], trace[i + 2], cfg):
            return i
    return None


def schedule_from_json(text: str) -> SamplingSchedule:
    obj = json.loads(text)
    plan = tuple(StepMode(c) for c in obj["plan"])
    return SamplingSchedule(obj["T"], obj["W"], obj["n"], plan, obj.get("calls_per_step", 1))
