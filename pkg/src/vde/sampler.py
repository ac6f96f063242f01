"""Euler integration of dx/dt = v(x, t), with and without velocity estimation."""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .decomposition import Decomposition, decompose
from .estimator import (AnchorHistory, InsufficientHistory, SamplingSchedule,
                        StablePhaseConfig, StepMode, line_through, estimate_velocity,
                        extrapolate_coefficients, is_stable_at, relative_error)
from .fields import VelocityField
from .flow_core import Latent, TimeGrid

TRACE_COLUMNS = ("step", "t", "mode", "alpha", "beta", "u_cos", "x_norm", "v_norm", "nfe")


class NonFiniteState(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite state at step {step}")
        self.step = step


@dataclass
class TraceRow:
    step: int
    t: float
    mode: StepMode
    alpha: float  # estimated value on Estimated rows
    beta: float
    u_cos: float  # cosine to the previous step's direction; 1.0 on step 0
    x_norm: float
    v_norm: float
    nfe: int


@dataclass
class TrajectoryTrace:
    rows: list[TraceRow] = field(default_factory=list)
    decompositions: list[Decomposition] = field(default_factory=list)  # Full steps only
    final: Latent | None = None
    wall_time: float = 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in self.rows:
            w.writerow([r.step, repr(r.t), r.mode.value, repr(r.alpha), repr(r.beta),
                        repr(r.u_cos), repr(r.x_norm), repr(r.v_norm), r.nfe])
        return buf.getvalue()

    @property
    def plan(self) -> str:
        return "".join(r.mode.value for r in self.rows)


@dataclass
class SampleResult:
    final: Latent
    trace: TrajectoryTrace
    nfe: int

    def to_json(self) -> dict:
        return {"nfe": self.nfe, "final": self.final.to_json()}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1) + "\n"


def _as_latent(x0) -> Latent:
    return x0 if isinstance(x0, Latent) else Latent(x0)


def _cos(a: np.ndarray | None, b: np.ndarray) -> float:
    if a is None:
        return 1.0
    return float(np.clip(np.dot(a, b), -1.0, 1.0))


def _row(step, t, mode, alpha, beta, u_prev, u, x, v, nfe) -> TraceRow:
    return TraceRow(step, float(t), mode, float(alpha), float(beta), _cos(u_prev, u),
                    float(np.linalg.norm(x)), float(np.linalg.norm(v)), nfe)


def sample_full(field: VelocityField, x0, grid: TimeGrid, calls_per_step: int = 1) -> SampleResult:
    """Plain Euler: one model call per step, every step decomposed for the trace."""
    x0 = _as_latent(x0)
    x = x0.data.copy()
    trace = TrajectoryTrace()
    start = time.perf_counter()
    u_prev = None
    calls = 0
    for i, (t, dt) in enumerate(zip(grid.steps, grid.deltas)):
        v = field.evaluate(x, t)
        calls += 1
        if not np.all(np.isfinite(v)):
            raise NonFiniteState(i)
        d = decompose(v, x, t, fallback_u=u_prev)
        trace.decompositions.append(d)
        trace.rows.append(_row(i, t, StepMode.FULL, d.alpha, d.beta, u_prev, d.u, x, v,
                               calls * calls_per_step))
        u_prev = d.u
        x = x + dt * v
        if not np.all(np.isfinite(x)):
            raise NonFiniteState(i)
    trace.wall_time = time.perf_counter() - start
    trace.final = x0.with_data(x)
    return SampleResult(trace.final, trace, calls * calls_per_step)


def sample_vde(field: VelocityField, x0, grid: TimeGrid, schedule: SamplingSchedule,
               mode: str = "fixed", stable: StablePhaseConfig = StablePhaseConfig()) -> SampleResult:
    """Euler with anchor-and-estimate velocities.

    ``mode="fixed"`` follows ``schedule.plan``. ``mode="dynamic"`` runs Full
    steps until the stable-phase test passes on the last three of them, then
    applies the cycle rule with ``schedule.n``; the final step is always Full.
    """
    if schedule.T != grid.T:
        raise ValueError(f"schedule has T={schedule.T}, grid has T={grid.T}")
    if mode not in ("fixed", "dynamic"):
        raise ValueError(f"unknown mode {mode!r}")
    x0 = _as_latent(x0)
    x = x0.data.copy()
    T, n = grid.T, schedule.n
    history = AnchorHistory()
    trace = TrajectoryTrace()
    start = time.perf_counter()
    u_prev = None
    calls = 0
    stable_at = None  # step index where the dynamic warm-up ended
    for i, (t, dt) in enumerate(zip(grid.steps, grid.deltas)):
        if mode == "fixed":
            step_mode = schedule.plan[i]
        elif i == T - 1 or stable_at is None:
            step_mode = StepMode.FULL
        else:
            k = i - stable_at - 1
            step_mode = StepMode.FULL if k % (n + 1) == n else StepMode.ESTIMATED

        if step_mode is StepMode.FULL:
            v = field.evaluate(x, t)
            calls += 1
            if not np.all(np.isfinite(v)):
                raise NonFiniteState(i)
            d = decompose(v, x, t, fallback_u=u_prev)
            history.push(d)
            trace.decompositions.append(d)
            alpha, beta, u = d.alpha, d.beta, d.u
            if mode == "dynamic" and stable_at is None and len(trace.decompositions) >= 3:
                if is_stable_at(*trace.decompositions[-3:], stable):
                    stable_at = i
        else:
            if len(history) < 2:
                raise InsufficientHistory(f"step {i} is Estimated with {len(history)} anchor(s)")
            alpha, beta = extrapolate_coefficients(history, t)
            u = history.latest.u
            v = estimate_velocity(x, t, history)
        trace.rows.append(_row(i, t, step_mode, alpha, beta, u_prev, u, x, v,
                               calls * schedule.calls_per_step))
        u_prev = u
        x = x + dt * v
        if not np.all(np.isfinite(x)):
            raise NonFiniteState(i)
    trace.wall_time = time.perf_counter() - start
    trace.final = x0.with_data(x)
    return SampleResult(trace.final, trace, calls * schedule.calls_per_step)


@dataclass
class ComponentDynamics:
    trace: TrajectoryTrace
    alpha_err_pct: float
    beta_err_pct: float
    mean_cos: float

    @property
    def direction_err_pct(self) -> float:
        return 100.0 * (1.0 - self.mean_cos)


def extrapolation_errors(decs: list[Decomposition], warmup: int = 0):
    """Per-step errors of predicting step i from steps i-2, i-1 (all at or after ``warmup``).

    Returns arrays (alpha_rel_err, beta_rel_err, cos(u_{i-1}, u_i)).
    """
    a_err, b_err, cos = [], [], []
    for i in range(max(2, warmup + 2), len(decs)):
        d0, d1, d2 = decs[i - 2], decs[i - 1], decs[i]
        a_err.append(relative_error(line_through(d0.t, d0.alpha, d1.t, d1.alpha, d2.t), d2.alpha))
        b_err.append(relative_error(line_through(d0.t, d0.beta, d1.t, d1.beta, d2.t), d2.beta))
        cos.append(float(np.clip(np.dot(d1.u, d2.u), -1.0, 1.0)))
    return np.array(a_err), np.array(b_err), np.array(cos)


def record_component_dynamics(field: VelocityField, x0, grid: TimeGrid,
                              warmup: int = 0) -> ComponentDynamics:
    res = sample_full(field, x0, grid)
    a, b, c = extrapolation_errors(res.trace.decompositions, warmup)
    if a.size == 0:
        raise ValueError("trajectory too short for two-step extrapolation statistics")
    return ComponentDynamics(res.trace, 100.0 * float(a.mean()), 100.0 * float(b.mean()),
                             float(c.mean()))


def relative_final_error(a: SampleResult, b: SampleResult) -> float:
    diff = np.linalg.norm(a.final.data - b.final.data)
    return float(diff / np.linalg.norm(b.final.data))
