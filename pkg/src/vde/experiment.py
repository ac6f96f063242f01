"""Experiment configuration and the batch runs behind the CLI subcommands."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from dataclasses import field as dc_field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .estimator import StablePhaseConfig, plan_schedule
from .fields import ControlledField, GaussianAnalyticField, MlpField, PiecewisePolynomial, VelocityField
from .flow_core import Latent, TimeGrid
from .metrics import retention_report
from .sampler import NonFiniteState, extrapolation_errors, sample_full, sample_vde

log = logging.getLogger(__name__)

BENCH_COLUMNS = ("n", "seed", "status", "nfe", "nfe_ratio", "mse", "rel_l2", "cosine", "psnr", "ssim")
TRACE_CSV_COLUMNS = ("step", "t", "alpha", "beta", "u_cos")


class ConfigError(ValueError):
    pass


def default_pattern(shape) -> np.ndarray:
    """Smooth unit-RMS pattern used as the Gaussian target mean and controlled-field reference."""
    if len(shape) == 2:
        h, w = shape
        g = np.outer(np.sin(np.pi * np.linspace(0, 1, h)), np.cos(np.pi * np.linspace(0, 1, w)))
    else:
        g = np.cos(np.pi * np.linspace(0, 1, shape[0])) + 0.5
    g = g.ravel()
    return g / np.sqrt(np.mean(g**2))


@dataclass
class ExperimentConfig:
    field: str = "gaussian"
    gaussian: dict = dc_field(default_factory=lambda: {"mu": "pattern", "s1": 1.0})
    controlled: dict = dc_field(default_factory=lambda: {
        "a": {"pieces": [[1.0, 1.0]], "breaks": []},
        "b": {"pieces": [[0.5, -0.25]], "breaks": []},
        "w": "pattern",
    })
    T: int = 50
    W: int = 7
    n: list = dc_field(default_factory=lambda: [2])
    calls_per_step: int = 1
    seeds: int = 1
    base_seed: int = 0
    shape: list = dc_field(default_factory=lambda: [8, 8])
    mode: str = "fixed"
    grid_shift: float = 1.0
    epsilon: float = 0.02
    delta: float = 0.99
    workers: int = 0
    out: str = "vde_out"

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def dim(self) -> int:
        return int(np.prod(self.shape))


def _key_lines(text: str) -> dict:
    try:
        node = yaml.compose(text)
    except yaml.YAMLError:
        return {}
    if not isinstance(node, yaml.MappingNode):
        return {}
    return {k.value: k.start_mark.line + 1 for k, _ in node.value}


def load_config(path: str | None, overrides: dict | None = None) -> ExperimentConfig:
    """File (YAML or JSON) < VDE_SEED env var < explicit overrides. Validates the result."""
    raw, lines, name = {}, {}, "<flags>"
    if path is not None:
        text = Path(path).read_text()
        name = str(path)
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        lines = _key_lines(text)
        raw.pop("version", None)
        raw = raw.get("config", raw)  # accept run.json directly
        if "config" in lines:
            lines = {k: lines["config"] for k in raw}
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for k in raw:
        if k not in known:
            raise ConfigError(f"{name}:{lines.get(k, '?')}: unknown key {k!r}")
    if os.environ.get("VDE_SEED"):
        raw["base_seed"] = os.environ["VDE_SEED"]
        lines["base_seed"] = "VDE_SEED"
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[k] = v
            lines[k] = "flag"
    try:
        cfg = _coerce(raw)
        validate(cfg)
    except ConfigError as exc:
        key = exc.args[1] if len(exc.args) > 1 else None
        where = lines.get(key, "?") if key else "?"
        raise ConfigError(f"{name}:{where}: {exc.args[0]}") from None
    return cfg


def _coerce(raw: dict) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for f in dataclasses.fields(cfg):
        if f.name not in raw:
            continue
        v = raw[f.name]
        default = getattr(cfg, f.name)
        try:
            if f.name == "n":
                v = [int(x) for x in (v if isinstance(v, (list, tuple)) else str(v).split(","))]
            elif f.name == "shape":
                v = [int(x) for x in (v if isinstance(v, (list, tuple)) else str(v).split("x"))]
            elif isinstance(default, bool):
                v = bool(v)
            elif isinstance(default, int):
                v = int(v)
            elif isinstance(default, float):
                v = float(v)
            elif isinstance(default, dict):
                if not isinstance(v, dict):
                    raise TypeError
                v = {**default, **v}
            else:
                v = str(v)
        except (TypeError, ValueError):
            raise ConfigError(f"bad value for {f.name}: {raw[f.name]!r}", f.name) from None
        setattr(cfg, f.name, v)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    def bad(msg, key):
        raise ConfigError(msg, key)

    if cfg.T < 3:
        bad("T must be >= 3", "T")
    if not 2 <= cfg.W <= cfg.T - 1:
        bad(f"W must satisfy 2 <= W <= T-1 (got W={cfg.W}, T={cfg.T})", "W")
    if not cfg.n or any(k < 1 for k in cfg.n):
        bad("n must be a non-empty list of integers >= 1", "n")
    if cfg.calls_per_step < 1:
        bad("calls_per_step must be >= 1", "calls_per_step")
    if cfg.seeds < 1:
        bad("seeds must be >= 1", "seeds")
    if len(cfg.shape) not in (1, 2) or any(s < 1 for s in cfg.shape) or cfg.dim < 2:
        bad("shape must be [d] or [h, w] with at least 2 entries", "shape")
    if cfg.mode not in ("fixed", "dynamic"):
        bad("mode must be 'fixed' or 'dynamic'", "mode")
    if cfg.grid_shift <= 0:
        bad("grid_shift must be positive", "grid_shift")
    if not (0 < cfg.epsilon < 1 and 0 < cfg.delta < 1):
        bad("epsilon and delta must lie in (0, 1)", "epsilon")
    if cfg.workers < 0:
        bad("workers must be >= 0", "workers")
    if cfg.field == "gaussian":
        if float(cfg.gaussian.get("s1", 1.0)) <= 0:
            bad("gaussian.s1 must be positive", "gaussian")
    elif cfg.field == "controlled":
        for key in ("a", "b"):
            try:
                PiecewisePolynomial(**cfg.controlled[key])
            except (TypeError, ValueError, KeyError) as exc:
                bad(f"controlled.{key}: {exc}", "controlled")
    elif cfg.field.startswith("mlp:"):
        if not Path(cfg.field[4:]).is_file():
            bad(f"weight file {cfg.field[4:]!r} not found", "field")
    else:
        bad(f"field must be gaussian, controlled or mlp:<path> (got {cfg.field!r})", "field")


def _vector_param(spec, cfg: ExperimentConfig, key: str) -> np.ndarray:
    if isinstance(spec, str) and spec == "pattern":
        return default_pattern(cfg.shape)
    v = np.asarray(spec, dtype=np.float64).ravel()
    if v.size != cfg.dim:
        raise ConfigError(f"{key} has {v.size} entries, latent has {cfg.dim}", key)
    return v


def build_field(cfg: ExperimentConfig) -> VelocityField:
    if cfg.field == "gaussian":
        return GaussianAnalyticField(_vector_param(cfg.gaussian.get("mu", "pattern"), cfg, "gaussian"),
                                     float(cfg.gaussian.get("s1", 1.0)))
    if cfg.field == "controlled":
        c = cfg.controlled
        return ControlledField(PiecewisePolynomial(**c["a"]), PiecewisePolynomial(**c["b"]),
                               _vector_param(c.get("w", "pattern"), cfg, "controlled"))
    f = MlpField.load(cfg.field[4:])
    if f.dim != cfg.dim:
        raise ConfigError(f"weights expect dim {f.dim}, shape gives {cfg.dim}", "shape")
    return f


def build_grid(cfg: ExperimentConfig) -> TimeGrid:
    if cfg.grid_shift == 1.0:
        return TimeGrid.uniform(cfg.T)
    return TimeGrid.shifted(cfg.T, cfg.grid_shift)


def initial_latent(cfg: ExperimentConfig, seed: int) -> Latent:
    rng = np.random.default_rng(seed)
    return Latent(rng.standard_normal(cfg.dim), cfg.shape)


def seed_list(cfg: ExperimentConfig) -> list[int]:
    return [cfg.base_seed + k for k in range(cfg.seeds)]


def _pool_map(fn, items, workers: int):
    workers = workers or os.cpu_count() or 1
    if workers == 1 or len(items) == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def write_run_json(cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.json").write_text(
        json.dumps({"version": __version__, "config": cfg.to_json()}, indent=2, sort_keys=True) + "\n")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


# --- sample ---------------------------------------------------------------------

def run_sample(cfg: ExperimentConfig, method: str = "both", echo=print) -> int:
    """Write per-seed sample JSON and trace CSV files. Returns number of failed trajectories."""
    out = Path(cfg.out)
    write_run_json(cfg, out)
    fld, grid = build_field(cfg), build_grid(cfg)
    stable = StablePhaseConfig(cfg.epsilon, cfg.delta)
    failures = 0
    for seed in seed_list(cfg):
        x0 = initial_latent(cfg, seed)
        jobs = []
        if method in ("full", "both"):
            jobs.append((f"full_s{seed}", "full", lambda: sample_full(fld, x0, grid, cfg.calls_per_step)))
        if method in ("vde", "both"):
            for n in cfg.n:
                sched = plan_schedule(cfg.T, cfg.W, n, cfg.calls_per_step)
                jobs.append((f"vde_n{n}_s{seed}", f"vde n={n}",
                             lambda s=sched: sample_vde(fld, x0, grid, s, cfg.mode, stable)))
        for stem, label, job in jobs:
            try:
                res = job()
            except (NonFiniteState, ValueError) as exc:
                failures += 1
                (out / f"{stem}.json").write_text(json.dumps({"failed": str(exc)}) + "\n")
                echo(f"{label} seed={seed} FAILED: {exc}")
                continue
            (out / f"{stem}.json").write_text(res.dumps())
            (out / f"{stem}_trace.csv").write_text(res.trace.to_csv())
            echo(f"{label} seed={seed} NFE {res.nfe} wall {res.trace.wall_time:.4f}s")
    return failures


# --- bench ----------------------------------------------------------------------

def _bench_seed(cfg: ExperimentConfig, fld, grid, stable, seed: int) -> list[dict]:
    x0 = initial_latent(cfg, seed)
    try:
        base = sample_full(fld, x0, grid, cfg.calls_per_step)
    except (NonFiniteState, ValueError) as exc:
        return [{"n": n, "seed": seed, "status": f"baseline failed: {exc}"} for n in cfg.n]
    rows = []
    for n in cfg.n:
        sched = plan_schedule(cfg.T, cfg.W, n, cfg.calls_per_step)
        try:
            res = sample_vde(fld, x0, grid, sched, cfg.mode, stable)
        except (NonFiniteState, ValueError) as exc:
            rows.append({"n": n, "seed": seed, "status": f"failed: {exc}"})
            continue
        rep = retention_report(res.final, base.final, base.nfe, res.nfe)
        rows.append({"n": n, "seed": seed, "status": "ok", "nfe": res.nfe, **rep.to_json()})
    return rows


def run_bench(cfg: ExperimentConfig) -> tuple[list[dict], int]:
    """Returns (rows incl. per-n mean rows, failed trajectory count) and writes bench.csv/json."""
    out = Path(cfg.out)
    write_run_json(cfg, out)
    fld, grid = build_field(cfg), build_grid(cfg)
    stable = StablePhaseConfig(cfg.epsilon, cfg.delta)
    per_seed = _pool_map(lambda s: _bench_seed(cfg, fld, grid, stable, s), seed_list(cfg), cfg.workers)
    data = sorted((r for rows in per_seed for r in rows), key=lambda r: (r["n"], r["seed"]))
    failures = sum(1 for r in data if r["status"] != "ok")

    table = []
    for n in cfg.n:
        group = [r for r in data if r["n"] == n]
        table += group
        ok = [r for r in group if r["status"] == "ok"]
        mean = {"n": n, "seed": "mean", "status": f"{len(ok)}/{len(group)} ok"}
        if ok:
            for key in BENCH_COLUMNS[3:]:
                vals = [r[key] for r in ok if r.get(key) is not None]
                if vals:
                    mean[key] = float(np.mean(vals))
        table.append(mean)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_COLUMNS)
    for r in table:
        w.writerow([_fmt(r.get(c)) for c in BENCH_COLUMNS])
    (out / "bench.csv").write_text(buf.getvalue())
    (out / "bench.json").write_text(json.dumps(table, indent=1) + "\n")
    return table, failures


# --- trace ----------------------------------------------------------------------

@dataclass
class TraceSummary:
    steps: np.ndarray
    t: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    u_cos: np.ndarray
    alpha_err_pct: float
    beta_err_pct: float
    mean_cos: float
    failures: int = 0

    @property
    def direction_err_pct(self) -> float:
        return 100.0 * (1.0 - self.mean_cos)


def run_trace(cfg: ExperimentConfig) -> TraceSummary:
    """Full-step traces over all seeds: per-step means plus pooled extrapolation errors.

    Error statistics use only steps whose extrapolation base lies at or after
    the warm-up (cfg.W).
    """
    out = Path(cfg.out)
    write_run_json(cfg, out)
    fld, grid = build_field(cfg), build_grid(cfg)

    def one(seed):
        try:
            return sample_full(fld, initial_latent(cfg, seed), grid, cfg.calls_per_step).trace
        except (NonFiniteState, ValueError):
            return None

    traces = _pool_map(one, seed_list(cfg), cfg.workers)
    ok = [tr for tr in traces if tr is not None]
    if not ok:
        raise RuntimeError("every trajectory failed")
    cols = {k: np.array([[getattr(r, k) for r in tr.rows] for tr in ok]).mean(axis=0)
            for k in ("alpha", "beta", "u_cos")}
    a_err, b_err, cos = [], [], []
    for tr in ok:
        a, b, c = extrapolation_errors(tr.decompositions, cfg.W)
        a_err.append(a)
        b_err.append(b)
        cos.append(c)
    summary = TraceSummary(np.arange(grid.T), grid.steps.copy(), cols["alpha"], cols["beta"],
                           np.clip(cols["u_cos"], -1.0, 1.0),
                           100.0 * float(np.mean(np.concatenate(a_err))),
                           100.0 * float(np.mean(np.concatenate(b_err))),
                           float(np.mean(np.concatenate(cos))), len(traces) - len(ok))

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_CSV_COLUMNS)
    for i in range(grid.T):
        w.writerow([i, repr(float(summary.t[i])), repr(float(summary.alpha[i])),
                    repr(float(summary.beta[i])), repr(float(summary.u_cos[i]))])
    buf.write(f"# alpha_err_pct,{summary.alpha_err_pct!r}\n")
    buf.write(f"# beta_err_pct,{summary.beta_err_pct!r}\n")
    buf.write(f"# mean_u_cos,{summary.mean_cos!r}\n")
    buf.write(f"# trajectories,{len(ok)}\n")
    (out / "trace.csv").write_text(buf.getvalue())
    return summary
