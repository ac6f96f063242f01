import numpy as np
import pytest

from vde.decomposition import decompose
from vde.estimator import StablePhaseConfig, StepMode, plan_schedule
from vde.fields import ConstantField, ControlledField, GaussianAnalyticField, PiecewisePolynomial, VelocityField
from vde.flow_core import Latent, TimeGrid
from vde.sampler import (TRACE_COLUMNS, NonFiniteState, record_component_dynamics,
                         relative_final_error, sample_full, sample_vde)


def affine_controlled(d=32, b=(0.0, 0.0), seed=0):
    rng = np.random.default_rng(seed)
    return ControlledField(PiecewisePolynomial.affine(0.5, 1.0), PiecewisePolynomial.affine(*b),
                           rng.standard_normal(d))


@pytest.mark.parametrize("grid", [TimeGrid.uniform(7), TimeGrid.uniform(50), TimeGrid.shifted(20, 3.0)])
def test_euler_exact_on_constant_field(grid):
    k = np.array([0.25, -1.5, 3.0])
    x0 = np.array([1.0, 2.0, 3.0])
    res = sample_full(ConstantField(k), x0, grid)
    assert np.allclose(res.final.data, x0 + k, rtol=0, atol=1e-13)


def test_gaussian_mean_path_lands_on_mean():
    mu = np.array([5.0, 5.0])
    f = GaussianAnalyticField(mu, 1.0)
    # x0 = 0 lies on the mean path t * mu
    res = sample_full(f, np.array([1e-3, -1e-3]), TimeGrid.uniform(50))
    ref = sample_full(f, np.array([1e-3, -1e-3]), TimeGrid.uniform(5000))
    assert np.linalg.norm(res.final.data - mu) <= 0.15
    assert np.linalg.norm(res.final.data - ref.final.data) <= 0.15


def test_full_run_nfe():
    f = GaussianAnalyticField(np.ones(4))
    res = sample_full(f, np.ones(4), TimeGrid.uniform(50))
    assert res.nfe == 50 == f.eval_count
    assert sample_full(f, np.ones(4), TimeGrid.uniform(50), calls_per_step=2).nfe == 100


def test_trace_rows():
    f = GaussianAnalyticField(np.ones(4))
    res = sample_vde(f, np.ones(4) * 0.3, TimeGrid.uniform(20), plan_schedule(20, 4, 2))
    rows = res.trace.rows
    assert len(rows) == 20
    assert [r.nfe for r in rows] == sorted(r.nfe for r in rows)
    assert res.trace.plan == "".join(m.value for m in plan_schedule(20, 4, 2).plan)
    assert all(-1 <= r.u_cos <= 1 for r in rows)
    header, *body = res.trace.to_csv().splitlines()
    assert header == ",".join(TRACE_COLUMNS) and len(body) == 20


def test_all_full_schedule_is_bitwise_baseline():
    f = GaussianAnalyticField(np.linspace(-1, 1, 16), 0.7)
    x0 = np.random.default_rng(0).standard_normal(16)
    grid = TimeGrid.uniform(30)
    a = sample_full(f, x0, grid)
    b = sample_vde(f, x0, grid, plan_schedule(30, 29, 3))
    assert np.array_equal(a.final.data, b.final.data)
    assert a.trace.to_csv() == b.trace.to_csv()


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
def test_vde_exact_for_parallel_affine_field(n):
    f = affine_controlled()
    x0 = np.random.default_rng(1).standard_normal(32)
    grid = TimeGrid.uniform(50)
    full = sample_full(f, x0, grid)
    vde = sample_vde(f, x0, grid, plan_schedule(50, 7, n))
    assert relative_final_error(vde, full) <= 1e-9


def test_estimated_rows_carry_exact_affine_coefficients():
    f = affine_controlled(b=(0.5, -0.25))
    res = sample_vde(f, np.random.default_rng(2).standard_normal(32), TimeGrid.uniform(50),
                     plan_schedule(50, 7, 3))
    for r in res.trace.rows:
        assert r.alpha == pytest.approx(f.a(r.t), rel=1e-12)
        assert r.beta == pytest.approx(f.b(r.t), rel=1e-12)


def test_nfe_metering_matches_full_count():
    f = GaussianAnalyticField(np.ones(8))
    sched = plan_schedule(50, 7, 3)
    res = sample_vde(f, np.ones(8), TimeGrid.uniform(50), sched)
    assert f.eval_count == sched.full_count == res.nfe
    f.reset_count()
    res = sample_vde(f, np.ones(8), TimeGrid.uniform(50), plan_schedule(50, 11, 5, calls_per_step=2))
    assert f.eval_count == 18 and res.nfe == 36


def test_schedule_grid_mismatch():
    f = GaussianAnalyticField(np.ones(3))
    with pytest.raises(ValueError):
        sample_vde(f, np.ones(3), TimeGrid.uniform(10), plan_schedule(12, 3, 2))


def test_estimated_steps_use_the_current_latent():
    """Replay the VDE loop by hand: each estimate must be built around that step's own x."""
    f = affine_controlled(d=8, b=(0.6, 0.3), seed=5)
    x0 = np.random.default_rng(6).standard_normal(8)
    grid = TimeGrid.uniform(20)
    sched = plan_schedule(20, 3, 3)
    res = sample_vde(f, x0, grid, sched)

    x, hist = x0.copy(), []
    stale = x0.copy()
    for t, dt, mode in zip(grid.steps, grid.deltas, sched.plan):
        if mode is StepMode.FULL:
            v = f(x, t)
            hist = (hist + [decompose(v, x, t)])[-2:]
            stale = x.copy()
        else:
            (d1, d2) = hist
            a = d1.alpha + (d2.alpha - d1.alpha) / (d2.t - d1.t) * (t - d1.t)
            b = d1.beta + (d2.beta - d1.beta) / (d2.t - d1.t) * (t - d1.t)
            v = a * x + b * np.linalg.norm(x) * d2.u
            # an estimate built around the anchor's latent would differ
            assert not np.allclose(v, a * stale + b * np.linalg.norm(stale) * d2.u)
        x = x + dt * v
    assert np.allclose(res.final.data, x, rtol=1e-13, atol=1e-13)


def test_determinism():
    f = GaussianAnalyticField(np.linspace(0, 1, 9), 0.5)
    x0 = Latent(np.random.default_rng(3).standard_normal(9), (3, 3))
    runs = [sample_vde(f, x0, TimeGrid.uniform(50), plan_schedule(50, 7, 2)) for _ in range(2)]
    assert np.array_equal(runs[0].final.data, runs[1].final.data)
    assert runs[0].final.shape == (3, 3)
    assert runs[0].dumps() == runs[1].dumps()


class _Exploding(VelocityField):
    def __init__(self):
        super().__init__(2)

    def _velocity(self, x, t):
        return np.full(2, np.inf) if t > 0.3 else x


def test_non_finite_state_reports_step():
    with pytest.raises(NonFiniteState) as info:
        sample_full(_Exploding(), np.ones(2), TimeGrid.uniform(10))
    assert info.value.step == 4


def test_dynamic_mode_switches_after_stable_phase():
    a = PiecewisePolynomial([[10.0, -79.0, 200.0], [2.0, 1.0]], [0.2])
    rng = np.random.default_rng(0)
    f = ControlledField(a, PiecewisePolynomial.constant(0.5), rng.standard_normal(64))
    x0 = rng.standard_normal(64)
    grid = TimeGrid.uniform(50)
    res = sample_vde(f, x0, grid, plan_schedule(50, 7, 2), mode="dynamic")
    # detection fires once steps 10, 11, 12 are in; estimation starts at 13
    assert res.trace.plan[:13] == "F" * 13
    assert res.trace.plan[13:16] == "EEF" and res.trace.plan[-1] == "F"
    assert res.nfe == f.eval_count == res.trace.plan.count("F")


def test_dynamic_mode_stays_full_when_never_stable():
    f = GaussianAnalyticField(np.ones(2) * 5, 1.0)
    res = sample_vde(f, np.array([0.3, 0.1]), TimeGrid.uniform(10), plan_schedule(10, 3, 2),
                     mode="dynamic", stable=StablePhaseConfig(1e-12, 0.999999))
    assert res.trace.plan == "F" * 10


def test_component_dynamics_exact_for_affine_field():
    f = affine_controlled(b=(0.5, -0.25))
    cd = record_component_dynamics(f, np.random.default_rng(11).standard_normal(32), TimeGrid.uniform(50))
    assert cd.alpha_err_pct <= 1e-10 and cd.beta_err_pct <= 1e-10
    assert 0.99 < cd.mean_cos <= 1.0


def test_component_dynamics_direction_frozen():
    # b = 0: directions come from the deterministic fallback chain and never move
    f = affine_controlled()
    cd = record_component_dynamics(f, np.random.default_rng(11).standard_normal(32), TimeGrid.uniform(50))
    assert cd.mean_cos == pytest.approx(1.0, abs=1e-12)
    assert cd.direction_err_pct == pytest.approx(0.0, abs=1e-9)


def test_component_dynamics_on_learned_field(moons_weights):
    from vde.fields import MlpField
    f = MlpField.load(moons_weights)
    cd = record_component_dynamics(f, np.array([0.4, -1.1]), TimeGrid.uniform(50), warmup=7)
    assert np.isfinite(cd.alpha_err_pct) and cd.alpha_err_pct >= 0
    assert np.isfinite(cd.beta_err_pct) and cd.beta_err_pct >= 0
    assert -1 <= cd.mean_cos <= 1
    assert all(-1 <= r.u_cos <= 1 for r in cd.trace.rows)


def test_error_grows_with_interval():
    f = GaussianAnalyticField(np.sin(np.arange(64.0)), 1.0)
    grid = TimeGrid.uniform(50)
    means = []
    for n in range(1, 6):
        errs = []
        for seed in range(100):
            x0 = np.random.default_rng(seed).standard_normal(64)
            errs.append(relative_final_error(sample_vde(f, x0, grid, plan_schedule(50, 7, n)),
                                             sample_full(f, x0, grid)))
        means.append(np.mean(errs))
    violations = [(a, b) for a, b in zip(means, means[1:]) if b < a]
    assert len(violations) <= 1 and all(b >= 0.9 * a for a, b in violations)
