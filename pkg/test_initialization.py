"""Проверки инициализации: выбор Ī₀, Ȳ₀, степенной метод, VR-OPI, спектральный отчет."""
import numpy as np
import pytest

from initialization import (
    InitConfig,
    InitSolver,
    VrOpiConfig,
    apply_Y,
    default_index_set_size,
    eigen_report,
    init_orthogonality_promoting,
    planted_gap_problem,
    power_method,
    problem_from_rows,
    scale_estimate,
    select_index_set,
    vr_opi,
)
from signal_model import (
    Field,
    MeasurementSet,
    SensingEnsemble,
    gen_gaussian_sensing,
    gen_gaussian_signal,
    measure,
    relative_error,
)
from utils import ArgumentError, DataError


def _alignment_gap(u, v):
    return 1.0 - abs(np.vdot(v, u)) ** 2


def test_default_index_set_size():
    assert default_index_set_size(600) == 100
    assert default_index_set_size(7) == 2
    assert default_index_set_size(600, fraction=5 / 6) == 500
    assert InitConfig(size=11).resolve_size(600) == 11


def test_select_index_set_takes_largest_ratios():
    ens = SensingEnsemble(np.diag([1.0, 2.0, 1.0, 4.0]))
    meas = MeasurementSet(np.array([3.0, 2.0, 3.0, 4.0]))
    prob = select_index_set(meas, ens, 2)
    np.testing.assert_array_equal(prob.selected, [0, 2])
    np.testing.assert_array_equal(prob.discarded, [1, 3])
    np.testing.assert_allclose(np.linalg.norm(prob.normalized_rows, axis=1), 1.0)


def test_select_index_set_breaks_ties_by_index():
    ens = SensingEnsemble(np.eye(4))
    prob = select_index_set(MeasurementSet(np.ones(4)), ens, 2)
    np.testing.assert_array_equal(prob.selected, [0, 1])


def test_select_index_set_errors():
    ens = SensingEnsemble(np.array([[1.0, 0.0], [0.0, 0.0]]))
    with pytest.raises(DataError):
        select_index_set(MeasurementSet(np.ones(2)), ens, 1)
    with pytest.raises(ArgumentError):
        select_index_set(MeasurementSet(np.ones(2)), SensingEnsemble(np.eye(2)), 3)


@pytest.mark.parametrize("field", [Field.REAL, Field.COMPLEX])
def test_apply_Y_matches_dense_matrix(field):
    ens = gen_gaussian_sensing(120, 30, field, seed=11)
    meas = measure(ens, gen_gaussian_signal(30, field, seed=12))
    prob = select_index_set(meas, ens, 20)
    rows = prob.normalized_rows
    dense = sum(np.outer(d, d.conj()) for d in rows) / prob.size
    u = gen_gaussian_signal(30, field, seed=13).entries
    np.testing.assert_allclose(apply_Y(prob, u), dense @ u, atol=1e-10)


def test_orthonormal_rows_have_no_gap():
    report = eigen_report(problem_from_rows(np.eye(8)))
    assert report.defined
    assert report.delta == pytest.approx(0.0, abs=1e-10)
    assert report.lambda1 == pytest.approx(1.0 / 8)


def test_planted_gap_is_exact():
    prob = planted_gap_problem(50, 0.1, seed=3)
    report = eigen_report(prob)
    assert report.delta == pytest.approx(0.1, abs=1e-10)
    assert 0.0 <= report.lambda2 <= report.lambda1


def test_power_method_converges_to_top_eigenvector():
    prob = planted_gap_problem(10, 0.5, seed=1)
    v1 = eigen_report(prob).v1
    passes = []
    u = power_method(prob, iters=100, seed=2, callback=lambda p, _: passes.append(p))
    assert _alignment_gap(u, v1) < 1e-8
    assert passes == [float(i) for i in range(1, 101)]


def test_power_method_is_seeded():
    prob = planted_gap_problem(12, 0.2, seed=1)
    np.testing.assert_array_equal(power_method(prob, 5, seed=9), power_method(prob, 5, seed=9))


def test_vr_opi_converges_on_planted_problem():
    prob = planted_gap_problem(50, 0.1, seed=4)
    v1 = eigen_report(prob).v1
    u = vr_opi(prob, VrOpiConfig(epochs=30, seed=5))
    assert np.linalg.norm(u) == pytest.approx(1.0)
    assert _alignment_gap(u, v1) < 1e-6


def test_vr_opi_reports_passes_per_epoch():
    prob = planted_gap_problem(10, 0.3, seed=4)
    passes = []
    vr_opi(prob, VrOpiConfig(epochs=3, seed=1), callback=lambda p, _: passes.append(p))
    assert passes == [2.0, 4.0, 6.0]
    assert VrOpiConfig().passes_per_epoch(prob.size) == 2.0


def test_vr_opi_rejects_bad_step():
    prob = planted_gap_problem(10, 0.3, seed=4)
    with pytest.raises(ArgumentError):
        vr_opi(prob, VrOpiConfig(eta=-1.0))


def test_budget_config():
    assert InitConfig.for_budget(InitSolver.POWER, 100).power_iters == 100
    assert InitConfig.for_budget(InitSolver.VR_OPI, 100).vr_opi.epochs == 50
    assert VrOpiConfig.unnormalized_rows(1000).eta == pytest.approx(0.02)


def test_scale_estimate():
    meas = MeasurementSet(np.array([1.0, 2.0, 2.0]))
    z0 = scale_estimate(np.array([0.6, 0.8]), meas)
    np.testing.assert_allclose(z0.z, np.sqrt(3.0) * np.array([0.6, 0.8]))
    with pytest.raises(ArgumentError):
        scale_estimate(np.array([1.0, 1.0]), meas)


@pytest.mark.parametrize("solver", [InitSolver.POWER, InitSolver.VR_OPI])
def test_initial_estimate_is_informative(solver):
    n = 100
    errors = []
    for seed in range(3):
        x = gen_gaussian_signal(n, seed=100 + seed)
        ens = gen_gaussian_sensing(12 * n, n, seed=200 + seed)
        z0 = init_orthogonality_promoting(ens, measure(ens, x), InitConfig.for_budget(solver, 100, seed))
        errors.append(relative_error(z0, x))
    assert np.median(errors) <= 0.6


@pytest.mark.slow
def test_vr_opi_needs_fewer_passes_than_power_method():
    prob = planted_gap_problem(200, 0.05, seed=7)
    report = eigen_report(prob)
    assert report.delta <= 0.05 + 1e-12
    rng = np.random.default_rng(8)
    u0 = rng.standard_normal(prob.n)

    def passes_to_target(run):
        hits = []
        run(lambda passes, u: hits.append(passes) if _alignment_gap(u, report.v1) <= 1e-6 else None)
        return hits[0] if hits else np.inf

    power = passes_to_target(lambda cb: power_method(prob, 400, u0=u0, callback=cb))
    vr = passes_to_target(lambda cb: vr_opi(prob, VrOpiConfig(epochs=200, seed=9), u0=u0, callback=cb))
    assert vr < power
