"""Проверки CDP: маски, операторы через БПФ, блочный шаг, инициализация и восстановление."""
import numpy as np
import pytest
from scipy import stats

from cdp_operator import (
    PHASE_DELAYS,
    CdpMeasurements,
    CdpSolverConfig,
    MaskSet,
    block_staf_step,
    cdp_adjoint,
    cdp_apply,
    cdp_forward,
    cdp_loss,
    cdp_sensing_rows,
    cdp_vr_opi,
    gen_masks,
    init_cdp,
    recover_cdp,
    run_block_staf,
    select_cdp_index_set,
)
from initialization import InitConfig, InitSolver, VrOpiConfig, power_method
from refinement import stochastic_step
from signal_model import Field, Iterate, Signal, gen_gaussian_signal, relative_error
from utils import ArgumentError


def _complex_signal(n, seed):
    return gen_gaussian_signal(n, Field.COMPLEX, seed=seed)


def test_masks_are_seeded_unimodular_symbols():
    masks = gen_masks(16, 4, seed=1)
    assert (masks.K, masks.n) == (4, 16)
    np.testing.assert_allclose(np.abs(masks.masks), 1.0)
    np.testing.assert_array_equal(masks.masks, gen_masks(16, 4, seed=1).masks)
    assert not np.array_equal(masks.masks, gen_masks(16, 4, seed=2).masks)


def test_mask_symbols_are_equally_likely():
    masks = gen_masks(1000, 8, seed=3)
    symbols = np.argmin(np.abs(masks.masks[..., None] - PHASE_DELAYS), axis=-1)
    counts = np.bincount(symbols.ravel(), minlength=4)
    assert stats.chisquare(counts).pvalue > 1e-3


def test_mask_set_rejects_other_values():
    with pytest.raises(ArgumentError):
        MaskSet(np.array([[1.0, 0.5]]))
    with pytest.raises(ArgumentError):
        gen_masks(0, 2)


def test_delta_has_flat_spectrum():
    n = 8
    x = np.zeros(n, dtype=complex)
    x[0] = 1.0
    meas = cdp_forward(x, MaskSet(np.ones((1, n))))
    np.testing.assert_allclose(meas.psi_blocks, 1.0 / np.sqrt(n))


def test_each_mask_preserves_energy():
    x = _complex_signal(64, seed=4)
    meas = cdp_forward(x, gen_masks(64, 5, seed=5))
    np.testing.assert_allclose(np.sum(meas.psi_blocks ** 2, axis=1), x.norm() ** 2, rtol=1e-12)
    assert meas.norm_estimate() == pytest.approx(x.norm(), rel=1e-12)
    assert meas.m == 320


def test_zero_signal_gives_zero_measurements():
    meas = cdp_forward(np.zeros(16, dtype=complex), gen_masks(16, 3, seed=1))
    assert np.all(meas.psi_blocks == 0.0)


@pytest.mark.parametrize("n", [8, 64, 256])
def test_adjoint_matches_inner_product(n):
    masks = gen_masks(n, 3, seed=n)
    rng = np.random.default_rng(n)
    z = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    r = rng.standard_normal((3, n)) + 1j * rng.standard_normal((3, n))
    lhs = np.vdot(r, cdp_apply(z, masks))
    rhs = np.vdot(cdp_adjoint(r, masks), z)
    assert abs(lhs - rhs) <= 1e-10 * abs(lhs)


def test_fft_operator_matches_dense_rows():
    masks = gen_masks(16, 3, seed=6)
    z = _complex_signal(16, seed=7).entries
    ens = cdp_sensing_rows(masks)
    assert (ens.m, ens.n) == (48, 16)
    np.testing.assert_allclose(ens.row_sq_norms, 1.0)
    np.testing.assert_allclose(ens.inner(z).reshape(3, 16), cdp_apply(z, masks), atol=1e-12)


def test_operator_shape_errors():
    masks = gen_masks(8, 2, seed=1)
    with pytest.raises(ArgumentError):
        cdp_apply(np.ones(7), masks)
    with pytest.raises(ArgumentError):
        cdp_adjoint(np.ones((3, 8)), masks)


def test_block_step_keeps_solution_fixed():
    x = _complex_signal(32, seed=8)
    masks = gen_masks(32, 4, seed=9)
    meas = cdp_forward(x, masks)
    z = Iterate(x.entries, Field.COMPLEX)
    for k in range(masks.K):
        np.testing.assert_allclose(block_staf_step(z, masks, meas, k, mu=32.0).z, x.entries, atol=1e-12)
    assert cdp_loss(z, masks, meas) == pytest.approx(0.0, abs=1e-20)


def test_single_pattern_block_step_is_a_stochastic_step():
    masks = MaskSet(np.array([[1.0j]]))
    z = Iterate(np.array([0.3 - 0.4j]), Field.COMPLEX)
    psi = np.array([[0.7]])
    block = block_staf_step(z, masks, psi, 0, mu=0.6)
    single = stochastic_step(z, np.conj(masks.masks[0]), 0.7, mu=0.6)
    np.testing.assert_allclose(block.z, single.z, atol=1e-15)


def test_block_step_rejects_bad_mask_index():
    masks = gen_masks(8, 2, seed=1)
    meas = cdp_forward(_complex_signal(8, seed=1), masks)
    z = Iterate(np.ones(8, dtype=complex), Field.COMPLEX)
    with pytest.raises(ArgumentError):
        block_staf_step(z, masks, meas, 2, mu=1.0)


def test_init_operator_matches_dense_problem():
    masks = gen_masks(16, 4, seed=10)
    meas = cdp_forward(_complex_signal(16, seed=11), masks)
    prob = select_cdp_index_set(meas, masks, 20)
    dense = prob.to_init_problem()
    u = _complex_signal(16, seed=12).entries
    np.testing.assert_allclose(prob.apply(u), dense.apply(u), atol=1e-12)
    blocks = np.mean([prob.block_apply(k, u) for k in range(prob.K)], axis=0)
    np.testing.assert_allclose(blocks, prob.apply(u), atol=1e-12)
    assert prob.discarded.size == 64 - 20


def test_selection_takes_largest_amplitudes():
    masks = MaskSet(np.ones((2, 2)))
    prob = select_cdp_index_set(CdpMeasurements(np.array([[0.1, 0.9], [0.9, 0.2]])), masks, 2)
    np.testing.assert_array_equal(prob.selected, [1, 2])
    with pytest.raises(ArgumentError):
        select_cdp_index_set(CdpMeasurements(np.ones((2, 2))), masks, 5)


def test_block_vr_opi_reaches_top_rayleigh_quotient():
    masks = gen_masks(32, 8, seed=13)
    meas = cdp_forward(_complex_signal(32, seed=14), masks)
    prob = select_cdp_index_set(meas, masks, 43)
    top = power_method(prob, iters=2000, seed=1)
    lambda1 = np.vdot(top, prob.apply(top)).real
    u = cdp_vr_opi(prob, VrOpiConfig(epochs=200, seed=2))
    assert np.linalg.norm(u) == pytest.approx(1.0)
    assert np.vdot(u, prob.apply(u)).real >= 0.99 * lambda1


def test_cdp_initial_estimate_is_informative():
    errors = []
    for seed in range(3):
        x = _complex_signal(32, seed=30 + seed)
        masks = gen_masks(32, 12, seed=40 + seed)
        z0 = init_cdp(masks, cdp_forward(x, masks), InitConfig.for_budget(InitSolver.POWER, 100, seed))
        errors.append(relative_error(z0, x))
    assert np.median(errors) < 0.8


def test_block_staf_converges_locally():
    x = _complex_signal(64, seed=15)
    masks = gen_masks(64, 8, seed=16)
    meas = cdp_forward(x, masks)
    noise = _complex_signal(64, seed=17).entries
    z0 = Iterate(x.entries + 0.05 * x.norm() / np.linalg.norm(noise) * noise, Field.COMPLEX)
    trace = run_block_staf(masks, meas, z0, CdpSolverConfig(max_passes=200, target_rel_err=1e-8, seed=1), x)
    assert trace.success
    assert trace.final_rel_err < 1e-8
    assert trace.config_echo["solver"] == "block-staf"


def test_solver_config_validation():
    with pytest.raises(ArgumentError):
        CdpSolverConfig(step=0.0).validate()


@pytest.mark.slow
def test_recovery_with_eight_masks():
    x = _complex_signal(128, seed=20)
    trace = recover_cdp(x, gen_masks(128, 8, seed=21), cfg=CdpSolverConfig(seed=22))
    assert trace.success
    assert trace.final_rel_err < 1e-5


@pytest.mark.slow
def test_single_mask_is_not_enough():
    x = Signal(np.linspace(0.1, 0.9, 128), Field.REAL)
    trace = recover_cdp(x, gen_masks(128, 1, seed=23), cfg=CdpSolverConfig(seed=24))
    assert not trace.success
