"""Проверки базовой модели: генераторы, измерения, расстояния, потери, файлы задач."""
import numpy as np
import pytest

from signal_model import (
    Field,
    Iterate,
    MeasurementSet,
    SensingEnsemble,
    Signal,
    align_phase,
    amplitude_loss,
    dist,
    gen_gaussian_sensing,
    gen_gaussian_signal,
    load_problem,
    measure,
    problem_from_dict,
    problem_to_dict,
    relative_error,
    save_problem,
)
from utils import ArgumentError, DomainError, ExperimentIOError


def test_generators_are_deterministic():
    a = gen_gaussian_sensing(30, 10, Field.COMPLEX, seed=5)
    b = gen_gaussian_sensing(30, 10, Field.COMPLEX, seed=5)
    np.testing.assert_array_equal(a.rows, b.rows)
    np.testing.assert_array_equal(gen_gaussian_signal(10, seed=1).entries,
                                  gen_gaussian_signal(10, seed=1).entries)


def test_complex_signal_has_unit_energy_per_entry():
    x = gen_gaussian_signal(4000, Field.COMPLEX, seed=3)
    assert x.entries.dtype == np.complex128
    assert abs(x.norm() ** 2 / x.n - 1.0) < 0.1


def test_row_norms_are_cached():
    ens = gen_gaussian_sensing(20, 6, Field.REAL, seed=2)
    np.testing.assert_allclose(ens.row_sq_norms, np.sum(ens.rows ** 2, axis=1), rtol=1e-12)
    assert (ens.m, ens.n) == (20, 6)


def test_buffers_are_read_only():
    ens = gen_gaussian_sensing(5, 3, seed=0)
    with pytest.raises(ValueError):
        ens.rows[0, 0] = 1.0
    meas = MeasurementSet(np.ones(3))
    with pytest.raises(ValueError):
        meas.psi[0] = 2.0


def test_real_field_rejects_complex_values():
    with pytest.raises(ArgumentError):
        Signal(np.array([1.0 + 1.0j]), Field.REAL)
    with pytest.raises(ArgumentError):
        SensingEnsemble(np.ones(3), Field.REAL)


def test_noiseless_measurements_are_magnitudes():
    ens = gen_gaussian_sensing(40, 8, Field.COMPLEX, seed=1)
    x = gen_gaussian_signal(8, Field.COMPLEX, seed=2)
    meas = measure(ens, x)
    np.testing.assert_allclose(meas.psi, np.abs(ens.rows.conj() @ x.entries), rtol=1e-12)
    np.testing.assert_array_equal(meas.y, meas.psi * meas.psi)
    assert meas.noise_sigma == 0.0


def test_noisy_measurements_keep_negative_values():
    ens = gen_gaussian_sensing(200, 5, seed=1)
    x = gen_gaussian_signal(5, seed=2)
    meas = measure(ens, x, sigma=5.0, seed=3)
    assert np.any(meas.psi < 0)


def test_measure_rejects_dimension_mismatch():
    ens = gen_gaussian_sensing(10, 4, seed=1)
    with pytest.raises(ArgumentError):
        measure(ens, gen_gaussian_signal(5, seed=1))
    with pytest.raises(ArgumentError):
        measure(ens, gen_gaussian_signal(4, Field.COMPLEX, seed=1))


def test_dist_is_invariant_to_global_sign_and_phase():
    x = gen_gaussian_signal(12, seed=4)
    assert dist(-x.entries, x) == pytest.approx(0.0, abs=1e-12)

    xc = gen_gaussian_signal(12, Field.COMPLEX, seed=4)
    z = xc.entries + 0.1 * gen_gaussian_signal(12, Field.COMPLEX, seed=5).entries
    base = dist(z, xc)
    for theta in np.linspace(0.0, 2.0 * np.pi, 7):
        assert dist(np.exp(1j * theta) * z, xc) == pytest.approx(base, abs=1e-10)
    assert dist(np.exp(0.7j) * xc.entries, xc) == pytest.approx(0.0, abs=1e-6)


def test_align_phase_attains_distance():
    xc = gen_gaussian_signal(9, Field.COMPLEX, seed=8)
    z = np.exp(2.1j) * xc.entries + 0.05 * gen_gaussian_signal(9, Field.COMPLEX, seed=9).entries
    aligned = align_phase(z, xc)
    assert np.linalg.norm(aligned - xc.entries) == pytest.approx(dist(z, xc), abs=1e-10)


def test_relative_error_requires_nonzero_signal():
    with pytest.raises(DomainError):
        relative_error(np.ones(3), np.zeros(3))
    x = np.array([3.0, 4.0])
    assert relative_error(np.array([3.0, 4.5]), x) == pytest.approx(0.1)


def test_amplitude_loss():
    ens = SensingEnsemble(np.eye(2))
    meas = MeasurementSet(np.array([1.0, 2.0]))
    assert amplitude_loss(np.zeros(2), ens, meas) == pytest.approx(2.5)

    ens = gen_gaussian_sensing(30, 6, seed=3)
    x = gen_gaussian_signal(6, seed=4)
    assert amplitude_loss(-x.entries, ens, measure(ens, x)) == pytest.approx(0.0, abs=1e-20)


def test_iterate_field_follows_dtype():
    assert Iterate.from_array(np.ones(3)).field is Field.REAL
    assert Iterate.from_array(np.ones(3, dtype=complex), 2.0).pass_count == 2.0


@pytest.mark.parametrize("suffix", [".npz", ".json"])
def test_problem_file_round_trip(tmp_path, suffix):
    ens = gen_gaussian_sensing(12, 4, Field.COMPLEX, seed=1)
    x = gen_gaussian_signal(4, Field.COMPLEX, seed=2)
    meas = measure(ens, x, sigma=0.1, seed=3)
    path = save_problem(tmp_path / f"problem{suffix}", ens, meas, x, seed=7)
    ens2, meas2, x2 = load_problem(path)
    np.testing.assert_array_equal(ens2.rows, ens.rows)
    np.testing.assert_array_equal(meas2.psi, meas.psi)
    np.testing.assert_array_equal(x2.entries, x.entries)
    assert ens2.field is Field.COMPLEX
    assert meas2.noise_sigma == 0.1


def test_problem_dict_without_signal():
    ens = gen_gaussian_sensing(6, 3, seed=1)
    meas = measure(ens, gen_gaussian_signal(3, seed=2))
    data = problem_to_dict(ens, meas)
    assert data["header"]["m"] == 6 and data["signal"] is None
    _, _, x = problem_from_dict(data)
    assert x is None


@pytest.mark.parametrize("name, content", [
    ("bad.json", b'{"header": '),
    ("bad.npz", b"PK\x03\x04 truncated"),
    ("empty.npz", b""),
])
def test_corrupt_problem_file_names_path(tmp_path, name, content):
    path = tmp_path / name
    path.write_bytes(content)
    with pytest.raises(ExperimentIOError) as error:
        load_problem(path)
    assert error.value.path == str(path)


def test_truncated_problem_file(tmp_path):
    ens = gen_gaussian_sensing(12, 4, seed=1)
    path = save_problem(tmp_path / "problem.npz", ens, measure(ens, gen_gaussian_signal(4, seed=2)))
    path.write_bytes(path.read_bytes()[:40])
    with pytest.raises(ExperimentIOError):
        load_problem(path)
