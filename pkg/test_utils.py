import numpy as np
import pytest

from utils import (
    ArgumentError,
    DivergenceError,
    ExperimentIOError,
    NumericalError,
    fit_log_linear,
    has_plateaued,
    median_iqr,
    pad_to_length,
    passes_to_threshold,
    seed_meta,
    split_seed,
    trial_seed,
)


def test_trial_seed_depends_only_on_coordinates():
    a = np.random.default_rng(trial_seed(7, 2, 3)).standard_normal(4)
    b = np.random.default_rng(trial_seed(7, 2, 3)).standard_normal(4)
    c = np.random.default_rng(trial_seed(7, 3, 2)).standard_normal(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert seed_meta(trial_seed(7, 2, 3)) == {"entropy": 7, "spawn_key": [2, 3]}


def test_split_seed_gives_distinct_streams():
    first, second = split_seed(5, 2)
    assert first.generate_state(2).tolist() != second.generate_state(2).tolist()


def test_passes_to_threshold():
    assert passes_to_threshold([1.0, 0.1, 1e-6, 1e-9], 1e-5) == 2
    assert passes_to_threshold([1.0, 0.5], 1e-5) is None


def test_has_plateaued():
    assert not has_plateaued([1.0, 0.5], window=5, rel_tol=1e-3)
    assert has_plateaued([2.0] * 7, window=5, rel_tol=1e-12)
    assert not has_plateaued([1.0, 0.9, 0.8, 0.7, 0.6, 0.5], window=5, rel_tol=1e-3)


def test_median_iqr():
    median, q25, q75 = median_iqr(np.array([1.0, 2.0, 3.0, 4.0, 5.0]))
    assert (median, q25, q75) == (3.0, 2.0, 4.0)


def test_fit_log_linear_recovers_rate():
    slope, r_squared = fit_log_linear(10.0 ** (-0.5 * np.arange(10)))
    assert slope == pytest.approx(-0.5)
    assert r_squared == pytest.approx(1.0)
    with pytest.raises(ArgumentError):
        fit_log_linear([1.0, 0.0, 0.1])


def test_pad_to_length_repeats_last_value():
    np.testing.assert_array_equal(pad_to_length([3.0, 2.0], 4), [3.0, 2.0, 2.0, 2.0])
    np.testing.assert_array_equal(pad_to_length([3.0, 2.0, 1.0], 2), [3.0, 2.0])


def test_error_hierarchy():
    assert issubclass(DivergenceError, NumericalError)
    error = ExperimentIOError("out.csv", "нет доступа")
    assert isinstance(error, OSError) and error.path == "out.csv"
