"""Проверки командной строки staf-bench."""
import json

import pandas as pd
import pytest

from experiments import ExperimentSpec, load_spec, save_spec
from main import build_parser, main, spec_from_args
from utils import ArgumentError


def _parse(*argv):
    return build_parser().parse_args(list(argv))


def test_trace_command_writes_table(tmp_path):
    out = tmp_path / "trace.csv"
    code = main(["trace", "--n", "8", "--m-over-n", "4", "--trials", "2", "--passes", "5",
                 "--init", "truth", "--workers", "1", "--out", str(out)])
    assert code == 0
    frame = pd.read_csv(out)
    assert set(frame["variant"]) == {"constant", "kaczmarz"}


def test_json_output_and_saved_spec(tmp_path):
    out = tmp_path / "rate.json"
    saved = tmp_path / "spec.json"
    code = main(["success-rate", "--n", "8", "--m-over-n", "6", "--trials", "1", "--passes", "20",
                 "--workers", "1", "--format", "json", "--out", str(out), "--save-spec", str(saved)])
    assert code == 0
    payload = json.loads(out.read_text())
    assert payload["spec"]["n"] == 8
    assert load_spec(saved).grid == (6.0,)


def test_invalid_values_exit_with_one():
    assert main(["success-rate", "--trials", "0", "--workers", "1"]) == 1
    assert main(["cdp-image", "--masks", "0", "--workers", "1"]) == 1


def test_unknown_choice_is_a_usage_error():
    with pytest.raises(SystemExit) as error:
        main(["trace", "--step-rule", "newton"])
    assert error.value.code == 2


def test_cli_flags_override_spec_file(tmp_path):
    path = save_spec(ExperimentSpec.for_kind("trace", n=12, trials=3, gamma=0.5), tmp_path / "spec.json")
    spec = spec_from_args(_parse("trace", "--spec", str(path), "--trials", "2"))
    assert (spec.n, spec.trials, spec.gamma) == (12, 2, 0.5)


def test_spec_file_kind_must_match(tmp_path):
    path = save_spec(ExperimentSpec.for_kind("trace"), tmp_path / "spec.json")
    with pytest.raises(ArgumentError):
        spec_from_args(_parse("noise", "--spec", str(path)))


def test_grid_flag_depends_on_kind():
    noise = spec_from_args(_parse("noise", "--sigma", "0.1", "0.2", "--m-over-n", "6"))
    assert noise.grid == (0.1, 0.2) and noise.ratio == 6.0
    cdp = spec_from_args(_parse("cdp-image", "--masks", "2", "4", "--image-size", "8"))
    assert cdp.grid == (2.0, 4.0) and cdp.image_size == 8
    race = spec_from_args(_parse("init-race", "--planted-gap", "0.1", "--step-rule", "taf"))
    assert race.planted_gap == 0.1 and race.step_rules == ("taf",)
    with pytest.raises(ArgumentError):
        spec_from_args(_parse("noise", "--m-over-n", "4", "6"))


def test_solve_generates_and_reloads_problem(tmp_path):
    problem = tmp_path / "problem.npz"
    first = tmp_path / "first.csv"
    code = main(["solve", "--n", "8", "--m-over-n", "6", "--passes", "50", "--seed", "3",
                 "--save-problem", str(problem), "--out", str(first)])
    assert code == 0
    summary = json.loads(first.with_suffix(".json").read_text())
    assert summary["config_echo"]["step_rule"] == "kaczmarz"
    assert len(pd.read_csv(first)) >= 1

    second = tmp_path / "second.csv"
    assert main(["solve", "--problem", str(problem), "--passes", "50", "--seed", "3",
                 "--step-rule", "constant", "--out", str(second)]) == 0
    assert json.loads(second.with_suffix(".json").read_text())["config_echo"]["step_rule"] == "constant"


def test_solve_needs_output_and_one_rule():
    assert main(["solve", "--n", "8"]) == 1
    assert main(["solve", "--n", "8", "--step-rule", "constant", "kaczmarz", "--out", "x.csv"]) == 1


def test_corrupt_problem_file_exits_with_one(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"header": ')
    assert main(["solve", "--problem", str(bad), "--out", str(tmp_path / "o.csv")]) == 1


def test_unknown_log_level_falls_back(monkeypatch, tmp_path):
    monkeypatch.setenv("STAF_LOG_LEVEL", "chatty")
    out = tmp_path / "trace.csv"
    assert main(["trace", "--n", "8", "--m-over-n", "4", "--trials", "1", "--passes", "3",
                 "--init", "truth", "--workers", "1", "--out", str(out)]) == 0
    assert out.exists()
