import json

import numpy as np
import pytest
import yaml
from conftest import linear_gaussian_case

from seqconsensus.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, main
from seqconsensus.model import serialize_model_config
from seqconsensus.results import RESULT_FILES, checksum, read_jsonl

SMALL_SURVEY = {"scenario": "survey",
                "params": {"nx": 4, "ny": 4, "time_nodes": 3, "cells": [2, 2], "per_cell": 4}}
SMALL_SPACE_TIME = {"scenario": "space_time",
                    "params": {"nx": 4, "ny": 4, "time_nodes": 12, "groups": 3, "obs_per_slice": 8}}


def _yaml(path, doc):
    path.write_text(yaml.safe_dump(doc))
    return str(path)


def _manifest_ok(directory):
    manifest = json.loads((directory / "manifest.json").read_text())
    for entry in manifest["outputs"]:
        assert checksum(directory / entry["path"]) == entry["sha256"]
    return manifest


@pytest.fixture(scope="module")
def survey_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("survey")
    cfg = _yaml(root / "scenario.yaml", SMALL_SURVEY)
    assert main(["simulate", "--config", cfg, "--seed", "1", "--out", str(root / "sim")]) == EXIT_OK
    return root


@pytest.fixture(scope="module")
def space_time_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("st")
    cfg = _yaml(root / "scenario.yaml", SMALL_SPACE_TIME)
    assert main(["simulate", "--config", cfg, "--seed", "2", "--out", str(root / "sim")]) == EXIT_OK
    return root


def test_simulate_writes_both_surveys_and_truth(survey_dir):
    sim = survey_dir / "sim"
    assert {p.name for p in sim.iterdir()} >= {"stratified.csv", "preferential.csv", "lgcp_counts.csv",
                                               "truth.json", "model.yaml", "manifest.json"}
    manifest = _manifest_ok(sim)
    assert manifest["command"] == "simulate" and manifest["seed"] == 1


def test_simulate_is_reproducible(survey_dir, tmp_path):
    cfg = str(survey_dir / "scenario.yaml")
    assert main(["simulate", "--config", cfg, "--seed", "1", "--out", str(tmp_path)]) == EXIT_OK
    for name in ("stratified.csv", "preferential.csv", "lgcp_counts.csv", "truth.json"):
        assert checksum(tmp_path / name) == checksum(survey_dir / "sim" / name)


@pytest.mark.parametrize("text, section", [
    ("scenario: survey\nparams: [1, 2]\n", "params"),
    ("params: {nx: 4}\n", "scenario"),
    ("scenario: survey\nparams: {nx: 2}\n", "params"),
    ("scenario: survey\nscenario: space_time\n", "duplicate"),
    ("scenario: [survey\n", "line"),
])
def test_malformed_config_exits_with_location(tmp_path, capsys, text, section):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text(text)
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert section in capsys.readouterr().err


def test_missing_config_is_io_error(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "absent.yaml"), "--out", str(tmp_path)]) == EXIT_IO


def test_sc_by_likelihood_group_logs_three_steps(survey_dir):
    sim, out = survey_dir / "sim", survey_dir / "sc"
    code = main(["fit", "--config", str(sim / "model.yaml"), "--mode", "sc", "--grid-points", "3",
                 "--data", str(sim / "stratified.csv"), "--data", str(sim / "preferential.csv"),
                 "--data", str(sim / "lgcp_counts.csv"), "--out", str(out)])
    assert code == EXIT_OK
    log = read_jsonl(out / "run_log.jsonl")
    assert [r["step"] for r in log if r["event"] == "step"] == [1, 2, 3]
    assert [r["name"] for r in log if r["event"] == "alpha"] == ["alpha"]
    alpha = read_jsonl(out / "alpha.jsonl")
    assert alpha[0]["name"] == "alpha" and np.isfinite(alpha[0]["point"])
    manifest = _manifest_ok(out)
    assert {"fit", "step_1", "step_2", "step_3"} <= set(manifest["wall_times"])
    assert all(f in {e["path"] for e in manifest["outputs"]} for f in RESULT_FILES)


def _fit(sim, out, mode, *extra):
    return main(["fit", "--config", str(sim / "model.yaml"), "--data", str(sim / "data.csv"),
                 "--mode", mode, "--grid-points", "3", "--out", str(out), *extra])


def test_full_and_scp_fits(space_time_dir):
    sim = space_time_dir / "sim"
    assert _fit(sim, space_time_dir / "full", "full") == EXIT_OK
    assert _fit(sim, space_time_dir / "scp", "scp") == EXIT_OK
    full_effects = read_jsonl(space_time_dir / "full" / "effects.jsonl")
    assert {r["effect"] for r in full_effects} == {"st"} and {r["method"] for r in full_effects} == {"full"}
    log = read_jsonl(space_time_dir / "scp" / "run_log.jsonl")
    phases = [(r["phase"], r["step"]) for r in log if r["event"] == "step"]
    assert phases == [("sc", 1), ("sc", 2), ("sc", 3), ("scp", 1), ("scp", 2), ("scp", 3)]
    assert "first_pass" in _manifest_ok(space_time_dir / "scp")["wall_times"]


def test_fit_outputs_are_byte_identical_across_runs_and_threads(space_time_dir, tmp_path):
    sim = space_time_dir / "sim"
    assert _fit(sim, tmp_path / "a", "sc", "--threads", "1") == EXIT_OK
    assert _fit(sim, tmp_path / "b", "sc", "--threads", "2") == EXIT_OK
    for name in RESULT_FILES:
        assert checksum(tmp_path / "a" / name) == checksum(tmp_path / "b" / name)


def test_compare_with_itself(space_time_dir, tmp_path):
    res = space_time_dir / "full"
    if not res.exists():
        assert _fit(space_time_dir / "sim", res, "full") == EXIT_OK
    assert main(["compare", str(res), str(res), "--out", str(tmp_path)]) == EXIT_OK
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    st = metrics["effects"]["st"]
    assert st["correlation"] == 1.0 and st["rmse"] == 0.0
    assert metrics["speedup"] == 1.0
    _manifest_ok(tmp_path)


def test_compare_conjugate_sc_with_full(tmp_path):
    spec, data, _, _ = linear_gaussian_case(np.random.default_rng(8), n_obs=150, dim=40)
    doc = yaml.safe_load(serialize_model_config(spec))
    doc["partition"] = {"mode": "by_row_blocks", "n_groups": 3}
    (tmp_path / "model.yaml").write_text(yaml.safe_dump(doc))
    data.to_csv(tmp_path / "data.csv", index=False, float_format="%.17g")
    assert _fit(tmp_path, tmp_path / "full", "full") == EXIT_OK
    assert _fit(tmp_path, tmp_path / "sc", "sc", "--correct-prior", "on") == EXIT_OK
    assert main(["compare", str(tmp_path / "full"), str(tmp_path / "sc"), "--out", str(tmp_path / "cmp")]) == 0
    metrics = json.loads((tmp_path / "cmp" / "metrics.json").read_text())
    assert metrics["effects"]["u"]["rmse"] < 1e-8


def test_compare_label_mismatch_is_config_error(space_time_dir, tmp_path):
    res = space_time_dir / "full"
    if not res.exists():
        assert _fit(space_time_dir / "sim", res, "full") == EXIT_OK
    lines = (res / "effects.jsonl").read_text().splitlines(keepends=True)
    a, b = tmp_path / "a", tmp_path / "b"
    for d, keep in ((a, lines), (b, lines[1:])):
        d.mkdir()
        (d / "effects.jsonl").write_text("".join(keep))
    assert main(["compare", str(a), str(b), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_numerical_failure_exit_code(tmp_path):
    doc = {"fixed": ["b0"], "hyper_priors": {},
           "blocks": [{"name": "c", "family": "poisson", "response": "y", "predictor": [{"intercept": "b0"}]}],
           "partition": {"mode": "by_row_blocks", "n_groups": 2}}
    (tmp_path / "model.yaml").write_text(yaml.safe_dump(doc))
    (tmp_path / "data.csv").write_text("y\n1\n2\n0\n-4\n")
    assert _fit(tmp_path, tmp_path / "o", "sc") == EXIT_NUMERIC


def test_bench_writes_rows(tmp_path):
    cfg = _yaml(tmp_path / "scenario.yaml", SMALL_SPACE_TIME)
    assert main(["bench", "--config", cfg, "--seeds", "2", "--grid-points", "3", "--out", str(tmp_path / "b")]) == 0
    rows = read_jsonl(tmp_path / "b" / "bench.jsonl")
    assert [r["seed"] for r in rows] == [0, 1]
    assert all(r["full_time"] > 0 and r["sc_time"] > 0 for r in rows)
