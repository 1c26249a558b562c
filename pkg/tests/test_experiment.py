import csv
import json
import sys

import numpy as np
import pytest
from click.testing import CliRunner

from zofair.cli import main
from zofair.experiment import (
    ConfigError,
    ExperimentConfig,
    Workspace,
    bench_invocations,
    cmd_generate,
    run_generation,
    validate_gradients,
)
from zofair.model import InProcessHandle, LayerSpec, MlpModel, random_mlp, save_model
from zofair.pca import pca
from zofair.schema import AttributeSpec, DatasetSchema, is_discriminatory, load_dataset
from zofair.schema import save_schema, write_instances

SCHEMA = DatasetSchema([AttributeSpec("a", 0, 6), AttributeSpec("r", 0, 2, True),
                        AttributeSpec("g", 0, 1, True), AttributeSpec("b", 0, 6)])


def make_workspace(tmp_path, model=None, **overrides):
    model = model or random_mlp(4, (8, 6), seed=3, scale=2.5)
    rng = np.random.default_rng(3)
    data = np.column_stack([rng.integers(a.min, a.max + 1, 120) for a in SCHEMA.attributes])
    save_model(model, tmp_path / "model.json")
    save_schema(SCHEMA, tmp_path / "schema.json")
    write_instances(tmp_path / "data.csv", data, SCHEMA)
    cfg = {"model": "model.json", "schema": "schema.json", "dataset": "data.csv",
           "global": {"global_num": 30, "cluster_num": 3},
           "local": {"local_num": 15}, "rng_seed": 4, "output_dir": "out"}
    cfg.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def external(tmp_path):
    return [sys.executable, "-m", "zofair.oracle_server", str(tmp_path / "model.json")]


# --- config -------------------------------------------------------------------

@pytest.mark.parametrize("patch, match", [
    ({"colour": 1}, "unknown key.*config.*colour"),
    ({"global": {"step": 2}}, "unknown key.*global"),
    ({"local": {"rng_seed": 3}}, "unknown key.*local"),
    ({"schema": "missing.json"}, "schema path does not exist"),
    ({"precision": "float16"}, "precision"),
    ({"global": {"decay": 2.0}}, "decay"),
    ({"rounds": 0}, "rounds"),
])
def test_config_rejections(tmp_path, patch, match):
    path = make_workspace(tmp_path, **patch)
    with pytest.raises(ConfigError, match=match):
        ExperimentConfig.from_file(path)


def test_model_xor_external(tmp_path):
    path = make_workspace(tmp_path, external_command=["x"])
    with pytest.raises(ConfigError, match="exactly one"):
        ExperimentConfig.from_file(path)


def test_paths_resolve_relative_to_config(tmp_path, monkeypatch):
    path = make_workspace(tmp_path)
    monkeypatch.chdir("/")
    cfg = ExperimentConfig.from_file(path)
    assert cfg.resolve(cfg.dataset) == tmp_path / "data.csv"
    assert "output_dir" not in cfg.to_dict()
    assert "rng_seed" not in cfg.to_dict()["local"]


# --- generation and reports -----------------------------------------------------

@pytest.fixture
def generated(tmp_path):
    cfg = ExperimentConfig.from_file(make_workspace(tmp_path))
    report = cmd_generate(cfg, tmp_path / "out")
    return cfg, report, tmp_path / "out"


def test_report_files_round_trip(generated):
    _, report, out = generated
    merged = json.loads((out / "report.json").read_text())
    merged["timings"] = json.loads((out / "timings.json").read_text())
    assert merged == json.loads(json.dumps(report.to_dict()))
    agg = merged["aggregate"]
    assert agg["total_unique"] == len(report.instances) > 0
    assert merged["verification"] == {"checked": agg["total_unique"], "failed": 0, "passed": True}


def test_instances_reverify(generated):
    cfg, report, out = generated
    rows = load_dataset(out / "instances.csv", SCHEMA)
    assert [tuple(r) for r in rows.tolist()] == report.instances
    handle = InProcessHandle(random_mlp(4, (8, 6), seed=3, scale=2.5))
    assert all(is_discriminatory(handle, r, SCHEMA) is not None for r in rows)
    assert len(load_dataset(out / "global_instances.csv", SCHEMA)) == len(report.global_ids)


def test_rerun_is_byte_identical(generated, tmp_path):
    cfg, _, out = generated
    cmd_generate(cfg, tmp_path / "again")
    for name in ("report.json", "instances.csv", "global_instances.csv", "local_instances.csv"):
        assert (out / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


def test_empty_store_gives_header_only(tmp_path):
    flat = MlpModel([LayerSpec(np.zeros((1, 4)), [1.0], "sigmoid")], 4)
    cfg = ExperimentConfig.from_file(make_workspace(tmp_path, model=flat))
    report = cmd_generate(cfg, tmp_path / "out")
    assert report.instances == []
    assert (tmp_path / "out" / "instances.csv").read_text() == "a,r,g,b\n"
    assert report.results()["aggregate"]["global_success_rate"] == 0.0


def test_rounds_use_consecutive_seeds(tmp_path):
    cfg = ExperimentConfig.from_file(make_workspace(tmp_path, rounds=2))
    ws = Workspace.open(cfg)
    report = run_generation(ws, cfg)
    assert [r["rng_seed"] for r in report.results()["rounds"]] == [4, 5]


# --- gradient validation and PCA --------------------------------------------------

def test_pca_matches_svd():
    x = np.random.default_rng(0).normal(size=(60, 5)) * [5, 3, 1, 0.5, 0.1]
    coords, comps, var = pca(x, 2)
    c = x - x.mean(0)
    _, s, vt = np.linalg.svd(c, full_matrices=False)
    for k in range(2):
        sign = np.sign(comps[k] @ vt[k])
        np.testing.assert_allclose(comps[k], sign * vt[k], atol=1e-10)
        np.testing.assert_allclose(coords[:, k], sign * c @ vt[k], atol=1e-9)
    np.testing.assert_allclose(var, s[:2] ** 2 / (len(x) - 1), rtol=1e-10)


def test_pca_duplicated_population_overlaps():
    a = np.random.default_rng(1).normal(size=(30, 4))
    coords, *_ = pca(np.vstack([a, a]), 2)
    np.testing.assert_allclose(coords[:30], coords[30:], atol=1e-12)


def test_linear_model_similarity_is_one(tmp_path):
    linear = MlpModel([LayerSpec([[0.4, -0.9, 1.5, 0.3]], [-1.0], "sigmoid")], 4)
    cfg = ExperimentConfig.from_file(make_workspace(tmp_path, model=linear))
    ws = Workspace.open(cfg)
    rep = validate_gradients(ws, 1e-6, 50)
    assert rep.gradient_similarity == pytest.approx([1.0] * 50, abs=1e-6)
    assert len(rep.pca_coords["zero_order"]) == 50


def test_bench_counts(tmp_path):
    row = bench_invocations(InProcessHandle(random_mlp(9, (5,), seed=0)), repeats=2)
    assert (row["naive_invocations"], row["vectored_invocations"]) == (10, 2)


# --- CLI --------------------------------------------------------------------------

def test_cli_generate(tmp_path):
    path = make_workspace(tmp_path)
    res = CliRunner().invoke(main, ["generate", "--config", str(path)])
    assert res.exit_code == 0, res.output
    assert "total" in res.output
    assert (tmp_path / "out" / "report.json").exists()


def test_cli_seed_override_changes_echo(tmp_path):
    path = make_workspace(tmp_path)
    res = CliRunner().invoke(main, ["--seed", "11", "--out", str(tmp_path / "o"),
                                    "generate", "--config", str(path)])
    assert res.exit_code == 0, res.output
    assert json.loads((tmp_path / "o" / "report.json").read_text())["config"]["rng_seed"] == 11


def test_cli_external_matches_in_process(tmp_path):
    path = make_workspace(tmp_path)
    doc = json.loads(path.read_text())
    del doc["model"]
    doc["output_dir"] = "ext"
    doc["external_command"] = external(tmp_path)
    ext = tmp_path / "ext.json"
    ext.write_text(json.dumps(doc))
    runner = CliRunner()
    assert runner.invoke(main, ["generate", "--config", str(path)]).exit_code == 0
    res = runner.invoke(main, ["generate", "--config", str(ext)])
    assert res.exit_code == 0, res.output
    assert ((tmp_path / "out" / "instances.csv").read_bytes()
            == (tmp_path / "ext" / "instances.csv").read_bytes())


def test_cli_validate_rejects_external(tmp_path):
    make_workspace(tmp_path)
    doc = {"external_command": external(tmp_path), "schema": "schema.json",
           "dataset": "data.csv"}
    (tmp_path / "e.json").write_text(json.dumps(doc))
    res = CliRunner().invoke(main, ["validate-gradients", "--config", str(tmp_path / "e.json")])
    assert res.exit_code != 0
    assert "in-process" in res.output


def test_cli_validate_writes_files(tmp_path):
    path = make_workspace(tmp_path)
    res = CliRunner().invoke(main, ["validate-gradients", "--config", str(path),
                                    "--samples", "40"])
    assert res.exit_code == 0, res.output
    summary = json.loads((tmp_path / "out" / "validation.json").read_text())
    assert summary["samples"] == 40
    with open(tmp_path / "out" / "pca.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 3 * 40


def test_cli_sweep_tags(tmp_path):
    path = make_workspace(tmp_path)
    res = CliRunner().invoke(main, ["sweep", "--config", str(path), "--h", "1e-3,1"])
    assert res.exit_code == 0, res.output
    for i, h in enumerate([1e-3, 1.0]):
        rep = json.loads((tmp_path / "out" / f"h{i:02d}_{h:g}" / "report.json").read_text())
        assert rep["tag"] == {"index": i, "perturbation_size": h}
        assert rep["config"]["global"]["perturbation_size"] == h
    with open(tmp_path / "out" / "sweep.csv") as fh:
        assert [r["index"] for r in csv.DictReader(fh)] == ["0", "1"]


def test_cli_bench(tmp_path):
    path = make_workspace(tmp_path)
    res = CliRunner().invoke(main, ["bench-invocations", "--config", str(path)])
    assert res.exit_code == 0, res.output
    rows = json.loads((tmp_path / "out" / "bench.json").read_text())["rows"]
    assert [r["n"] for r in rows] == [4, 8, 16, 137]
    assert all(r["naive_invocations"] == r["n"] + 1 for r in rows)


def test_cli_bad_config_is_a_clean_error(tmp_path):
    path = make_workspace(tmp_path, colour=1)
    res = CliRunner().invoke(main, ["generate", "--config", str(path)])
    assert res.exit_code == 1
    assert "Error: unknown key" in res.output
