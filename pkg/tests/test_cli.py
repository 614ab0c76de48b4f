import os
import subprocess
import sys

import numpy as np
import pytest

from pipeline import TINY_CONFIG, artifacts, run, run_pipeline
from relevance_forge.config import SEED_ENV, keys_for
from relevance_forge.dataset import read_manifest
from relevance_forge.nn.models import load_params, save_params
from relevance_forge.volume import Volume, read_volume, write_volume


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)


@pytest.fixture(scope="module")
def pipeline_root(tmp_path_factory):
    saved = os.environ.pop(SEED_ENV, None)
    try:
        yield run_pipeline(tmp_path_factory.mktemp("cli") / "run")
    finally:
        if saved is not None:
            os.environ[SEED_ENV] = saved


def test_pipeline_outputs(pipeline_root):
    data = pipeline_root / "data"
    rows = read_manifest(data)
    assert len(rows) == 30
    assert {r.split for r in rows} == {"train", "val", "test"}
    assert (pipeline_root / "clf" / "classifier.rnet").is_file()
    assert (pipeline_root / "clf" / "classifier_metrics.tsv").read_text().startswith("epoch\ttrain_loss")
    meta = (pipeline_root / "gen" / "run_metadata.txt").read_text()
    assert "gen_lr=0.01" in meta
    steps = (pipeline_root / "gen" / "generator_steps.tsv").read_text().splitlines()
    assert steps[0] == "step\ty_np\ty_p\tperturbation\tl1\tindecisive\ttotal"
    report = (pipeline_root / "eval" / "report.tsv").read_text().splitlines()
    assert report[0].startswith("case_id\tmethod\tdsc_optimal\tk_star\tdsc_rank_0")
    assert sum(line.startswith("MEAN\t") for line in report) == 2
    rel = list((pipeline_root / "rel").glob("*.ranks.rvol"))
    assert len(rel) == 1
    ranks = read_volume(rel[0]).voxels
    assert ranks.min() == 0 and ranks.max() <= 9
    assert list((pipeline_root / "slices").glob("*.pgm"))
    for sub in ("data", "clf", "gen", "rel", "eval"):
        assert (pipeline_root / sub / "config.resolved").is_file()


def test_seed_override_changes_data(tmp_path, monkeypatch, pipeline_root):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(TINY_CONFIG)
    monkeypatch.setenv(SEED_ENV, "5")
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "d") == 0
    assert "seed=5" in (tmp_path / "d" / "config.resolved").read_text()
    base = artifacts(pipeline_root / "data")
    other = artifacts(tmp_path / "d")
    assert base["case_0000.rvol"] != other["case_0000.rvol"]


def test_missing_generator_exits_3_without_report(tmp_path, pipeline_root, capsys):
    code = run(
        "evaluate", "--data", pipeline_root / "data", "--generator", tmp_path / "absent.rnet",
        "--classifier", pipeline_root / "clf" / "classifier.rnet", "--out", tmp_path / "ev",
    )
    assert code == 3
    assert "error[missing-input]" in capsys.readouterr().err
    assert not (tmp_path / "ev" / "report.tsv").exists()


def test_wrong_parameter_file_kind_exits_4(tmp_path, pipeline_root):
    code = run(
        "relevance", "--generator", pipeline_root / "clf" / "classifier.rnet",
        "--case", pipeline_root / "data" / "case_0000.rvol", "--out", tmp_path / "r",
    )
    assert code == 4


def test_config_errors_exit_2(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("no_such_key=1\n")
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "d") == 2
    cfg.write_text("count=abc\n")
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "d") == 2


def test_missing_config_exits_3(tmp_path):
    assert run("gen-data", "--config", tmp_path / "absent.cfg", "--out", tmp_path / "d") == 3


def test_usage_errors_exit_1(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("gen-data")
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        run("frobnicate", "--out", tmp_path)
    assert exc.value.code == 1
    assert run("gen-data", "--out", tmp_path / "d", "--workers", "0") == 1
    assert run("export-slices", "--input", tmp_path / "absent.rvol", "--out", tmp_path / "s") == 3


def test_truncated_volume_exits_4(tmp_path, pipeline_root):
    raw = (pipeline_root / "data" / "case_0000.rvol").read_bytes()
    (tmp_path / "cut.rvol").write_bytes(raw[:-8])
    assert run("export-slices", "--input", tmp_path / "cut.rvol", "--out", tmp_path / "s") == 4


def test_degenerate_relevance_exits_6(tmp_path, pipeline_root):
    gen = load_params(pipeline_root / "gen" / "generator.rnet")
    gen.params["out.w"].data[:] = 0.0
    save_params(gen, tmp_path / "flat.rnet")
    write_volume(Volume(np.zeros((2, 16, 16, 16), dtype=np.float32)), tmp_path / "zero.rvol")
    cfg = tmp_path / "c.cfg"
    cfg.write_text("slic_k=8\n")
    code = run("relevance", "--config", cfg, "--generator", tmp_path / "flat.rnet", "--case", tmp_path / "zero.rvol", "--out", tmp_path / "r")
    assert code == 6


@pytest.mark.parametrize("command", ["gen-data", "train-classifier", "train-generator", "relevance", "evaluate"])
def test_help_lists_config_keys_and_exit_codes(command):
    proc = subprocess.run(
        [sys.executable, "-m", "relevance_forge.cli", command, "--help"], capture_output=True, text=True, check=True
    )
    for key in keys_for(command):
        assert key.name in proc.stdout
    assert "exit codes" in proc.stdout and SEED_ENV in proc.stdout
