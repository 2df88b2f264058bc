from __future__ import annotations

import json

import pytest

from reststream.cli import EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_VALIDATION, run
from reststream.config import SCHEMA_VERSION

SMALL = {
    "schema_version": SCHEMA_VERSION,
    "data": {"n_clips": 3, "n_eval_clips": 1, "codec_steps": 30},
    "train": {"steps": 2, "lr": 1e-3, "log_every": 0},
    "model": {"steps": 2},
}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(SMALL))
    common = ["--config", str(cfg), "--run", str(root / "run"), "--log-level", "ERROR"]
    for cmd in ("gen-corpus", "train-codec", "train-teacher", "distill"):
        assert run([cmd, *common]) == EXIT_OK, cmd
    return root, common


def test_pipeline_echoes_resolved_config(run_dir):
    root, _ = run_dir
    echoed = json.loads((root / "run" / "teacher" / "config.json").read_text())
    assert echoed["command"] == "train-teacher"
    assert echoed["train"]["steps"] == 2 and echoed["data"]["n_clips"] == 3
    assert (root / "run" / "students" / "full" / "student.ckpt").exists()


def test_generate_same_seed_identical_outputs(run_dir, capsys):
    root, common = run_dir
    hashes = []
    for out in ("g1", "g2"):
        assert run(["generate", *common, "--seed", "7", "--out", str(root / out)]) == EXIT_OK
        hashes.append(json.loads(capsys.readouterr().out)["latents_sha256"])
    assert hashes[0] == hashes[1]
    assert (root / "g1" / "latents.tnsr").read_bytes() == (root / "g2" / "latents.tnsr").read_bytes()
    assert (root / "g1" / "video.vidf").read_bytes() == (root / "g2" / "video.vidf").read_bytes()
    metrics = json.loads((root / "g1" / "metrics.json").read_text())
    assert {"boundary_discontinuity", "identity_drift", "sync_proxy"} <= set(metrics)


def test_cli_overrides_reach_config(run_dir):
    root, common = run_dir
    out = root / "g3"
    assert run(["generate", *common, "--seed", "3", "--alpha", "2.5", "--out", str(out)]) == EXIT_OK
    echoed = json.loads((out / "config.json").read_text())
    assert echoed["model"]["cfg_alpha"] == 2.5 and echoed["train"]["seed"] == 3


def test_ablate_writes_paired_metrics(run_dir):
    root, common = run_dir
    assert run(["ablate", *common, "--flags", "no_id_sink", "--eval-seeds", "1"]) == EXIT_OK
    res = json.loads((root / "run" / "ablation" / "ablation.json").read_text())
    assert set(res) == {"full", "no_id_sink"}
    assert run(["generate", *common, "--student", "no_id_sink", "--out", str(root / "g4")]) == EXIT_OK
    assert json.loads((root / "g4" / "config.json").read_text())["ablation"]["no_id_sink"] is True


def test_unknown_config_key_is_validation_error(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"schema_version": SCHEMA_VERSION, "train": {"stpes": 3}}))
    assert run(["gen-corpus", "--config", str(bad), "--run", str(tmp_path), "--log-level", "ERROR"]) == EXIT_VALIDATION


def test_bad_flag_and_bad_command():
    assert run(["distill", "--flags", "no_such_flag", "--log-level", "ERROR"]) == EXIT_VALIDATION
    assert run(["fly"]) == EXIT_VALIDATION


def test_missing_artifacts_are_io_errors(tmp_path):
    assert run(["train-teacher", "--run", str(tmp_path / "nothing"), "--log-level", "ERROR"]) == EXIT_IO


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_abort_exit_code(run_dir, tmp_path):
    root, _ = run_dir
    cfg = dict(SMALL, train={"steps": 20, "lr": 1e30, "log_every": 0, "grad_clip": 0})
    path = tmp_path / "nan.json"
    path.write_text(json.dumps(cfg))
    # reuse the corpus and codecs, train a fresh teacher into a separate run dir
    import shutil

    shutil.copytree(root / "run", tmp_path / "run", ignore=shutil.ignore_patterns("teacher", "students"))
    rc = run(["train-teacher", "--config", str(path), "--run", str(tmp_path / "run"), "--log-level", "CRITICAL"])
    assert rc == EXIT_NUMERIC


def test_verify_quick_passes(capsys):
    assert run(["verify", "--quick", "--log-level", "ERROR"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out
