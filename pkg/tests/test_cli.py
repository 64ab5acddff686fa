import json

import numpy as np
import pytest

from mmdit_edit import cli
from mmdit_edit.io import read_matrix

MODEL = {"depth": 3, "image_grid": [4, 4], "text_len": 8}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(
        json.dumps(
            {
                "model": MODEL,
                "edit": {},
                "source_prompt": "a panda on a bike",
                "target_prompt": "a dragon on a bike",
                "steps": 6,
                "seed": 1,
            }
        )
    )
    return path


def _report(out):
    return json.loads((out / "report.json").read_text())


def test_generate(tmp_path, config):
    assert cli.main(["generate", "--config", str(config), "--out", str(tmp_path / "g")]) == 0
    assert read_matrix(tmp_path / "g" / "latent.bin").shape == (16, 16)
    resolved = json.loads((tmp_path / "g" / "config.resolved.json").read_text())
    assert resolved["model"]["depth"] == 3 and resolved["seed"] == 1


def test_edit_identity_and_flags(tmp_path, config):
    ident = tmp_path / "same.json"
    cfg = json.loads(config.read_text())
    cfg["target_prompt"] = cfg["source_prompt"]
    ident.write_text(json.dumps(cfg))
    assert cli.main(["edit", "--config", str(ident), "--out", str(tmp_path / "i")]) == 0
    assert _report(tmp_path / "i")["identical"] is True

    args = ["edit", "--config", str(config), "--out", str(tmp_path / "e"), "--theta", "0.3", "--tau-frac", "0.5",
            "--replace-mode", "full", "--mask-blocks", "0,2", "--union", "source", "--block-prefix", "2"]
    assert cli.main(args) == 0
    rep = _report(tmp_path / "e")
    assert rep["replaced_steps"] == [0, 1, 2] and rep["identical"] is False
    resolved = json.loads((tmp_path / "e" / "config.resolved.json").read_text())
    assert resolved["edit"]["replace_mode"] == "full_map"
    assert resolved["edit"]["mask_blocks"] == [0, 2]
    assert resolved["edit"]["union_mode"] == "source_only"


def test_edit_reports_are_deterministic(tmp_path, config):
    for name in ("a", "b"):
        assert cli.main(["edit", "--config", str(config), "--out", str(tmp_path / name), "--compare-modes"]) == 0
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()


def test_invert_then_edit_real_reconstructs(tmp_path, config):
    assert cli.main(["invert", "--config", str(config), "--out", str(tmp_path / "inv"), "--gamma", "1"]) == 0
    inv = tmp_path / "inv"
    assert (inv / "trajectory" / "manifest.json").exists()
    args = ["edit-real", "--config", str(config), "--out", str(tmp_path / "er"),
            "--x0", str(inv / "x0.bin"), "--init", str(inv / "init.bin"), "--eta-rev", "1"]
    assert cli.main(args) == 0
    assert _report(tmp_path / "er")["reconstruction_error"] < 1e-8


def test_analyze_attn(tmp_path, config):
    args = ["analyze-attn", "--config", str(config), "--out", str(tmp_path / "an"), "--pca-k", "4", "--dump-quadrants"]
    assert cli.main(args) == 0
    rep = _report(tmp_path / "an")
    assert rep["pca"]["orthonormal"] and rep["pca"]["non_increasing"]
    assert len(list((tmp_path / "an" / "token_maps").glob("token00_block*.pgm"))) == 3
    assert len(list((tmp_path / "an" / "i2t_maps").glob("token00_block*.pgm"))) == 3
    assert len(rep["t2t_diagonality"]) == 6
    assert all(0.0 <= d <= 1.0 for step in rep["t2t_diagonality"] for block in step for d in block)
    assert read_matrix(tmp_path / "an" / "quadrants" / "step_0005" / "block02_t2i.bin").shape == (16, 8)


def test_analyze_attn_depth8_map_count(tmp_path, config):
    cfg = json.loads(config.read_text())
    cfg["model"] = {}
    cfg["steps"] = 2
    config.write_text(json.dumps(cfg))
    assert cli.main(["analyze-attn", "--config", str(config), "--out", str(tmp_path / "an")]) == 0
    for tok in _report(tmp_path / "an")["tokens"]:
        assert len(list((tmp_path / "an" / "token_maps").glob(f"token{tok:02d}_block*.pgm"))) == 8


def test_select_blocks_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["select-blocks", "--out", str(tmp_path / name), "--seed", "4", "--scenes", "8"]) == 0
    for f in ("report.json", "scores.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert len(_report(tmp_path / "a")["smoothed"]["top_k"]) == 5


def test_select_blocks_from_model(tmp_path, config):
    args = ["select-blocks", "--out", str(tmp_path / "m"), "--source", "model", "--config", str(config),
            "--scenes", "2", "--k", "2", "--steps", "2"]
    assert cli.main(args) == 0
    assert _report(tmp_path / "m")["depth"] == 3


def test_bench_attention(tmp_path):
    assert cli.main(["bench-attention", "--out", str(tmp_path / "b"), "--shapes", "16x4x4,8x2x2"]) == 0
    rep = _report(tmp_path / "b")
    assert len(rep["results"]) == 2 and "timing" in rep


def _err(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_usage_errors_exit_2(tmp_path, config, capsys):
    assert cli.main(["bench-attention", "--out", str(tmp_path / "b"), "--shapes", ""]) == 2
    assert _err(capsys)["error"] == "UsageError"
    assert cli.main(["edit", "--out", str(tmp_path)]) == 2
    assert cli.main(["edit", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 2
    assert cli.main(["frobnicate"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {}, "colour": 1}))
    assert cli.main(["generate", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "colour" in _err(capsys)["message"]
    bad.write_text(json.dumps({"model": {"depth": 2, "colour": 1}}))
    assert cli.main(["generate", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert cli.main(["edit", "--config", str(config), "--out", str(tmp_path / "x"), "--tau-frac", "3"]) == 2


def test_runtime_errors_exit_1(tmp_path, config, capsys):
    (tmp_path / "x0.bin").write_bytes(b"\0\0")
    args = ["edit-real", "--config", str(config), "--out", str(tmp_path / "er"),
            "--x0", str(tmp_path / "x0.bin"), "--init", str(tmp_path / "x0.bin")]
    assert cli.main(args) == 1
    assert _err(capsys)["error"]


def test_model_and_edit_sections_from_files(tmp_path):
    (tmp_path / "model.json").write_text(json.dumps(MODEL))
    (tmp_path / "edit.json").write_text(json.dumps({"tau_frac": 0.5}))
    run = tmp_path / "run.json"
    run.write_text(json.dumps({"model": "model.json", "edit": "edit.json", "source_prompt": "a b",
                               "target_prompt": "a c", "steps": 4}))
    assert cli.main(["edit", "--config", str(run), "--out", str(tmp_path / "o")]) == 0
    assert _report(tmp_path / "o")["replaced_steps"] == [0, 1]
