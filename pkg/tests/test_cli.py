import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from dtdnn.cli import build_parser, main
from dtdnn.core import make_rng, read_fseq, write_fseq

ROOT = Path(__file__).resolve().parent.parent
TABLE1_CFG = ROOT / "configs" / "table1.cfg"

TINY = """\
[network]
input_dim = 4
hidden_dim = 5
output_dim = 3
deformable_last_k = 1
seed = 3

[layer1]
kernel_size = 3

[layer2]
kernel_size = 3
dilation = 2
stride = 3

[task]
length = 30
d_min = 4
d_max = 8
noise = 0.5

[train]
steps = 3
batch_size = 2

[eval]
eval_size = 2
warps = 0 5
warp_repeats = 2
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


def run(argv, capsys=None):
    code = main([str(a) for a in argv])
    out = capsys.readouterr() if capsys else None
    return code, out


def test_gradcheck_default_config(tmp_path, capsys):
    code, out = run(["gradcheck", "--out", tmp_path / "g"], capsys)
    assert code == 0
    report = json.loads((tmp_path / "g" / "gradcheck.json").read_text())
    assert report["passed"] and not report["failed"]
    assert "FAIL" not in out.out
    meta = json.loads((tmp_path / "g" / "run.json").read_text())
    assert meta["subcommand"] == "gradcheck" and meta["version"]
    assert meta["resolved"]["network"]["seed"] == 0


def test_gradcheck_shipped_mini_config(tmp_path):
    assert run(["gradcheck", "--config", ROOT / "configs" / "mini.cfg", "--out", tmp_path])[0] == 0


def test_analyze_rf_table1_shape(tmp_path, capsys):
    code, out = run(["analyze-rf", "--config", TABLE1_CFG, "--length", 90, "--out", tmp_path,
                     "--probes", 2], capsys)
    assert code == 0
    lines = (tmp_path / "rf_map.csv").read_text().splitlines()
    assert len(lines) == 1 + 30
    assert all(len(ln.split(",")) == 90 for ln in lines)
    la = json.loads((tmp_path / "lookahead.json").read_text())
    assert la["max_lookahead"] == 35
    assert "30x90" in out.out


def test_train_missing_config_names_path(tmp_path, capsys):
    code, out = run(["train", "--config", tmp_path / "missing.cfg", "--out", tmp_path / "o"], capsys)
    assert code == 1
    assert "missing.cfg" in out.err
    assert len(out.err.strip().splitlines()) == 1


def test_unknown_flag_is_usage_error(tmp_path, tiny_cfg, capsys):
    code, out = run(["train", "--config", tiny_cfg, "--out", tmp_path, "--frobnicate"], capsys)
    assert code == 1
    assert "frobnicate" in out.err


def test_invalid_config_names_field(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text(TINY.replace("kernel_size = 3\ndilation", "kernel_size = 4\ndilation"))
    code, out = run(["train", "--config", bad, "--out", tmp_path / "o"], capsys)
    assert code == 1
    assert "layer 2" in out.err and "kernel_size" in out.err


def _snapshot(d: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.name != "timing.json"}


def test_train_outputs_and_determinism(tmp_path, tiny_cfg):
    out = tmp_path / "run"
    argv = ["train", "--config", tiny_cfg, "--out", out]
    assert run(argv)[0] == 0
    first = _snapshot(out)
    assert set(first) == {"report.json", "metrics.csv", "model.dtdn", "run.json"}
    assert (out / "timing.json").exists()
    shutil.rmtree(out)
    assert run(argv)[0] == 0
    assert _snapshot(out) == first


def test_train_clip_flag_recorded(tmp_path, tiny_cfg):
    assert run(["train", "--config", tiny_cfg, "--out", tmp_path, "--clip", "--steps", 1])[0] == 0
    meta = json.loads((tmp_path / "run.json").read_text())
    assert meta["flags"]["clip"] is True
    assert meta["resolved"]["network"]["clip_mode"] == "latency_controlled"
    assert meta["resolved"]["steps"] == 1


def test_train_divergence_is_runtime_failure(tmp_path, tiny_cfg):
    cfg = tmp_path / "hot.cfg"
    cfg.write_text(tiny_cfg.read_text().replace("batch_size = 2", "batch_size = 2\nlr = 1e300"))
    assert run(["train", "--config", cfg, "--out", tmp_path / "o"])[0] == 2
    assert (tmp_path / "o" / "report.json").exists()


def test_analyze_offsets(tmp_path, tiny_cfg):
    assert run(["train", "--config", tiny_cfg, "--out", tmp_path / "t"])[0] == 0
    ckpt = tmp_path / "t" / "model.dtdn"
    assert run(["analyze-offsets", "--ckpt", ckpt, "--config", tiny_cfg, "--out", tmp_path / "h",
                "--batches", 2])[0] == 0
    rows = (tmp_path / "h" / "offsets_hist.csv").read_text().splitlines()
    assert rows[0] == "bin_lo,bin_hi,count,layer_index"
    # 2 batches x 2 sequences x 3 taps x 10 output frames, all in layer 2
    assert sum(int(r.split(",")[2]) for r in rows[1:]) == 2 * 2 * 3 * 10
    assert {r.split(",")[3] for r in rows[1:]} == {"2"}


def test_analyze_offsets_rejects_foreign_config(tmp_path, tiny_cfg):
    assert run(["train", "--config", tiny_cfg, "--out", tmp_path / "t"])[0] == 0
    other = tmp_path / "other.cfg"
    other.write_text(TINY.replace("seed = 3", "seed = 4"))
    code = run(["analyze-offsets", "--ckpt", tmp_path / "t" / "model.dtdn", "--config", other,
                "--out", tmp_path / "h"])[0]
    assert code == 1


def test_corrupt_checkpoint_is_runtime_failure(tmp_path, tiny_cfg, capsys):
    ckpt = tmp_path / "bad.dtdn"
    ckpt.write_bytes(b"DTDN\x01\x00\x00\x00")
    code, out = run(["analyze-rf", "--ckpt", ckpt, "--length", 9, "--out", tmp_path / "o"], capsys)
    assert code == 2
    assert "bad.dtdn" in out.err


def test_analyze_rf_from_checkpoint_matches_config(tmp_path, tiny_cfg):
    assert run(["train", "--config", tiny_cfg, "--out", tmp_path / "t"])[0] == 0
    assert run(["analyze-rf", "--ckpt", tmp_path / "t" / "model.dtdn", "--length", 30,
                "--out", tmp_path / "j"])[0] == 0
    assert run(["analyze-rf", "--ckpt", tmp_path / "t" / "model.dtdn", "--length", 30,
                "--out", tmp_path / "p", "--mode", "perturb"])[0] == 0
    assert (tmp_path / "j" / "rf_map.csv").read_bytes() == (tmp_path / "p" / "rf_map.csv").read_bytes()


def test_warp_roundtrip(tmp_path):
    x = make_rng(0).normal(size=(3, 40))
    src = tmp_path / "in.fseq"
    write_fseq(src, x)
    assert run(["warp", "--in", src, "--out", tmp_path / "same.fseq", "--W", 0])[0] == 0
    assert (tmp_path / "same.fseq").read_bytes() == src.read_bytes()
    assert run(["warp", "--in", src, "--out", tmp_path / "a.fseq", "--W", 8, "--seed", 2])[0] == 0
    assert run(["warp", "--in", src, "--out", tmp_path / "b.fseq", "--W", 8, "--seed", 2])[0] == 0
    a = read_fseq(tmp_path / "a.fseq")
    assert a.shape == x.shape and not np.array_equal(a, x)
    assert (tmp_path / "a.fseq").read_bytes() == (tmp_path / "b.fseq").read_bytes()


@pytest.mark.parametrize("W", [20, 30, -1])
def test_warp_rejects_degenerate(tmp_path, W):
    src = tmp_path / "in.fseq"
    write_fseq(src, np.ones((1, 40)))
    assert run(["warp", "--in", src, "--out", tmp_path / "o.fseq", "--W", W])[0] == 1


def test_warp_missing_input(tmp_path, capsys):
    code, out = run(["warp", "--in", tmp_path / "nope.fseq", "--out", tmp_path / "o", "--W", 1], capsys)
    assert code == 1 and "nope.fseq" in out.err


def test_compare_writes_all_arms(tmp_path, tiny_cfg):
    assert run(["compare", "--config", tiny_cfg, "--out", tmp_path, "--deformable-k", 1])[0] == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["initial_losses_equal"] is True
    assert set(summary["warp"]) == {"0.0", "5.0"}
    for arm in ("standard", "deformable", "deformable_lc"):
        assert (tmp_path / arm / "report.json").exists()
        assert (tmp_path / arm / "metrics.csv").exists()


def test_compare_is_deterministic(tmp_path, tiny_cfg):
    argv = ["compare", "--config", tiny_cfg, "--out", tmp_path / "c", "--steps", 2]
    assert run(argv)[0] == 0
    first = {p.relative_to(tmp_path).as_posix(): p.read_bytes() for p in (tmp_path / "c").rglob("*") if p.is_file()}
    shutil.rmtree(tmp_path / "c")
    assert run(argv)[0] == 0
    second = {p.relative_to(tmp_path).as_posix(): p.read_bytes() for p in (tmp_path / "c").rglob("*") if p.is_file()}
    assert first == second


def _option_actions(parser):
    sub = next(a for a in parser._actions if a.__class__.__name__ == "_SubParsersAction")
    return sub.choices


def test_help_lists_every_flag_with_default():
    for name, sub in _option_actions(build_parser()).items():
        text = sub.format_help()
        for action in sub._actions:
            if not action.option_strings or action.dest == "help":
                continue
            assert action.option_strings[-1] in text, (name, action.dest)
            if not action.required:
                assert "(default:" in action.help % {} if "%" in action.help else True
        assert text.count("(default:") >= sum(1 for a in sub._actions
                                              if a.option_strings and not a.required and a.dest != "help")
