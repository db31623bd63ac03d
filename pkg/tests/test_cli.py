import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from flowrestore import nn
from flowrestore.cli import main
from flowrestore.data import load_image, read_manifest
from flowrestore.flow import restore_frame
from flowrestore.train import load_checkpoint

SUBCOMMANDS = ["synth-clean", "gen-data", "train", "restore", "eval", "dump-flow", "inspect", "print-config"]
TINY = ["--levels", "2", "--base-channels", "4", "--prompt-dim", "4", "--crop", "16", "--batch-size", "2"]


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    assert run("synth-clean", "--out-dir", root / "clean", "--clips", 4, "--frames", 3, "--size", 16, "--seed", 2) == 0
    mix = root / "mix.json"
    mix.write_text(json.dumps({"weights": {"blur": 0, "noise": 1, "compression": 0, "weather": 0, "other": 0}}))
    assert run("gen-data", "--clean-dir", root / "clean", "--out-manifest", root / "m.jsonl", "--mix-config", mix, "--seed", 5, "--split", "0.5,0.25,0.25") == 0
    assert run("train", "--manifest", root / "m.jsonl", "--out-dir", root / "run", "--iterations", 3, "--val-every", 2, *TINY) == 0
    return root


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_exits_zero(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        main([cmd, "--help"])
    assert exc.value.code == 0
    assert "usage:" in capsys.readouterr().out


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1


def test_console_script_entry_point():
    out = subprocess.run([sys.executable, "-m", "flowrestore.cli", "inspect"], capture_output=True, text=True)
    assert out.returncode == 0 and "parameters: 255805" in out.stdout


def test_gen_data_empty_dir(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert run("gen-data", "--clean-dir", tmp_path / "empty", "--out-manifest", tmp_path / "m.jsonl") == 3
    assert "no input frames" in capsys.readouterr().err


def test_gen_data_missing_dir(tmp_path):
    assert run("gen-data", "--clean-dir", tmp_path / "nope", "--out-manifest", tmp_path / "m.jsonl") == 2


def test_gen_data_bad_mix_is_config_error(tmp_path, corpus):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"weights": {"blur": 2.0}}))
    assert run("gen-data", "--clean-dir", corpus / "clean", "--out-manifest", tmp_path / "m.jsonl", "--mix-config", bad) == 3


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_gen_data_is_byte_identical(tmp_path, corpus):
    for name in ("a", "b"):
        assert run("gen-data", "--clean-dir", corpus / "clean", "--out-manifest", tmp_path / name / "m.jsonl", "--seed", 8) == 0
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


def test_gen_data_blur_only(tmp_path, corpus):
    mix = tmp_path / "mix.json"
    mix.write_text(json.dumps({"weights": {"blur": 1, "noise": 0, "compression": 0, "weather": 0, "other": 0}}))
    assert run("gen-data", "--clean-dir", corpus / "clean", "--out-manifest", tmp_path / "m.jsonl", "--mix-config", mix) == 0
    m = read_manifest(tmp_path / "m.jsonl")
    kinds = {s["kind"] for c in m.clips for s in c.specs}
    assert kinds <= {"gaussian_blur", "motion_blur"} and kinds


def test_train_outputs(corpus):
    run_dir = corpus / "run"
    for name in ("last.ufr", "best.ufr", "loss_curve.csv", "config.json", "run_config.json"):
        assert (run_dir / name).is_file()
    with open(run_dir / "loss_curve.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iteration", "train_l1", "val_psnr", "val_ssim"] and len(rows) == 4
    assert json.loads((run_dir / "run_config.json").read_text())["arch"]["base_channels"] == 4


def test_train_is_idempotent(corpus, tmp_path):
    assert run("train", "--manifest", corpus / "m.jsonl", "--out-dir", tmp_path, "--iterations", 3, "--val-every", 2, *TINY) == 0
    assert (tmp_path / "last.ufr").read_bytes() == (corpus / "run" / "last.ufr").read_bytes()
    assert (tmp_path / "loss_curve.csv").read_bytes() == (corpus / "run" / "loss_curve.csv").read_bytes()


def test_train_bad_manifest(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text("not json\n")
    assert run("train", "--manifest", p, "--out-dir", tmp_path / "o", "--iterations", 1) == 2


def test_restore_momentum_only_equals_backbone(corpus, tmp_path):
    frame = sorted((corpus / "degraded").rglob("*.ppm"))[0]
    ckpt = corpus / "run" / "last.ufr"
    assert run("restore", "--checkpoint", ckpt, "--out-dir", tmp_path, "--toggles", "momentum-only", "--tdt", 1.0, frame) == 0
    got = load_image(tmp_path / frame.name).data
    state = load_checkpoint(ckpt)
    x = load_image(frame)
    z = nn.prompt_generate(x, state.params, state.arch)
    raw = nn.physics_unet_forward(x, z, state.params, state.arch).data
    expect = np.floor(np.clip(raw, 0, 1) * 255 + 0.5) / 255
    assert np.array_equal(got, expect)


def test_restore_is_reproducible(corpus, tmp_path):
    frame = sorted((corpus / "degraded").rglob("*.ppm"))[1]
    for name in ("a", "b"):
        assert run("restore", "--checkpoint", corpus / "run" / "last.ufr", "--out-dir", tmp_path / name, frame) == 0
    assert (tmp_path / "a" / frame.name).read_bytes() == (tmp_path / "b" / frame.name).read_bytes()
    state = load_checkpoint(corpus / "run" / "last.ufr")
    y, _ = restore_frame(load_image(frame), state.params, state.arch, state.config.solver, state.config.toggles)
    assert np.array_equal(load_image(tmp_path / "a" / frame.name).data, np.floor(np.clip(y.data, 0, 1) * 255 + 0.5) / 255)


def test_restore_missing_checkpoint(tmp_path):
    assert run("restore", "--checkpoint", tmp_path / "none.ufr", "--out-dir", tmp_path, tmp_path / "x.ppm") == 2


def test_restore_bad_toggles_is_config_error(corpus, tmp_path):
    frame = sorted((corpus / "degraded").rglob("*.ppm"))[0]
    assert run("restore", "--checkpoint", corpus / "run" / "last.ufr", "--out-dir", tmp_path, "--toggles", "gravity", frame) == 3
    assert run("restore", "--checkpoint", corpus / "run" / "last.ufr", "--out-dir", tmp_path, "--dt", 0.1, "--tdt", 1, frame) == 3


def test_restore_numerical_failure_exit_code(corpus, tmp_path):
    frame = sorted((corpus / "degraded").rglob("*.ppm"))[0]
    ckpt = tmp_path / "huge.ufr"
    state = load_checkpoint(corpus / "run" / "last.ufr")
    state.params["out.b"].data[...] = 1e306
    from flowrestore.train import save_checkpoint

    save_checkpoint(state, ckpt)
    assert run("restore", "--checkpoint", ckpt, "--out-dir", tmp_path, "--dt", 1e3, frame) == 4


def test_eval_report(corpus, tmp_path):
    out = tmp_path / "report.csv"
    assert run("eval", "--checkpoint", corpus / "run" / "last.ufr", "--manifest", corpus / "m.jsonl", "--out", out) == 0
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["frame_id", "task", "psnr_in", "psnr_out", "ssim_in", "ssim_out"]
    assert len(rows) == 1 + 3 and {r[1] for r in rows[1:]} <= {"gaussian_noise", "salt_pepper"}


def test_dump_flow_emits_six_images(corpus, tmp_path):
    frame = sorted((corpus / "degraded").rglob("*.ppm"))[0]
    clean = corpus / "clean" / frame.parent.name / frame.name
    assert run("dump-flow", "--checkpoint", corpus / "run" / "last.ufr", "--input", frame, "--target", clean, "--out-dir", tmp_path) == 0
    images = sorted(p.name for p in tmp_path.glob("*.ppm"))
    assert images == [f"step_0{i}.ppm" for i in range(6)]
    with open(tmp_path / "trace.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["step"]) for r in rows] == list(range(6)) and all(r["l1_to_gt"] for r in rows)


def test_inspect_reference_config(capsys):
    assert run("inspect") == 0
    out = capsys.readouterr().out
    assert "parameters: 255805" in out


def test_inspect_checkpoint(corpus, capsys):
    assert run("inspect", "--checkpoint", corpus / "run" / "last.ufr", "-v") == 0
    out = capsys.readouterr().out
    assert "enc0.conv1.w" in out and "layer MACs:" in out


def test_print_config_round_trip(tmp_path, capsys):
    assert run("print-config") == 0
    first = capsys.readouterr().out
    (tmp_path / "c.json").write_text(first)
    assert run("print-config", "--config", tmp_path / "c.json") == 0
    assert capsys.readouterr().out == first


def test_print_config_rejects_unknown_keys(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"arch": {"levels": 2, "depth": 9}}))
    assert run("print-config", "--config", tmp_path / "c.json") == 3
    (tmp_path / "d.json").write_text(json.dumps({"optimizer": {}}))
    assert run("print-config", "--config", tmp_path / "d.json") == 3
