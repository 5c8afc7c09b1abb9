import os

import numpy as np
import pytest

from sami.cli import SCHEMAS, format_config, main, parse_config_text, resolve_config
from sami.errors import ConfigError


def run(*argv):
    return main(list(argv))


def test_no_arguments_prints_usage(capsys):
    assert run() == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_is_exit_1(capsys, tmp_path):
    assert run("pretrain", "--no-such-flag", "--run-dir", str(tmp_path)) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand_is_exit_1():
    assert run("train-everything") == 1


def test_full_mask_ratio_is_config_error(tmp_path, capsys):
    assert run("pretrain", "--mask-ratio", "1.0", "--run-dir", str(tmp_path)) == 1
    assert "mask ratio" in capsys.readouterr().err


def test_help_exits_zero(capsys):
    assert run("segment", "--help") == 0
    assert "--point" in capsys.readouterr().out


# -- configuration ------------------------------------------------------------------------

def test_config_parsing():
    text = "# comment\nsteps = 12   # trailing\n\nmask-ratio=0.5\nloss = cosine\n"
    assert parse_config_text(text) == {"steps": "12", "mask_ratio": "0.5", "loss": "cosine"}
    with pytest.raises(ConfigError):
        parse_config_text("steps 12")


def test_precedence_flags_over_file_over_defaults():
    cfg = resolve_config("pretrain", {"steps": "12", "lr": "0.5"}, {"steps": "7", "loss": None})
    assert cfg["steps"] == 7
    assert cfg["lr"] == 0.5
    assert cfg["loss"] == "mse"
    assert cfg["run_dir"] == os.path.join("runs", "pretrain")


def test_config_rejects_unknown_keys_and_bad_values():
    with pytest.raises(ConfigError):
        resolve_config("pretrain", {"stepz": "3"}, {})
    with pytest.raises(ConfigError):
        resolve_config("pretrain", {"steps": "three"}, {})
    with pytest.raises(ConfigError):
        resolve_config("pretrain", {"normalize_target": "maybe"}, {})
    with pytest.raises(ConfigError):
        resolve_config("pretrain", {"command": "finetune"}, {})


@pytest.mark.parametrize("command", sorted(SCHEMAS))
def test_resolved_config_roundtrips(command):
    cfg = resolve_config(command, {}, {"seed": "5"})
    again = resolve_config(command, parse_config_text(format_config(command, cfg)), {})
    assert again == cfg


def test_bad_config_file_is_exit_1(tmp_path):
    (tmp_path / "c.txt").write_text("steps = lots\n")
    assert run("pretrain", "--config", str(tmp_path / "c.txt"), "--run-dir", str(tmp_path)) == 1
    assert run("pretrain", "--config", str(tmp_path / "missing.txt")) == 1


# -- runs ---------------------------------------------------------------------------------

def test_rerun_from_resolved_config_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("eval-point", "--model", "oracle", "--count", "4", "--clicks", "3", "--seed", "9",
               "--run-dir", str(a), "--log-level", "warning") == 0
    assert run("eval-point", "--config", str(a / "config.resolved"), "--run-dir", str(b)) == 0
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "records.csv").read_bytes() == (b / "records.csv").read_bytes()


def test_gen_data_then_eval_box_from_disk(tmp_path):
    corpus = tmp_path / "corpus"
    assert run("gen-data", "--count", "3", "--split", "test", "--out", str(corpus),
               "--run-dir", str(tmp_path / "g"), "--log-level", "warning") == 0
    assert (corpus / "manifest.csv").exists()
    assert run("eval-box", "--model", "oracle", "--data", str(corpus), "--run-dir", str(tmp_path / "e"),
               "--log-level", "warning") == 0
    metrics = dict(line.split(",") for line in (tmp_path / "e" / "metrics.csv").read_text().split()[1:])
    assert metrics["miou"] == "1.0" and metrics["ap"] == "1.0"
    assert (tmp_path / "e" / "config.resolved").exists()


def test_detection_file_with_unknown_scene_is_exit_1(tmp_path):
    (tmp_path / "d.csv").write_text("scene,r0,c0,r1,c1,score\n77,0,0,4,4,0.9\n")
    assert run("eval-box", "--model", "oracle", "--count", "2", "--detections", str(tmp_path / "d.csv"),
               "--run-dir", str(tmp_path / "e")) == 1


def test_corrupt_checkpoint_is_exit_1(tmp_path):
    (tmp_path / "m.ckpt").write_bytes(b"SAMICKPT" + bytes(64))
    assert run("eval-point", "--model", str(tmp_path / "m.ckpt"), "--count", "1",
               "--run-dir", str(tmp_path / "e")) == 1


def test_invalid_click_count(tmp_path):
    assert run("eval-point", "--model", "oracle", "--clicks", "2", "--run-dir", str(tmp_path)) == 1


@pytest.fixture(scope="module")
def tiny_model(tmp_path_factory):
    d = tmp_path_factory.mktemp("ft")
    assert main(["finetune", "--steps", "2", "--count", "4", "--batch-size", "2", "--run-dir", str(d),
                 "--log-level", "warning"]) == 0
    assert main(["gen-data", "--count", "1", "--split", "test", "--out", str(d / "corpus"),
                 "--run-dir", str(d / "g"), "--log-level", "warning"]) == 0
    return d / "model.ckpt", d / "corpus" / "scene_000000.ppm"


def test_segment_points_box_and_grid(tmp_path, tiny_model):
    model, image = tiny_model
    assert run("segment", "--model", str(model), "--image", str(image), "--point", "10,12",
               "--point", "40,40,bg", "--overlay", str(tmp_path / "o.ppm"), "--run-dir", str(tmp_path / "p")) == 0
    from sami.imageio import load_image, load_mask
    assert load_mask(tmp_path / "p" / "mask.pgm").shape == (64, 64)
    assert load_image(tmp_path / "o.ppm").shape == (64, 64, 3)
    assert run("segment", "--model", str(model), "--image", str(image), "--box", "3,4,30,40",
               "--out", str(tmp_path / "b.pgm"), "--run-dir", str(tmp_path / "b")) == 0
    assert (tmp_path / "b.pgm").exists()
    assert run("segment", "--model", str(model), "--image", str(image), "--grid", "2",
               "--run-dir", str(tmp_path / "g")) == 0
    assert len([f for f in os.listdir(tmp_path / "g") if f.startswith("grid_")]) == 4


@pytest.mark.parametrize("extra", [
    [],
    ["--point", "10,12", "--box", "1,1,5,5"],
    ["--point", "99,1"],
    ["--point", "1,2,maybe"],
    ["--box", "9,9,1,1"],
    ["--box", "1,2,3"],
])
def test_segment_input_errors(tmp_path, tiny_model, extra):
    model, image = tiny_model
    assert run("segment", "--model", str(model), "--image", str(image), *extra, "--run-dir", str(tmp_path)) == 1


def test_grad_check_prints_max_error(tmp_path, capsys):
    assert run("grad-check", "--seed", "7", "--max-coords", "2", "--run-dir", str(tmp_path)) == 0
    out = capsys.readouterr().out
    assert out.startswith("max relative error:")
    assert float(out.split(":")[1]) < 1e-4


def test_bench_param_counts_are_analytic(tmp_path):
    assert run("bench", "--iters", "1", "--warmup", "0", "--count", "2", "--run-dir", str(tmp_path),
               "--log-level", "warning") == 0
    rows = dict(line.split(",") for line in (tmp_path / "metrics.csv").read_text().split()[1:])
    for name in ("s-tiny", "s-small"):
        assert rows[f"{name}.params"] == rows[f"{name}.params_analytic"]
    assert (tmp_path / "bench.csv").exists()


def test_pretrain_writes_loss_csv(tmp_path):
    assert run("pretrain", "--steps", "3", "--count", "4", "--batch-size", "2", "--teacher", "random:1:s-tiny",
               "--run-dir", str(tmp_path), "--log-level", "error") == 0
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,lr,loss" and len(lines) == 4
    assert np.isfinite(float(lines[-1].split(",")[2]))


def test_ablate_with_explicit_values(tmp_path):
    assert run("ablate", "--axis", "mask-ratio", "--values", "0.5,0.85", "--steps", "2", "--count", "4",
               "--batch-size", "2", "--heldout", "2", "--teacher", "random:1:s-tiny",
               "--run-dir", str(tmp_path), "--log-level", "error") == 0
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0].split(",")[:2] == ["axis", "value"]
    assert [ln.split(",")[1] for ln in lines[1:]] == ["0.5", "0.85"]
    assert run("ablate", "--axis", "teacher", "--run-dir", str(tmp_path)) == 1
