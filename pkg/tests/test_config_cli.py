"""Config parsing, echo fixed point, and the command-line front end."""

import numpy as np
import pytest

from stfocal.cli import main
from stfocal.config import ExperimentConfig, default_config
from stfocal.tensor import ConfigError

MICRO_CONFIG = """\
[model]
frames = 4
drop_path_rate = 0.0

[train]
epochs = 2
warmup_epochs = 1
batch_size = 8
base_lr = 0.8

[task]
train_clips = 16
test_clips = 8
"""


def test_default_config_values():
    cfg = default_config()
    assert cfg.network.embed_dim == 32
    assert cfg.network.blocks_per_stage == (1, 1, 2, 1)
    assert cfg.network.num_classes == 4
    assert cfg.network.in_channels == 1
    assert (cfg.network.frames, cfg.network.height, cfg.network.width) == (8, 32, 32)
    assert cfg.train.epochs == 20
    assert cfg.train.base_lr == 0.01
    assert cfg.train.momentum == 0.9
    assert cfg.task.object_size == 8
    assert cfg.train_clips == 2000 and cfg.test_clips == 500


def test_parse_overrides():
    cfg = ExperimentConfig.from_string(MICRO_CONFIG)
    assert cfg.network.frames == 4
    assert cfg.train.epochs == 2
    assert cfg.train_clips == 16
    assert cfg.task.frames == 4  # task dims follow the model


def test_preset_then_override_precedence():
    cfg = ExperimentConfig.from_string(
        "[model]\npreset = s\nembed_dim = 48\nheight = 224\nwidth = 224\n"
        "frames = 8\nin_channels = 3\nnum_classes = 400\n")
    assert cfg.network.blocks_per_stage == (2, 2, 18, 2)  # from the preset
    assert cfg.network.embed_dim == 48                    # explicit override


def test_unknown_section_and_key_are_named():
    with pytest.raises(ConfigError, match=r"\[optimizer\]"):
        ExperimentConfig.from_string("[optimizer]\nlr = 1\n")
    with pytest.raises(ConfigError, match="learning_rate"):
        ExperimentConfig.from_string("[train]\nlearning_rate = 1\n")
    with pytest.raises(ConfigError, match="stray"):
        ExperimentConfig.from_string("stray = 1\n[train]\nepochs = 2\n")


def test_bad_values_are_config_errors():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_string("[train]\nepochs = many\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_string("[model]\npreset = huge\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_string("[model]\nvariant = f_unknown\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_string("[task]\ntrain_clips = 0\n")


def test_echo_fixed_point():
    for text in ("", MICRO_CONFIG,
                 "[model]\nvariant = d_alternating\nmlp_ratio = 3.5\n"
                 "[train]\nbase_lr = 0.125\nseed = 9\n"):
        cfg = ExperimentConfig.from_string(text)
        echoed = cfg.echo()
        again = ExperimentConfig.from_string(echoed)
        assert again == cfg
        assert again.echo() == echoed


def test_cli_rejects_bad_thread_count(capsys):
    assert main(["flops", "--threads", "0"]) == 2


def test_cli_flops_preset_table(capsys):
    assert main(["flops"]) == 0
    lines = capsys.readouterr().out.strip().split("\n")
    assert lines[0] == "preset,params,flops"
    names = [ln.split(",")[0] for ln in lines[1:]]
    assert names == ["t", "s", "b"]
    params = [int(ln.split(",")[1]) for ln in lines[1:]]
    assert params[0] < params[1] < params[2]


def test_cli_flops_config_table(tmp_path, capsys):
    cfg_path = tmp_path / "c.ini"
    cfg_path.write_text(MICRO_CONFIG)
    assert main(["flops", "--config", str(cfg_path), "--out",
                 str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out
    assert out.startswith("layer,params,flops\n")
    assert (tmp_path / "o" / "costs.csv").read_text() == out


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nheight = 30\n")
    assert main(["flops", "--config", str(bad)]) == 2          # config error
    assert main(["flops", "--config", str(tmp_path / "nope.ini")]) == 3  # I/O
    capsys.readouterr()


def test_cli_train_eval_visualize_round_trip(tmp_path, capsys):
    cfg_path = tmp_path / "c.ini"
    cfg_path.write_text(MICRO_CONFIG)
    out = tmp_path / "run"

    assert main(["train", "--config", str(cfg_path), "--out", str(out),
                 "--seed", "3"]) == 0
    stdout = capsys.readouterr().out
    assert stdout.startswith("test_acc ")
    assert (out / "metrics.log").exists()
    assert (out / "checkpoint.ckpt").exists()
    echoed = ExperimentConfig.from_file(out / "config.ini")
    assert echoed.train.seed == 3  # --seed flag lands in the echo

    data_dir = tmp_path / "clips"
    assert main(["synth", "--config", str(cfg_path), "--out", str(data_dir),
                 "--count", "8", "--seed", "3"]) == 0
    capsys.readouterr()

    assert main(["eval", "--config", str(cfg_path),
                 "--checkpoint", str(out / "checkpoint.ckpt"),
                 "--data", str(data_dir), "--seed", "3"]) == 0
    eval_out = capsys.readouterr().out
    assert eval_out.startswith("top1 ")
    float(eval_out.split()[1])

    clip_file = sorted(data_dir.glob("clip*.t64"))[0]
    maps_dir = tmp_path / "maps"
    assert main(["visualize", "--config", str(cfg_path),
                 "--checkpoint", str(out / "checkpoint.ckpt"),
                 "--clip", str(clip_file), "--out", str(maps_dir)]) == 0
    listed = capsys.readouterr().out.strip().split("\n")
    assert len(listed) == 2 * 4  # spatial + temporal map per frame
    assert all((maps_dir / name.split("/")[-1]).exists() for name in listed)


def test_cli_train_reproducible(tmp_path, capsys):
    cfg_path = tmp_path / "c.ini"
    cfg_path.write_text(MICRO_CONFIG)
    logs = []
    outs = []
    for sub in ("r1", "r2"):
        assert main(["train", "--config", str(cfg_path),
                     "--out", str(tmp_path / sub), "--seed", "11"]) == 0
        outs.append(capsys.readouterr().out)
        logs.append((tmp_path / sub / "metrics.log").read_bytes())
    assert logs[0] == logs[1]
    assert outs[0] == outs[1]


def test_cli_eval_checkpoint_model_mismatch(tmp_path, capsys):
    cfg_path = tmp_path / "c.ini"
    cfg_path.write_text(MICRO_CONFIG)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
    capsys.readouterr()
    other = tmp_path / "other.ini"
    other.write_text(MICRO_CONFIG.replace(
        "frames = 4", "frames = 4\nvariant = a_spatial_avg"))
    data_dir = tmp_path / "clips"
    main(["synth", "--config", str(cfg_path), "--out", str(data_dir),
          "--count", "4"])
    capsys.readouterr()
    code = main(["eval", "--config", str(other),
                 "--checkpoint", str(out / "checkpoint.ckpt"),
                 "--data", str(data_dir)])
    assert code == 2
    capsys.readouterr()
