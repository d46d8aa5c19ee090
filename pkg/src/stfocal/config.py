"""Experiment configuration: INI-style files with strict key checking.

Three sections. [model] describes the network (a preset name plus any field
overrides), [train] the optimization schedule, [task] the synthetic data.
Every key has a default, unknown sections or keys are rejected by name, and
the fully resolved configuration can be echoed back out as text that parses
to an equal configuration (floats are written with repr, which round-trips).
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass

from .backbone import PRESETS, NetworkConfig
from .data import SyntheticVideoTask
from .tensor import ConfigError
from .train import TrainConfig

_MODEL_KEYS = {
    "preset": "tiny",
    "num_classes": 4,
    "embed_dim": None,           # None: take from preset
    "blocks_per_stage": None,    # None: take from preset
    "focal_levels": 2,
    "base_kernel": 3,
    "kernel_step": 2,
    "fusion": "multiply",
    "variant": "e_parallel",
    "embedding": "patch_1",
    "mlp_ratio": 4.0,
    "drop_path_rate": 0.1,
    "out_drop": 0.0,
    "in_channels": 1,
    "frames": 8,
    "height": 32,
    "width": 32,
    "precision": "float64",
}

_TRAIN_KEYS = {
    "base_lr": 0.01,
    "batch_size": 32,
    "epochs": 20,
    "warmup_epochs": 2,
    "momentum": 0.9,
    "label_smoothing": 0.1,
    "mixup_alpha": 0.8,
    "mixup_prob": 0.5,
    "cutmix_prob": 0.5,
    "flip_prob": 0.5,
    "seed": 0,
}

_TASK_KEYS = {
    "train_clips": 2000,
    "test_clips": 500,
    "object_size": 8,
    "speed": 2,
    "noise_std": 0.05,
    "object_intensity": 1.0,
}

_SECTIONS = {"model": _MODEL_KEYS, "train": _TRAIN_KEYS, "task": _TASK_KEYS}


def _convert(section: str, key: str, raw, default):
    if raw is None:
        return default
    raw = raw.strip()
    try:
        if key == "blocks_per_stage":
            return tuple(int(v) for v in raw.replace(",", " ").split())
        if isinstance(default, int) or (default is None and key == "embed_dim"):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"invalid value {raw!r} for key '{key}' in [{section}]")
    return raw


@dataclass
class ExperimentConfig:
    network: NetworkConfig
    train: TrainConfig
    task: SyntheticVideoTask
    train_clips: int = 2000
    test_clips: int = 500

    @staticmethod
    def from_string(text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}")
        if parser.defaults():
            stray = ", ".join(sorted(parser.defaults()))
            raise ConfigError(f"keys outside any known section: {stray}")

        values = {}
        for section, table in _SECTIONS.items():
            values[section] = {
                key: _convert(section, key, None, default)
                for key, default in table.items()
            }
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown section [{section}]")
            table = _SECTIONS[section]
            for key, raw in parser.items(section):
                if key not in table:
                    raise ConfigError(f"unknown key '{key}' in [{section}]")
                values[section][key] = _convert(section, key, raw, table[key])

        model = values["model"]
        preset = model.pop("preset")
        if preset not in PRESETS:
            known = ", ".join(sorted(PRESETS))
            raise ConfigError(f"unknown preset {preset!r} (known: {known})")
        kwargs = dict(PRESETS[preset])
        for key, val in model.items():
            if val is None:
                continue
            kwargs[key] = val
        network = NetworkConfig(**kwargs)

        train = TrainConfig(**values["train"])

        task_values = dict(values["task"])
        train_clips = task_values.pop("train_clips")
        test_clips = task_values.pop("test_clips")
        if train_clips < 1 or test_clips < 1:
            raise ConfigError("clip counts must be positive")
        task = SyntheticVideoTask(frames=network.frames, height=network.height,
                                  width=network.width, **task_values)
        cfg = ExperimentConfig(network=network, train=train, task=task,
                               train_clips=train_clips, test_clips=test_clips)
        cfg._preset = preset
        return cfg

    @staticmethod
    def from_file(path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return ExperimentConfig.from_string(fh.read())

    def echo(self) -> str:
        """Render the resolved configuration; parsing it back yields an equal
        ExperimentConfig."""
        net, tr, task = self.network, self.train, self.task

        def fmt(v):
            if isinstance(v, tuple):
                return " ".join(str(x) for x in v)
            return repr(v) if isinstance(v, float) else str(v)

        lines = ["[model]"]
        lines.append(f"preset = {getattr(self, '_preset', 'tiny')}")
        for key in _MODEL_KEYS:
            if key == "preset":
                continue
            lines.append(f"{key} = {fmt(getattr(net, key))}")
        lines.append("")
        lines.append("[train]")
        for key in _TRAIN_KEYS:
            lines.append(f"{key} = {fmt(getattr(tr, key))}")
        lines.append("")
        lines.append("[task]")
        lines.append(f"train_clips = {self.train_clips}")
        lines.append(f"test_clips = {self.test_clips}")
        for key in _TASK_KEYS:
            if key in ("train_clips", "test_clips"):
                continue
            lines.append(f"{key} = {fmt(getattr(task, key))}")
        return "\n".join(lines) + "\n"


def default_config() -> ExperimentConfig:
    return ExperimentConfig.from_string("")
