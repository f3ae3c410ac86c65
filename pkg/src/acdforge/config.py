"""Sectioned key=value pipeline configuration.

One file drives every CLI stage.  Sections map one-to-one onto the
stage dataclasses, unknown sections or keys are rejected loudly, and
printing a parsed config reproduces the parse input exactly, so runs
can log their resolved configuration verbatim.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, replace

from .errors import ConfigError, SpecError
from .pruning import DistillConfig, PruneConfig
from .training import TrainConfig


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/out"


@dataclass
class ModelConfig:
    i_len: int = 30225
    sr: int = 20000
    n_cls: int = 50
    base_width: int = 8


@dataclass
class DataConfig:
    kind: str = "synthetic"          # synthetic | csv
    csv_path: str = ""
    clips_per_class: int = 30
    clip_len: int = 0                # 0: one second at the model rate
    test_fold: int = 5


@dataclass
class PipelineConfig:
    run: RunConfig
    model: ModelConfig
    data: DataConfig
    train: TrainConfig
    prune: PruneConfig
    distill: DistillConfig

    def validate(self):
        if self.data.kind not in ("synthetic", "csv"):
            raise ConfigError(f"data.kind {self.data.kind!r} must be "
                              "'synthetic' or 'csv'")
        if self.data.kind == "csv" and not self.data.csv_path:
            raise ConfigError("data.kind 'csv' needs data.csv_path")
        for name in ("i_len", "sr", "n_cls", "base_width"):
            if getattr(self.model, name) <= 0:
                raise ConfigError(f"model.{name} must be positive")
        try:
            self.prune.validate()
            self.distill.validate()
        except SpecError as exc:
            raise ConfigError(str(exc)) from None
        return self


def default_config():
    return PipelineConfig(run=RunConfig(), model=ModelConfig(),
                          data=DataConfig(), train=TrainConfig(),
                          prune=PruneConfig(), distill=DistillConfig())


def _parse_bool(s):
    low = s.strip().lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_schedule(s):
    s = s.strip()
    if not s:
        return ()
    try:
        return tuple(int(v) for v in s.split(","))
    except ValueError:
        raise ConfigError(f"schedule must be comma-separated integers, "
                          f"got {s!r}") from None


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


# section -> (attribute, {key: converter})
_SCHEMA = {
    "run": ("run", {"seed": int, "out_dir": str}),
    "model": ("model", {"i_len": int, "sr": int, "n_cls": int,
                        "base_width": int}),
    "data": ("data", {"kind": str, "csv_path": str, "clips_per_class": int,
                      "clip_len": int, "test_fold": int}),
    "train": ("train", {"epochs": int, "lr0": float,
                        "schedule": _parse_schedule, "warmup_epochs": int,
                        "warmup_factor": float, "momentum": float,
                        "weight_decay": float, "batch_size": int,
                        "seed": int}),
    "prune": ("prune", {"method": str, "prune_sfeb": _parse_bool,
                        "target_channel_fraction": float,
                        "finetune_epochs_per_step": int,
                        "sparsify_fraction": float, "retrain_mode": str,
                        "calib_batches": int, "calib_batch_size": int}),
    "distill": ("distill", {"loss_variant": str, "temperature": float,
                            "alpha": float}),
}


def parse_config(text):
    """Parse sectioned key=value text into a PipelineConfig."""
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None

    cfg = default_config()
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        attr, keys = _SCHEMA[section]
        target = getattr(cfg, attr)
        updates = {}
        for key, raw in cp.items(section):
            if key not in keys:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            conv = keys[key]
            try:
                updates[key] = conv(raw)
            except ConfigError:
                raise
            except ValueError:
                raise ConfigError(f"[{section}] {key}: cannot parse "
                                  f"{raw!r}") from None
        setattr(cfg, attr, replace(target, **updates))
    return cfg.validate()


def config_to_text(cfg):
    """Render a PipelineConfig; parse_config inverts this exactly."""
    lines = []
    for section, (attr, keys) in _SCHEMA.items():
        lines.append(f"[{section}]")
        target = getattr(cfg, attr)
        for key in keys:
            lines.append(f"{key} = {_fmt(getattr(target, key))}")
        lines.append("")
    return "\n".join(lines)


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())


def save_config(path, cfg):
    with open(path, "w") as fh:
        fh.write(config_to_text(cfg))
    return path
