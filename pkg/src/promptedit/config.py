"""Run configuration: one JSON file with lm/encoder/train sections.

Command-line flags override file values, which override dataclass defaults.
Cross-field constraints (prompt width vs LM width) are validated here so
every command fails fast on an inconsistent setup.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .encoder import EncoderConfig
from .lm import LmConfig
from .training import TrainConfig


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    lm: LmConfig = field(default_factory=LmConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    pretrain_steps: int = 3000

    def validate(self) -> "RunConfig":
        if self.encoder.d_llm != self.lm.d_llm:
            raise ConfigError(f"encoder d_llm {self.encoder.d_llm} must equal LM d_llm {self.lm.d_llm}")
        if self.pretrain_steps < 0 or self.seed < 0:
            raise ConfigError("seed and pretrain_steps must be non-negative")
        return self


def _apply_section(cls, defaults, section: dict, name: str):
    if not isinstance(section, dict):
        raise ConfigError(f"section {name!r} must be an object")
    values = {f: getattr(defaults, f) for f in defaults.__dataclass_fields__}
    for key, val in section.items():
        if key not in values:
            raise ConfigError(f"unknown key {name}.{key}")
        values[key] = val
    try:
        return cls(**values)
    except ValueError as e:
        raise ConfigError(f"invalid {name} config: {e}") from e


def load_run_config(path: str | Path | None) -> RunConfig:
    """RunConfig from a JSON file; None means all defaults."""
    cfg = RunConfig()
    if path is None:
        return cfg.validate()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    known = {"lm", "encoder", "train", "seed", "pretrain_steps"}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
    if "lm" in raw:
        cfg.lm = _apply_section(LmConfig, cfg.lm, raw["lm"], "lm")
    if "encoder" in raw:
        cfg.encoder = _apply_section(EncoderConfig, cfg.encoder, raw["encoder"], "encoder")
    if "train" in raw:
        cfg.train = _apply_section(TrainConfig, cfg.train, raw["train"], "train")
    if "seed" in raw:
        cfg.seed = int(raw["seed"])
    if "pretrain_steps" in raw:
        cfg.pretrain_steps = int(raw["pretrain_steps"])
    return cfg.validate()
