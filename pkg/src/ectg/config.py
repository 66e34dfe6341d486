"""Run configuration: defaults, a key = value config-file format, and
command-line overrides."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # paths
    corpus: str = ""
    graph: str = "out/graph.json"
    checkpoint_dir: str = "out"
    output_dir: str = "out"
    # model sizes
    d_model: int = 128
    d_gru: int = 768
    n_heads: int = 4
    max_len: int = 64
    max_utterances: int = 32
    max_src_len: int = 256
    max_gen_len: int = 32
    # objective / graph
    max_concepts: int = 5
    lr: float = 0.001
    r: float = 1.0
    pmi_threshold: float = 0.0
    min_count: int = 2
    min_freq: int = 1
    span_source: str = "gold"  # gold | whole | model
    # training
    batch_size: int = 8
    steps: int = 200
    seed: int = 0
    checkpoint_every: int = 0  # 0 == only at start/end
    # ablations
    no_copy: bool = False
    no_seca: bool = False
    no_graph: bool = False

    def validate(self) -> "RunConfig":
        positive = (
            "d_model", "d_gru", "n_heads", "max_len", "max_utterances",
            "max_src_len", "max_gen_len", "max_concepts", "lr", "batch_size",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.r < 0:
            raise ConfigError(f"r must be >= 0, got {self.r}")
        if self.min_count < 1:
            raise ConfigError(f"min_count must be >= 1, got {self.min_count}")
        if self.min_freq < 1:
            raise ConfigError(f"min_freq must be >= 1, got {self.min_freq}")
        if self.steps < 0 or self.checkpoint_every < 0:
            raise ConfigError("steps and checkpoint_every must be >= 0")
        if self.span_source not in ("gold", "whole", "model"):
            raise ConfigError(f"span_source must be gold|whole|model, got {self.span_source!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        return self

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(name: str, raw: str):
    ftype = _FIELD_TYPES.get(name)
    if ftype is None:
        raise ConfigError(f"unknown config key {name!r}")
    raw = raw.strip()
    if ftype == "bool":
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if ftype == "int":
        return int(raw)
    if ftype == "float":
        return float(raw)
    return raw


def load_config(path) -> RunConfig:
    """Parse a `key = value` config file; '#' starts a comment."""
    text = Path(path).read_text(encoding="utf-8")
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        values[key] = _parse_value(key, raw)
    return replace(RunConfig(), **values).validate()


def apply_overrides(config: RunConfig, overrides: dict) -> RunConfig:
    values = {k: v for k, v in overrides.items() if v is not None}
    for key in values:
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
    return replace(config, **values).validate()
