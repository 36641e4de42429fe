"""Run configuration: an INI file with sections, overridable by `--key value` pairs."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .decoder import BeamConfig
from .training import TrainConfig

THREADS_ENV = "SEGMT_THREADS"


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    train_src: str = ""
    train_tgt: str = ""
    valid_src: str = ""
    valid_tgt: str = ""
    artifacts_dir: str = "artifacts"
    checkpoint_dir: str = "checkpoints"


@dataclass
class PreprocessConfig:
    merges: int = 5000
    lexicon_size: int = 5000
    max_seg_len: int = 5


@dataclass
class ModelSection:
    d_model: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    n_heads: int = 2
    d_ff: int = 128
    lstm_dim: int = 64
    max_positions: int = 1024
    seed: int = 0


@dataclass
class TrainingSection(TrainConfig):
    checkpoint_dtype: str = "f4"


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    decoding: BeamConfig = field(default_factory=BeamConfig)

    def sections(self) -> dict[str, object]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(sec) for name, sec in self.sections().items()}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def set(self, key: str, raw: str) -> None:
        """Set `key` (or `section.key`) from its string form."""
        section, _, name = key.rpartition(".")
        name = name.replace("-", "_")
        owners = [s for n, s in self.sections().items()
                  if (not section or n == section) and name in {f.name for f in dataclasses.fields(s)}]
        if not owners:
            raise ConfigError(f"unknown configuration key {key!r}")
        if len(owners) > 1:
            raise ConfigError(f"ambiguous key {key!r}; qualify it as section.{name}")
        target = owners[0]
        fld = next(f for f in dataclasses.fields(target) if f.name == name)
        setattr(target, name, _coerce(raw, fld, getattr(target, name), key))

    def validate(self) -> "RunConfig":
        checks = [
            (self.preprocess.max_seg_len >= 1, "max_seg_len must be >= 1"),
            (self.preprocess.lexicon_size >= 1, "lexicon_size must be >= 1"),
            (self.preprocess.merges >= 0, "merges must be >= 0"),
            (self.decoding.beam >= 1, "beam must be >= 1"),
            (self.training.lr > 0, "lr must be positive"),
            (self.training.batch_chars >= 1, "batch_chars must be >= 1"),
            (self.training.checkpoint_dtype in ("f4", "f8"), "checkpoint_dtype must be f4 or f8"),
            (self.model.d_model % self.model.n_heads == 0, "d_model must be divisible by n_heads"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def write(self, path: str | Path) -> None:
        cp = configparser.ConfigParser()
        for name, sec in self.to_dict().items():
            cp[name] = {k: "" if v is None else str(v) for k, v in sec.items()}
        with open(path, "w", encoding="utf-8") as fh:
            cp.write(fh)


def _coerce(raw: str, fld: dataclasses.Field, current, key: str):
    hint = str(fld.type)
    raw = raw.strip()
    if raw == "" and "None" in hint:
        return None
    try:
        if "bool" in hint or isinstance(current, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint.startswith("int") or (isinstance(current, int) and "float" not in hint):
            return int(raw)
        if "float" in hint:
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None
    return raw


def load_config(path: str | Path | None = None, overrides: Sequence[tuple[str, str]] = ()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        cp = configparser.ConfigParser()
        cp.read(path, encoding="utf-8")
        known = cfg.sections()
        for section in cp.sections():
            if section not in known:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, value in cp[section].items():
                cfg.set(f"{section}.{key}", value)
    for key, value in overrides:
        cfg.set(key, value)
    return cfg


def parse_overrides(args: Sequence[str]) -> list[tuple[str, str]]:
    """['--beam', '3', '--training.lr', '1e-3'] -> [('beam', '3'), ('training.lr', '1e-3')]."""
    out = []
    it = iter(args)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            try:
                value = next(it)
            except StopIteration:
                raise ConfigError(f"missing value for --{key}") from None
        out.append((key, value))
    return out


def apply_thread_env() -> int | None:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1")
    import torch
    torch.set_num_threads(n)
    return n
