"""Experiment configuration: flat TOML keys, each overridable from the command line."""
from __future__ import annotations

import json
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .protocol import LA_LR, METHODS, STRATEGIES, FedConfig
from .synth import SiteSpec, default_4site_config

OUTPUT_ROOT_ENV = "FEDLPPA_OUTPUT_ROOT"


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


@dataclass
class ExperimentConfig:
    seed: int = 0
    sites: object = "default4"  # "default4" or a list of SiteSpec tables
    method: str = "fedlppa"
    strategy: str = "psa"
    rounds: int = 100
    local_iters: int = 10
    batch: int = 12
    base_lr: float = 1e-2
    lam: float = 0.5
    tdf_on: bool = True
    pd_on: bool = True
    la_on: bool = True
    output_dir: str = "runs/default"
    data_dir: str = "data/default4"
    channels_base: int = 4
    depth: int = 4
    eval_every: int = 10
    augment: bool = True
    la_lr: float | None = LA_LR

    # TOML spells the trade-off weight "lambda", a Python keyword
    ALIASES = {"lambda": "lam"}

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.pd_on and not self.tdf_on:
            raise ConfigError("pd_on requires tdf_on")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        try:
            self.fed_config().validate()
            for spec in self.site_specs():
                spec.validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def site_specs(self) -> list[SiteSpec]:
        if self.sites == "default4":
            return default_4site_config()
        if isinstance(self.sites, list):
            return [SiteSpec.from_dict(s) for s in self.sites]
        raise ConfigError(f"sites must be 'default4' or a list of site tables, got {self.sites!r}")

    def fed_config(self) -> FedConfig:
        return FedConfig(method=self.method, strategy=self.strategy, rounds=self.rounds,
                         local_iters=self.local_iters, batch=self.batch, base_lr=self.base_lr,
                         lam=self.lam, tdf=self.tdf_on, pd=self.pd_on, la=self.la_on, seed=self.seed,
                         channels_base=self.channels_base, depth=self.depth,
                         eval_every=self.eval_every, augment=self.augment, la_lr=self.la_lr)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    def resolve(self, path: str) -> Path:
        """Relative paths live under $FEDLPPA_OUTPUT_ROOT when it is set."""
        p = Path(path)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        return p if p.is_absolute() or not root else Path(root) / p


def field_types() -> dict[str, type]:
    return {"seed": int, "rounds": int, "local_iters": int, "batch": int, "channels_base": int,
            "depth": int, "eval_every": int, "base_lr": float, "lam": float, "tdf_on": bool,
            "pd_on": bool, "la_on": bool, "augment": bool, "method": str, "strategy": str,
            "output_dir": str, "data_dir": str, "sites": str, "la_lr": float}


def coerce(key: str, value):
    """Convert a CLI string (or TOML value) to the field's type."""
    kind = field_types()[key]
    if key == "sites" and not isinstance(value, str):
        return value
    if key == "la_lr" and (value is None or str(value).strip().lower() in ("round", "none")):
        return None  # W follows the round learning rate
    if kind is bool:
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(value, bool) and kind is not bool:
        raise ConfigError(f"{key}: expected {kind.__name__}, got a boolean")
    try:
        return kind(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot read {value!r} as {kind.__name__}") from exc


def from_mapping(data: dict, overrides: dict | None = None) -> ExperimentConfig:
    names = {f.name for f in fields(ExperimentConfig)}
    values = {}
    for key, value in {**data, **(overrides or {})}.items():
        key = ExperimentConfig.ALIASES.get(key, key)
        if key not in names:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = coerce(key, value)
    cfg = ExperimentConfig(**values)
    cfg.validate()
    return cfg


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    data = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            data = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return from_mapping(data, overrides)


def save_snapshot(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))


def load_snapshot(path) -> ExperimentConfig:
    return from_mapping(json.loads(Path(path).read_text()))
