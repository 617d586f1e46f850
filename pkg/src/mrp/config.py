"""Run configuration: one YAML (or JSON) document plus command-line overrides."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigError, DataError, FormulaError
from .formula import parse_formula
from .frame import FactorSpec, load_factor_specs
from .model import CovariateSpec
from .presets import ELECTION_FACTORS

CONFIG_ENV = "MRP_CONFIG"

_PATH_KEYS = ("frame", "turnout_data", "preference_data", "targets")


@dataclass
class OptimizerOptions:
    max_iter: int = 10_000
    tol: float = 1e-8
    parameterization: str = "noncentered"


@dataclass
class HMCOptions:
    enabled: bool = False
    step_size: float = 0.02
    leapfrog_steps: int = 20
    draws: int = 1000
    warmup: int = 500


@dataclass
class RunConfig:
    factors: list[FactorSpec]
    base_dir: Path = Path(".")
    covariates: dict[str, CovariateSpec] = field(default_factory=dict)
    center_covariates: bool = True
    frame: Path | None = None
    turnout_data: Path | None = None
    preference_data: Path | None = None
    targets: Path | None = None
    output_dir: Path = Path("out")
    turnout_formula: str | None = None
    preference_formula: str | None = None
    optimizer: OptimizerOptions = field(default_factory=OptimizerOptions)
    hmc: HMCOptions = field(default_factory=HMCOptions)
    weighting: str = "voters"
    calibrate_turnout: bool = True
    calibrate_preference: bool = True
    state_factor: str = "state"
    gender_factor: str = "gender"
    male_level: str = "Male"
    female_level: str = "Female"
    aggregates: list[list[str]] = field(default_factory=list)
    seed: int = 0
    synth: dict | None = None
    raw: dict = field(default_factory=dict, repr=False)

    def formula_text(self, kind: str) -> str | None:
        return self.turnout_formula if kind == "turnout" else self.preference_formula

    def data_path(self, kind: str) -> Path | None:
        return self.turnout_data if kind == "turnout" else self.preference_data

    def digest(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, default=str).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def _section(raw, key, cls):
    sub = raw.get(key) or {}
    if not isinstance(sub, Mapping):
        raise ConfigError(f"'{key}' must be a mapping")
    known = set(cls.__dataclass_fields__)
    unknown = set(sub) - known
    if unknown:
        raise ConfigError(f"unknown keys in '{key}': {sorted(unknown)}")
    try:
        return cls(**sub)
    except TypeError as exc:
        raise ConfigError(f"bad '{key}' section: {exc}") from None


def _factors(raw) -> list[FactorSpec]:
    spec = raw.get("factors")
    if spec is None and raw.get("synth"):
        spec = raw["synth"].get("factors")
    if spec is None:
        raise ConfigError("config needs a 'factors' list")
    if spec == "election":
        return list(ELECTION_FACTORS)
    try:
        return load_factor_specs(spec)
    except DataError as exc:
        raise ConfigError(str(exc)) from None


def from_dict(raw: Mapping[str, Any], base_dir: Path | str = ".") -> RunConfig:
    raw = dict(raw)
    base = Path(base_dir)
    known = set(RunConfig.__dataclass_fields__) - {"raw", "base_dir"} | {"calibrate", "gender"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    cfg = RunConfig(factors=_factors(raw), base_dir=base, raw=raw)
    try:
        cfg.covariates = {
            k: CovariateSpec.from_config(k, v) for k, v in (raw.get("covariates") or {}).items()
        }
    except DataError as exc:
        raise ConfigError(str(exc)) from None
    for key in _PATH_KEYS:
        if raw.get(key):
            setattr(cfg, key, base / raw[key])
    cfg.output_dir = base / raw.get("output_dir", "out")
    for key in ("turnout_formula", "preference_formula", "weighting", "state_factor"):
        if key in raw:
            setattr(cfg, key, raw[key])
    cfg.center_covariates = bool(raw.get("center_covariates", True))
    cfg.seed = int(raw.get("seed", 0))
    cfg.optimizer = _section(raw, "optimizer", OptimizerOptions)
    cfg.hmc = _section(raw, "hmc", HMCOptions)
    cal = raw.get("calibrate") or {}
    cfg.calibrate_turnout = bool(cal.get("turnout", True))
    cfg.calibrate_preference = bool(cal.get("preference", True))
    gender = raw.get("gender") or {}
    cfg.gender_factor = gender.get("factor", cfg.gender_factor)
    cfg.male_level = gender.get("male", cfg.male_level)
    cfg.female_level = gender.get("female", cfg.female_level)
    cfg.aggregates = [list(a) for a in raw.get("aggregates", [])]
    cfg.synth = raw.get("synth")
    return cfg


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        path = os.environ.get(CONFIG_ENV)
    if not path:
        raise ConfigError(f"no config given (use --config or set {CONFIG_ENV})")
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None
    if not isinstance(raw, Mapping):
        raise ConfigError("config document must be a mapping")
    return from_dict(raw, path.parent)


def validate(cfg: RunConfig, need_inputs=True) -> dict:
    """Parse formulas and confirm referenced inputs exist.  Returns parsed formulas."""
    if cfg.weighting not in ("population", "voters"):
        raise ConfigError(f"weighting must be 'population' or 'voters', not {cfg.weighting!r}")
    if cfg.optimizer.parameterization not in ("noncentered", "centered"):
        raise ConfigError("optimizer.parameterization must be 'noncentered' or 'centered'")
    formulas = {}
    for kind in ("turnout", "preference"):
        text = cfg.formula_text(kind)
        if text:
            try:
                formulas[kind] = parse_formula(text)
            except FormulaError as exc:
                raise ConfigError(f"{kind}_formula: {exc}") from None
    if need_inputs:
        for key in _PATH_KEYS:
            p = getattr(cfg, key)
            if p is not None and not p.exists():
                raise ConfigError(f"{key} file {p} does not exist")
    return formulas
