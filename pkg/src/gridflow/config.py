"""Run configuration: one dataclass tree, resolved as defaults < JSON file < flags."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .dc_opf import DC_EVAL_MODES
from .environment import EnvConfig
from .evaluation import ROLLOUT_COST_MODES
from .gnn import GnnConfig
from .ppo import PpoConfig

SEED_ENV = "GRIDFLOW_SEED"


@dataclass(frozen=True)
class EvalConfig:
    rollouts: int = 100
    eval_horizon: int = 125
    segments: int = 20
    dc_eval: str = "ac"
    rollout_cost: str = "best"
    reference_starts: int = 20

    def __post_init__(self):
        if self.dc_eval not in DC_EVAL_MODES:
            raise ValueError(f"dc_eval must be one of {DC_EVAL_MODES}")
        if self.rollout_cost not in ROLLOUT_COST_MODES:
            raise ValueError(f"rollout_cost must be one of {ROLLOUT_COST_MODES}")
        if self.rollouts < 1 or self.eval_horizon < 1 or self.segments < 1:
            raise ValueError("rollouts, eval_horizon and segments must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    case: str = "ieee30"  # path, or the name of a bundled case
    suite: str | None = None  # path, or the name of a bundled suite
    out: str | None = None
    seed: int = 0
    workers: int = 1
    ppo: PpoConfig = field(default_factory=PpoConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    gnn: GnnConfig = field(default_factory=GnnConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)


SECTIONS = {"ppo": PpoConfig, "env": EnvConfig, "gnn": GnnConfig, "eval": EvalConfig}
TOP_LEVEL = ("case", "suite", "out", "seed", "workers")


def section_of(name: str) -> str | None:
    """Which section a flat field name belongs to (``None`` for top-level fields)."""
    if name in TOP_LEVEL:
        return None
    for sec, cls in SECTIONS.items():
        if name in {f.name for f in dataclasses.fields(cls)}:
            return sec
    raise KeyError(name)


def _merge(raw: dict, overrides: dict) -> dict:
    """Fold flat ``overrides`` (field -> value) into a nested dict."""
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in raw.items()}
    for name, value in overrides.items():
        sec = section_of(name)
        if sec is None:
            out[name] = value
        else:
            out.setdefault(sec, {})[name] = value
    return out


def from_dict(raw: dict) -> RunConfig:
    unknown = set(raw) - set(TOP_LEVEL) - set(SECTIONS)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {k: raw[k] for k in TOP_LEVEL if k in raw}
    for sec, cls in SECTIONS.items():
        body = raw.get(sec, {})
        if not isinstance(body, dict):
            raise ValueError(f"config section {sec!r} must be an object")
        names = {f.name for f in dataclasses.fields(cls)}
        bad = set(body) - names
        if bad:
            raise ValueError(f"unknown keys in {sec!r}: {sorted(bad)}")
        kwargs[sec] = cls(**body)
    cfg = RunConfig(**kwargs)
    # one root seed drives training as well
    return dataclasses.replace(cfg, ppo=dataclasses.replace(cfg.ppo, seed=cfg.seed))


def load_config_file(path) -> dict:
    """A config file, or a ``run_manifest.json`` (its ``config`` entry is used)."""
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ValueError("config file must hold a JSON object")
    if "config" in raw and "versions" in raw:
        raw = raw["config"]
    return raw


def resolve(config_path=None, overrides: dict | None = None, environ=os.environ) -> RunConfig:
    """Precedence: defaults < ``GRIDFLOW_SEED`` < config file < flags (``None`` flags are unset)."""
    raw: dict = {}
    if SEED_ENV in environ:
        try:
            raw["seed"] = int(environ[SEED_ENV])
        except ValueError:
            raise ValueError(f"{SEED_ENV} must be an integer") from None
    if config_path is not None:
        file_raw = load_config_file(config_path)
        raw = {**raw, **file_raw}
    return from_dict(_merge(raw, {k: v for k, v in (overrides or {}).items() if v is not None}))
