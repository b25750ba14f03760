"""Experiment configuration files (TOML) and their validation.

Layout::

    output_dir = "out"
    repeats = 5
    emit = ["csv", "json_summary", "plot_data"]
    threshold = 0.9
    budget = 220          # optional env-step budget for reaching the threshold

    [scenario]            # ScenarioSpec fields
    [scenario.mutation]   # optional MutationSpec
    [game]                # GameConfig fields
    [game.shaping]        # ShapingFamily
    [offline]             # offline preference generation (loss_kind = "offline")
    [sweep]               # random-instance certificate sweep (check-theorem)
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomlkit
from tomlkit.exceptions import ParseError

from .envs import MutationSpec, ScenarioSpec
from .ranking import ShapingFamily
from .stackelberg import GameConfig

EMIT_KINDS = ("csv", "json_summary", "plot_data")


class ConfigError(ValueError):
    """Raised for unparsable or invalid experiment configs."""


@dataclass
class OfflineSpec:
    n_levels: int = 10
    n_trajectories: int = 1
    shaping_kind: str = "linear"
    shaping_beta: float = 0.0
    temperatures: list | None = None
    seed_offset: int = 1000


@dataclass
class SweepSpec:
    n_instances: int = 100
    max_states: int = 20
    max_actions: int = 4
    gammas: list = field(default_factory=lambda: [0.9, 0.99])
    seed: int = 0


@dataclass
class ExperimentConfig:
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    game: GameConfig = field(default_factory=GameConfig)
    output_dir: str = "out"
    repeats: int = 1
    emit: list = field(default_factory=lambda: list(EMIT_KINDS))
    threshold: float = 0.9
    budget: int | None = None
    offline: OfflineSpec = field(default_factory=OfflineSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)


_TUPLE_FIELDS = {"clamp_range", "goal", "start", "new_goal", "permutation"}
_ACCEPTS = {
    bool: {"bool"},
    int: {"int", "float"},
    float: {"float"},
    str: {"str"},
    list: {"tuple", "list", "ndarray"},
}


def _check_type(f: dataclasses.Field, value, path: str) -> None:
    names = set(re.findall(r"\w+", f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")))
    for py, accepted in _ACCEPTS.items():
        if type(value) is py:
            if not names & accepted:
                want = " or ".join(sorted(names - {"None"})) or "a value"
                raise ConfigError(f"{path}: expected {want}, got {type(value).__name__} {value!r}")
            return


def _build(cls, doc: dict, where: str, nested: dict | None = None):
    nested = nested or {}
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - names
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"{where + '.' if where else ''}{key}: unknown field")
    by_name = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in doc.items():
        path = f"{where}.{key}" if where else key
        if key not in nested:
            _check_type(by_name[key], value, path)
        if key in nested:
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected a section")
            kwargs[key] = nested[key](value, path)
        elif key in _TUPLE_FIELDS and isinstance(value, list):
            kwargs[key] = tuple(value)
        elif key == "perturbation" and value is not None:
            kwargs[key] = np.asarray(value, dtype=float)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def _mutation(doc, where):
    return _build(MutationSpec, doc, where)


def _scenario(doc, where):
    return _build(ScenarioSpec, doc, where, {"mutation": _mutation})


def _shaping(doc, where):
    return _build(ShapingFamily, doc, where)


def _game(doc, where):
    return _build(GameConfig, doc, where, {"shaping": _shaping})


def config_from_dict(doc: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, doc, "", {
        "scenario": _scenario,
        "game": _game,
        "offline": lambda d, w: _build(OfflineSpec, d, w),
        "sweep": lambda d, w: _build(SweepSpec, d, w),
    })
    if int(cfg.repeats) < 1:
        raise ConfigError("repeats: must be >= 1")
    bad = set(cfg.emit) - set(EMIT_KINDS)
    if bad:
        raise ConfigError(f"emit: unknown output kind {sorted(bad)[0]!r}")
    if cfg.budget is not None and cfg.budget < 1:
        raise ConfigError("budget: must be >= 1")
    if not 0 < cfg.threshold <= 1:
        raise ConfigError("threshold: must lie in (0, 1]")
    mut = cfg.scenario.mutation
    if mut is not None and mut.round > cfg.game.rounds:
        raise ConfigError("scenario.mutation.round: must not exceed game.rounds")
    return cfg


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        doc = tomlkit.parse(text).unwrap()
    except ParseError as exc:
        raise ConfigError(f"{source}:{exc.line}:{exc.col}: {exc}") from None
    return config_from_dict(doc)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def _plain(value):
    if dataclasses.is_dataclass(value):
        out = {}
        for f in dataclasses.fields(value):
            v = getattr(value, f.name)
            if v is None:
                continue
            out[f.name] = _plain(v)
        return out
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (tuple, list)):
        return [_plain(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return _plain(cfg)


def dump_config(cfg: ExperimentConfig) -> str:
    doc = config_to_dict(cfg)
    top = {k: v for k, v in doc.items() if not isinstance(v, dict)}
    sections = {k: v for k, v in doc.items() if isinstance(v, dict)}
    out = tomlkit.document()
    for k, v in top.items():
        out[k] = v
    for k, v in sections.items():
        out[k] = v
    return tomlkit.dumps(out)
