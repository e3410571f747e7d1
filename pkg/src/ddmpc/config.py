"""Flat ``key = value`` configuration files with sections.

Sections map onto config dataclasses::

    [experiment]   ExperimentConfig scalars
    [mpc]          MpcConfig (minus the planner)
    [planner]      the MPC planner's OptimizerOptions
    [pendulum]     PendulumConfig
    [tile]         TileStudyConfig

Every key is optional; missing keys keep their defaults.  Tuples are written as
comma-separated lists.  :func:`dump_config` emits every field so a dumped file
fully pins a run.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .experiment import ExperimentConfig, TileStudyConfig


class ConfigError(ValueError):
    """Bad config text: unknown section or key, unparsable value, failed validation."""


@dataclass(frozen=True)
class RunConfig:
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    tile: TileStudyConfig = field(default_factory=TileStudyConfig)


_NESTED = {"mpc", "pendulum", "planner"}


def _sections(run: RunConfig) -> dict:
    exp = run.experiment
    return {
        "experiment": exp,
        "mpc": exp.mpc,
        "planner": exp.mpc.planner,
        "pendulum": exp.pendulum,
        "tile": run.tile,
    }


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_scalar(text: str, like):
    text = text.strip()
    if isinstance(like, bool):
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def _parse(text: str, like):
    if isinstance(like, tuple):
        parts = [p for p in text.split(",") if p.strip()]
        proto = float if any(isinstance(v, float) for v in like) or not like else int
        return tuple(_parse_scalar(p, proto(0)) for p in parts)
    return _parse_scalar(text, like)


def _apply(obj, items: dict, section: str):
    known = {f.name: f for f in fields(obj) if f.name not in _NESTED}
    changes = {}
    for key, text in items.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        try:
            changes[key] = _parse(text, getattr(obj, key))
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from None
    return changes


def parse_config(text: str) -> RunConfig:
    """Parse config text; raises :class:`ConfigError` on any problem."""
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str  # keep key case
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    base = _sections(RunConfig())
    for name in cp.sections():
        if name not in base:
            raise ConfigError(f"unknown section [{name}]")
    changes = {name: _apply(obj, dict(cp[name]), name) if cp.has_section(name) else {} for name, obj in base.items()}
    try:
        planner = replace(base["planner"], **changes["planner"])
        mpc = replace(base["mpc"], planner=planner, **changes["mpc"])
        pend = replace(base["pendulum"], **changes["pendulum"])
        exp = replace(base["experiment"], mpc=mpc, pendulum=pend, **changes["experiment"])
        tile = replace(base["tile"], **changes["tile"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(exp, tile)


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())


def dump_config(run: RunConfig) -> str:
    """Canonical text listing every field; ``parse_config(dump_config(c)) == c``."""
    out = []
    for name, obj in _sections(run).items():
        out.append(f"[{name}]")
        for f in fields(obj):
            if f.name in _NESTED:
                continue
            out.append(f"{f.name} = {_format(getattr(obj, f.name))}")
        out.append("")
    return "\n".join(out)


def override_experiment(run: RunConfig, **kw) -> RunConfig:
    """Apply CLI overrides (None means keep).  Keys: trials, epsilon, horizon, lam, seed."""
    exp = run.experiment
    mpc_changes = {}
    if kw.get("epsilon") is not None:
        mpc_changes["epsilon"] = kw["epsilon"]
    if kw.get("horizon") is not None:
        mpc_changes["horizon"] = kw["horizon"]
    if kw.get("lam") is not None:
        mpc_changes["control_penalty"] = kw["lam"]
    exp_changes = {}
    if kw.get("trials") is not None:
        exp_changes["trials"] = kw["trials"]
    if kw.get("seed") is not None:
        exp_changes["seed"] = kw["seed"]
    try:
        exp = replace(exp, mpc=replace(exp.mpc, **mpc_changes), **exp_changes)
        tile = replace(run.tile, seed=kw["seed"]) if kw.get("seed") is not None else run.tile
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(exp, tile)
