"""Experiment configuration files.

A config is a YAML document; see ``README.md`` for the full schema. Numbers
may be written as fractions (``8/255``). Relative paths resolve against the
directory holding the config file.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Any, Optional

import yaml

from .core import AttackConfig, FixedSquare, InvalidConfig, RandomRatio

ATTACK_NAMES = ("segtrans", "pgd", "mifgsm", "black_control")
DEFENSE_KINDS = ("prune", "corrupt", "adv_train")
DEFENSE_KNOBS = {"prune_rate": "prune", "corruption_level": "corrupt", "adv_mix_ratio": "adv_train"}
ATTACK_FIELDS = ("epsilon", "iterations", "remap_count", "grid_count", "square_side",
                 "step_size", "update_mode", "loss_scope", "alpha_min", "alpha_max", "decay")
SWEEP_PARAMS = ATTACK_FIELDS + tuple(DEFENSE_KNOBS)
OUT_ENV = "SEGBENCH_OUT"


class ConfigError(InvalidConfig):
    """Invalid experiment configuration, with file and field context."""

    def __init__(self, message: str, source: Optional[Path] = None, field_name: str = ""):
        where = f"{source}" if source else "<config>"
        if field_name:
            where += f": {field_name}"
        super().__init__(f"{where}: {message}")
        self.source = source
        self.field_name = field_name


def parse_number(value, source=None, name="") -> float:
    """Accept ints, floats and fraction strings such as ``"8/255"``."""
    if isinstance(value, bool):
        raise ConfigError(f"expected a number, got {value!r}", source, name)
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        try:
            return float(Fraction(value.replace(" ", "")))
        except (ValueError, ZeroDivisionError):
            pass
    raise ConfigError(f"expected a number, got {value!r}", source, name)


def _int(value, source, name) -> int:
    v = parse_number(value, source, name)
    if v != int(v):
        raise ConfigError(f"expected an integer, got {value!r}", source, name)
    return int(v)


@dataclass(frozen=True)
class AttackSpec:
    name: str = "segtrans"
    config: AttackConfig = field(default_factory=AttackConfig)
    decay: float = 1.0

    def with_param(self, param: str, value) -> "AttackSpec":
        if param == "decay":
            return replace(self, decay=float(value))
        cfg = self.config
        mode = cfg.region_mode
        if param == "square_side":
            return replace(self, config=replace(cfg, region_mode=FixedSquare(int(value))))
        if param in ("alpha_min", "alpha_max"):
            base = mode if isinstance(mode, RandomRatio) else RandomRatio()
            return replace(self, config=replace(cfg, region_mode=replace(base, **{param: float(value)})))
        if param in ("iterations", "remap_count", "grid_count"):
            value = int(value)
        elif param in ("epsilon", "step_size"):
            value = float(value)
        return replace(self, config=replace(cfg, **{param: value}))

    def to_dict(self) -> dict:
        c = self.config
        d = {
            "name": self.name,
            "epsilon": c.epsilon,
            "iterations": c.iterations,
            "step_size": c.step_size,
        }
        if self.name in ("segtrans", "black_control"):
            d.update(remap_count=c.remap_count, grid_count=c.grid_count,
                     update_mode=c.update_mode, loss_scope=c.loss_scope)
            if isinstance(c.region_mode, FixedSquare):
                d.update(region_mode="fixed_square", square_side=c.region_mode.side)
            else:
                d.update(region_mode="random_ratio", alpha_min=c.region_mode.alpha_min,
                         alpha_max=c.region_mode.alpha_max)
        if self.name == "mifgsm":
            d["decay"] = self.decay
        return d


@dataclass(frozen=True)
class DefenseSpec:
    kind: str
    values: tuple
    epsilon: float = 8 / 255
    epochs: Optional[int] = None

    @property
    def knob(self) -> str:
        return {v: k for k, v in DEFENSE_KNOBS.items()}[self.kind]


@dataclass(frozen=True)
class SweepSpec:
    param: str
    values: tuple


@dataclass
class ExperimentConfig:
    experiment_id: str
    dataset: dict
    surrogate: dict
    targets: list[dict]
    attack: AttackSpec
    defense: Optional[DefenseSpec] = None
    sweep: Optional[SweepSpec] = None
    output_dir: Path = Path("runs")
    seeds: tuple[int, ...] = (0,)
    workers: int = 1
    overlays: int = 0
    save_loss_traces: bool = False
    base_dir: Path = Path(".")
    source: Optional[Path] = None
    raw: dict = field(default_factory=dict)

    def resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def echo(self) -> dict:
        """Config as it was read, with the effective seeds and attack."""
        d = dict(self.raw)
        d["seeds"] = list(self.seeds)
        d["attack"] = self.attack.to_dict()
        return d


def parse_attack(d: dict, source=None) -> AttackSpec:
    if not isinstance(d, dict):
        raise ConfigError("must be a mapping", source, "attack")
    name = d.get("name", "segtrans")
    if name not in ATTACK_NAMES:
        raise ConfigError(f"must be one of {ATTACK_NAMES}, got {name!r}", source, "attack.name")
    unknown = set(d) - set(ATTACK_FIELDS) - {"name", "region_mode", "seed"}
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}", source, "attack")
    kw: dict[str, Any] = {}
    for k in ("epsilon", "step_size"):
        if k in d:
            kw[k] = parse_number(d[k], source, f"attack.{k}")
    for k in ("iterations", "remap_count", "grid_count"):
        if k in d:
            kw[k] = _int(d[k], source, f"attack.{k}")
    for k in ("update_mode", "loss_scope"):
        if k in d:
            kw[k] = d[k]
    mode = d.get("region_mode", "fixed_square")
    if mode == "fixed_square":
        kw["region_mode"] = FixedSquare(_int(d.get("square_side", 32), source, "attack.square_side"))
    elif mode == "random_ratio":
        kw["region_mode"] = RandomRatio(parse_number(d.get("alpha_min", 0.1), source, "attack.alpha_min"),
                                        parse_number(d.get("alpha_max", 0.9), source, "attack.alpha_max"))
    else:
        raise ConfigError("must be fixed_square or random_ratio", source, "attack.region_mode")
    try:
        cfg = AttackConfig(**kw)
    except InvalidConfig as exc:
        raise ConfigError(str(exc), source, "attack") from exc
    decay = parse_number(d.get("decay", 1.0), source, "attack.decay")
    return AttackSpec(name=name, config=cfg, decay=decay)


def _parse_defense(d, source) -> Optional[DefenseSpec]:
    if d is None:
        return None
    if not isinstance(d, dict) or d.get("kind") not in DEFENSE_KINDS:
        raise ConfigError(f"kind must be one of {DEFENSE_KINDS}", source, "defense.kind")
    raw = d.get("values")
    if not isinstance(raw, list) or not raw:
        raise ConfigError("must be a non-empty list", source, "defense.values")
    kind = d["kind"]
    if kind == "corrupt":
        values = tuple(_int(v, source, "defense.values") for v in raw)
        if any(v not in range(6) for v in values):
            raise ConfigError("corruption levels must be in 0..5", source, "defense.values")
    else:
        values = tuple(parse_number(v, source, "defense.values") for v in raw)
        hi = 0.9 if kind == "prune" else 1.0
        if any(not 0.0 <= v <= hi for v in values):
            raise ConfigError(f"values must be in [0, {hi}]", source, "defense.values")
    epochs = d.get("epochs")
    return DefenseSpec(
        kind=kind,
        values=values,
        epsilon=parse_number(d.get("epsilon", 8 / 255), source, "defense.epsilon"),
        epochs=None if epochs is None else _int(epochs, source, "defense.epochs"),
    )


def _parse_sweep(d, source) -> Optional[SweepSpec]:
    if d is None:
        return None
    if not isinstance(d, dict) or d.get("param") not in SWEEP_PARAMS:
        raise ConfigError(f"param must be one of {SWEEP_PARAMS}", source, "sweep.param")
    raw = d.get("values")
    if not isinstance(raw, list) or not raw:
        raise ConfigError("must be a non-empty list", source, "sweep.values")
    param = d["param"]
    if param in ("update_mode", "loss_scope"):
        values = tuple(raw)
    elif param in ("iterations", "remap_count", "grid_count", "square_side", "corruption_level"):
        values = tuple(_int(v, source, "sweep.values") for v in raw)
    else:
        values = tuple(parse_number(v, source, "sweep.values") for v in raw)
    return SweepSpec(param=param, values=values)


def _check_model(d, source, name) -> dict:
    if not isinstance(d, dict):
        raise ConfigError("must be a mapping", source, name)
    if not any(k in d for k in ("variant", "checkpoint", "external")):
        raise ConfigError("needs one of variant / checkpoint / external", source, name)
    return d


def parse_config(data: dict, source: Optional[Path] = None, base_dir: Optional[Path] = None) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", source)
    for key in ("dataset", "surrogate"):
        if key not in data:
            raise ConfigError("missing required section", source, key)
    targets = data.get("targets")
    if not isinstance(targets, list) or not targets:
        raise ConfigError("must be a non-empty list of model specs", source, "targets")
    seeds = data.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("must be a non-empty list of integers", source, "seeds")
    base = base_dir or (source.parent if source else Path("."))
    cfg = ExperimentConfig(
        experiment_id=str(data.get("experiment_id", source.stem if source else "experiment")),
        dataset=dict(data["dataset"]),
        surrogate=_check_model(data["surrogate"], source, "surrogate"),
        targets=[_check_model(t, source, f"targets[{i}]") for i, t in enumerate(targets)],
        attack=parse_attack(data.get("attack", {}), source),
        defense=_parse_defense(data.get("defense"), source),
        sweep=_parse_sweep(data.get("sweep"), source),
        seeds=tuple(_int(s, source, "seeds") for s in seeds),
        workers=_int(data.get("workers", 1), source, "workers"),
        overlays=_int(data.get("overlays", 0), source, "overlays"),
        save_loss_traces=bool(data.get("save_loss_traces", False)),
        base_dir=base,
        source=source,
        raw=data,
    )
    cfg.output_dir = cfg.resolve(data.get("output_dir", Path("runs") / cfg.experiment_id))
    if cfg.workers < 1:
        raise ConfigError("must be >= 1", source, "workers")
    return cfg


def load_config(path, seeds=None, out=None, workers=None) -> ExperimentConfig:
    """Read a YAML config and apply command-line / environment overrides.

    Output directory precedence: ``out`` argument, then ``$SEGBENCH_OUT``,
    then the file's ``output_dir``.
    """
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", path) from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}", path) from exc
    cfg = parse_config(data, source=path)
    if seeds:
        cfg.seeds = tuple(int(s) for s in seeds)
    if workers:
        cfg.workers = int(workers)
    env_out = os.environ.get(OUT_ENV)
    if out:
        cfg.output_dir = Path(out)
    elif env_out:
        cfg.output_dir = Path(env_out)
    return cfg
