"""Experiment runner: craft on the surrogate, evaluate on every target.

Each image gets its own random stream derived from ``(seed, image_index)``,
so serial and threaded crafting produce identical perturbations, and
confusion matrices are summed in image order.
"""

from __future__ import annotations

import contextlib
import csv
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np
import torch

from . import attacks
from .config import AttackSpec, ConfigError, ExperimentConfig, SweepSpec, DEFENSE_KNOBS
from .core import AttackResult
from .data import DatasetHandle, gen_shapes_dataset, load_folder_dataset
from .metrics import MetricReport, SegEvaluator
from .models import (
    SegModelHandle,
    ToyNetSpec,
    adversarial_train,
    build_toy_model,
    corrupt_input,
    load_checkpoint,
    load_external_model,
    prune_model,
    save_checkpoint,
    train_toy,
)
from .render import render_overlay

log = logging.getLogger(__name__)

TIMING_COLUMNS = ("wall_time_seconds", "samples_per_second")
CSV_COLUMNS = (
    "experiment_id", "command", "attack", "surrogate", "target", "seed",
    "sweep_param", "sweep_value", "defense", "defense_value", "n_images",
    "benign_miou", "adversarial_miou", "asr", "psnr_db", "posi_ratio", "benign_posi_ratio",
) + TIMING_COLUMNS
TIMING_DISCLAIMER = "samples_per_second depends on the host hardware; compare only within one machine"

AttackFn = Callable[[SegModelHandle, np.ndarray, np.ndarray, np.random.Generator], AttackResult]


@contextlib.contextmanager
def _context(cfg: ExperimentConfig, where: str):
    """Prefix errors with the config file and field that triggered them."""
    try:
        yield
    except ConfigError:
        raise
    except Exception as exc:
        exc.args = (f"{cfg.source or '<config>'}: {where}: {exc}",) + exc.args[1:]
        raise


@contextlib.contextmanager
def single_torch_thread():
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


def image_rng(seed: int, index: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index, *stream]))


# ---------------------------------------------------------------------------
# datasets and models


def resolve_dataset(cfg: ExperimentConfig) -> DatasetHandle:
    d = cfg.dataset
    with _context(cfg, "dataset"):
        kind = d.get("kind", "shapes")
        if kind == "shapes":
            return gen_shapes_dataset(int(d.get("count", 100)), int(d.get("size", 64)),
                                      int(d.get("num_classes", 4)), int(d.get("seed", 0)), split="eval")
        if kind == "folder":
            ds = load_folder_dataset(cfg.resolve(d["root"]), d.get("layout", "voc_style"),
                                     d.get("num_classes"))
            if "count" in d:
                ds = ds.subset(range(min(int(d["count"]), len(ds))))
            return ds
        raise ConfigError("kind must be shapes or folder", cfg.source, "dataset.kind")


def _training_data(cfg: ExperimentConfig, train: dict):
    size = int(train.get("size", cfg.dataset.get("size", 64)))
    classes = int(train.get("num_classes", cfg.dataset.get("num_classes", 4)))
    tr = gen_shapes_dataset(int(train.get("count", 2000)), size, classes, int(train.get("data_seed", 1)),
                            split="train")
    va = gen_shapes_dataset(int(train.get("val_count", 200)), size, classes, int(train.get("val_seed", 2)),
                            split="val")
    return tr, va


def toy_spec(spec: dict, num_classes: int) -> ToyNetSpec:
    base = ToyNetSpec.default(spec.get("variant", "A"), num_classes, int(spec.get("seed", 0)))
    overrides = {k: tuple(int(v) for v in spec[k]) for k in ("widths", "dilations", "strides") if k in spec}
    return replace(base, **overrides)


def resolve_model(cfg: ExperimentConfig, spec: dict, where: str, train_missing: bool = True) -> SegModelHandle:
    """Load, or train and cache, the model described by ``spec``."""
    with _context(cfg, where):
        name = spec.get("name")
        if "external" in spec:
            desc = dict(spec["external"])
            if "path" in desc:
                desc["path"] = str(cfg.resolve(desc["path"]))
            desc.setdefault("name", name)
            return load_external_model(desc)
        ckpt = cfg.resolve(spec["checkpoint"]) if "checkpoint" in spec else None
        if ckpt is not None and ckpt.is_file():
            handle = load_checkpoint(ckpt)
            handle.name = name or handle.name
            return handle
        if "variant" not in spec:
            return load_checkpoint(ckpt)  # raises UnsupportedModel for the missing file
        num_classes = int(cfg.dataset.get("num_classes", 4))
        handle = build_toy_model(toy_spec(spec, num_classes), name=name)
        if "train" in spec and train_missing:
            handle, val = train_model(cfg, handle, spec["train"])
            log.info("trained %s: validation mIoU %.3f", handle.name, val)
            if ckpt is not None:
                save_checkpoint(handle, ckpt)
        return handle


def train_model(cfg: ExperimentConfig, handle: SegModelHandle, train: dict):
    tr, va = _training_data(cfg, train)
    return train_toy(handle, tr, epochs=int(train.get("epochs", 8)),
                     learning_rate=float(train.get("learning_rate", 3e-3)),
                     seed=int(train.get("seed", 0)), batch_size=int(train.get("batch_size", 32)),
                     val_dataset=va)


# ---------------------------------------------------------------------------
# crafting and evaluation


def attack_fn(spec: AttackSpec, check_budget: bool = False) -> AttackFn:
    c = spec.config
    if spec.name == "segtrans":
        return lambda m, x, y, rng: attacks.segtrans_attack(m, x, y, c, rng, check_budget)
    if spec.name == "black_control":
        return lambda m, x, y, rng: attacks.black_image_control(m, x, y, c, rng, check_budget)
    if spec.name == "pgd":
        return lambda m, x, y, rng: attacks.pgd_attack(m, x, y, c.epsilon, c.iterations, c.step_size,
                                                       rng, check_budget)
    if spec.name == "mifgsm":
        return lambda m, x, y, rng: attacks.mi_fgsm_attack(m, x, y, c.epsilon, c.iterations, c.step_size,
                                                           spec.decay, rng, check_budget)
    raise ConfigError(f"unknown attack {spec.name!r}")


@dataclass
class Crafted:
    images: np.ndarray  # N x C x H x W float64
    loss_traces: list[list[float]]
    wall_time_seconds: float

    @property
    def samples_per_second(self) -> float:
        return len(self.images) / self.wall_time_seconds if self.wall_time_seconds > 0 else math.inf


def craft(surrogate: SegModelHandle, dataset: DatasetHandle, attack: AttackFn, seed: int,
          workers: int = 1) -> Crafted:
    """Attack every image on the surrogate; threads share the read-only model."""
    items = list(dataset)

    def one(i):
        x, y = items[i]
        return attack(surrogate, x, y, image_rng(seed, i))

    t0 = time.perf_counter()
    with single_torch_thread():
        if workers == 1:
            results = [one(i) for i in range(len(items))]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(one, range(len(items))))
    wall = time.perf_counter() - t0
    return Crafted(np.stack([r.adversarial_image for r in results]),
                   [r.loss_trace for r in results], wall)


def evaluate(target: SegModelHandle, dataset: DatasetHandle, adv_images: np.ndarray,
             benign_inputs: Optional[np.ndarray] = None,
             adv_inputs: Optional[np.ndarray] = None) -> MetricReport:
    """Score a target on benign and adversarial inputs.

    ``benign_inputs``/``adv_inputs`` default to the clean images and
    ``adv_images``; pass transformed copies (e.g. corrupted) to evaluate a
    defended pipeline. PSNR always compares ``adv_images`` to the clean images.
    """
    xs, ys = dataset.arrays()
    benign_inputs = xs if benign_inputs is None else benign_inputs
    adv_inputs = adv_images if adv_inputs is None else adv_inputs
    pred_b = target.predict(benign_inputs.astype(np.float32))
    pred_a = target.predict(adv_inputs.astype(np.float32))
    ev = SegEvaluator(dataset.num_classes, target.ignore_index)
    for i in range(len(ys)):
        ev.add(ys[i], pred_b[i], pred_a[i], xs[i].astype(np.float64), adv_images[i])
    return ev.report()


def corrupt_all(images: np.ndarray, level: int, seed: int) -> np.ndarray:
    return np.stack([corrupt_input(x, level, image_rng(seed, i, 1, level)) for i, x in enumerate(images)])


# ---------------------------------------------------------------------------
# experiment drivers


class Experiment:
    """Loaded data and models for one config; runs the three protocols."""

    def __init__(self, cfg: ExperimentConfig, command: str = "attack"):
        self.cfg = cfg
        self.command = command
        self.dataset = resolve_dataset(cfg)
        self.surrogate = resolve_model(cfg, cfg.surrogate, "surrogate")
        self.targets = [resolve_model(cfg, t, f"targets[{i}]") for i, t in enumerate(cfg.targets)]
        self.rows: list[dict] = []
        self.traces: list[dict] = []

    def _row(self, target, seed, report: MetricReport, crafted: Crafted, attack: AttackSpec,
             sweep=(None, None), defense=(None, None)) -> dict:
        row = {
            "experiment_id": self.cfg.experiment_id,
            "command": self.command,
            "attack": attack.name,
            "surrogate": self.surrogate.name,
            "target": target.name,
            "seed": seed,
            "sweep_param": sweep[0],
            "sweep_value": sweep[1],
            "defense": defense[0],
            "defense_value": defense[1],
            "n_images": report.n_images,
            "benign_miou": report.benign_miou,
            "adversarial_miou": report.adversarial_miou,
            "asr": report.asr,
            "psnr_db": report.psnr_db,
            "posi_ratio": report.posi_ratio,
            "benign_posi_ratio": report.benign_posi_ratio,
            "per_class_iou": report.per_class_iou,
            "wall_time_seconds": crafted.wall_time_seconds,
            "samples_per_second": crafted.samples_per_second,
        }
        self.rows.append(row)
        return row

    def _craft(self, attack: AttackSpec, seed: int) -> Crafted:
        crafted = craft(self.surrogate, self.dataset, attack_fn(attack), seed, self.cfg.workers)
        if self.cfg.save_loss_traces:
            self.traces.append({"attack": attack.to_dict(), "seed": seed, "traces": crafted.loss_traces})
        return crafted

    def run_attack(self, attack: Optional[AttackSpec] = None, sweep=(None, None)) -> list[dict]:
        attack = attack or self.cfg.attack
        rows = []
        for seed in self.cfg.seeds:
            crafted = self._craft(attack, seed)
            for target in self.targets:
                rows.append(self._row(target, seed, evaluate(target, self.dataset, crafted.images),
                                      crafted, attack, sweep))
            if self.cfg.overlays and seed == self.cfg.seeds[0] and sweep[0] is None:
                self.write_overlays(crafted.images)
        return rows

    def run_sweep(self, sweep: SweepSpec) -> list[dict]:
        if sweep.param in DEFENSE_KNOBS:
            return self.run_defense(DEFENSE_KNOBS[sweep.param], sweep.values, sweep_param=sweep.param)
        rows = []
        for value in sweep.values:
            try:
                attack = self.cfg.attack.with_param(sweep.param, value)
            except (ValueError, TypeError) as exc:
                raise ConfigError(str(exc), self.cfg.source, "sweep.values") from exc
            rows += self.run_attack(attack, sweep=(sweep.param, value))
        return rows

    def run_defense(self, kind: str, values: Iterable, sweep_param: Optional[str] = None) -> list[dict]:
        attack = self.cfg.attack
        defended = {}
        if kind == "adv_train":
            for i, spec in enumerate(self.cfg.targets):
                defended[i] = {v: self._hardened(spec, v, f"targets[{i}]") for v in values}
        rows = []
        for seed in self.cfg.seeds:
            crafted = self._craft(attack, seed)
            xs, _ = self.dataset.arrays()
            for i, target in enumerate(self.targets):
                for v in values:
                    benign_in = adv_in = None
                    model = target
                    if kind == "prune":
                        model = prune_model(target, v)
                    elif kind == "corrupt":
                        benign_in = corrupt_all(xs, int(v), seed)
                        adv_in = corrupt_all(crafted.images, int(v), seed)
                    else:
                        model = defended[i][v]
                    report = evaluate(model, self.dataset, crafted.images, benign_in, adv_in)
                    sweep = (sweep_param, v) if sweep_param else (None, None)
                    row = self._row(target, seed, report, crafted, attack, sweep=sweep, defense=(kind, v))
                    rows.append(row)
        return rows

    def _hardened(self, spec: dict, mix: float, where: str) -> SegModelHandle:
        d = self.cfg.defense
        with _context(self.cfg, where):
            if "train" not in spec or "variant" not in spec:
                raise ConfigError("adversarial training needs a toy target with a train block",
                                  self.cfg.source, where)
            train = spec["train"]
            tr, va = _training_data(self.cfg, train)
            base = build_toy_model(toy_spec(spec, int(self.cfg.dataset.get("num_classes", 4))),
                                   name=spec.get("name"))
            eps = d.epsilon if d else 8 / 255
            epochs = d.epochs if d and d.epochs is not None else int(train.get("epochs", 8))
            handle, _ = adversarial_train(base, tr, epochs=epochs, epsilon=eps, mix_ratio=mix,
                                          learning_rate=float(train.get("learning_rate", 3e-3)),
                                          seed=int(train.get("seed", 0)),
                                          batch_size=int(train.get("batch_size", 32)), val_dataset=va)
            return handle

    def write_overlays(self, adv_images: np.ndarray, count: Optional[int] = None) -> list[Path]:
        count = count if count is not None else self.cfg.overlays
        out = Path(self.cfg.output_dir) / "overlays"
        xs, ys = self.dataset.arrays()
        paths = []
        n = min(count, len(xs))
        for i in range(n):
            p = out / f"{i:04d}_ground_truth.png"
            render_overlay(xs[i], np.where(ys[i] == 255, 0, ys[i]), p)
            paths.append(p)
        for target in [self.surrogate] + self.targets:
            pb = target.predict(xs[:n])
            pa = target.predict(adv_images[:n].astype(np.float32))
            for i in range(n):
                for tag, pred, img in (("benign", pb[i], xs[i]), ("adversarial", pa[i], adv_images[i])):
                    p = out / f"{i:04d}_{target.name}_{tag}.png"
                    render_overlay(img, pred, p)
                    paths.append(p)
        return paths


# ---------------------------------------------------------------------------
# output files


def _clean(v):
    if isinstance(v, float):
        if math.isnan(v):
            return None
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
    if isinstance(v, (np.floating, np.integer)):
        return _clean(v.item())
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, Path):
        return str(v)
    return v


def summarize(rows: list[dict]) -> list[dict]:
    """Mean and standard error over seeds for each (target, sweep, defense) cell."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        key = (r["target"], r["sweep_param"], r["sweep_value"], r["defense"], r["defense_value"])
        groups.setdefault(key, []).append(r)
    out = []
    for (target, sp, sv, dk, dv), rs in groups.items():
        entry = {"target": target, "sweep_param": sp, "sweep_value": sv, "defense": dk,
                 "defense_value": dv, "n_seeds": len(rs)}
        for m in ("benign_miou", "adversarial_miou", "asr"):
            vals = np.array([r[m] for r in rs], dtype=np.float64)
            entry[f"{m}_mean"] = float(vals.mean())
            entry[f"{m}_stderr"] = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
        out.append(entry)
    return out


RESULTS_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "experiment_id", "command", "config", "runs", "summary"],
    "properties": {
        "schema_version": {"const": 1},
        "experiment_id": {"type": "string"},
        "command": {"enum": ["attack", "sweep", "defense"]},
        "config": {"type": "object"},
        "timing_disclaimer": {"type": "string"},
        "runs": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["target", "seed", "metrics", "timing"],
                "properties": {
                    "target": {"type": "string"},
                    "seed": {"type": "integer"},
                    "sweep_param": {"type": ["string", "null"]},
                    "sweep_value": {},
                    "defense": {"type": ["string", "null"]},
                    "defense_value": {},
                    "metrics": {
                        "type": "object",
                        "required": ["benign_miou", "adversarial_miou", "asr", "psnr_db", "posi_ratio",
                                     "per_class_iou", "n_images"],
                        "properties": {
                            "benign_miou": {"type": "number"},
                            "adversarial_miou": {"type": "number"},
                            "asr": {"type": "number"},
                            "psnr_db": {"type": ["number", "string"]},
                            "posi_ratio": {"type": ["number", "null"]},
                            "per_class_iou": {"type": "array", "items": {"type": ["number", "null"]}},
                            "n_images": {"type": "integer"},
                        },
                    },
                    "timing": {
                        "type": "object",
                        "required": list(TIMING_COLUMNS),
                    },
                },
            },
        },
        "summary": {"type": "array", "items": {"type": "object"}},
        "loss_traces": {"type": "array"},
    },
}


def write_results(exp: Experiment, rows: list[dict]) -> Path:
    cfg = exp.cfg
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    metric_keys = ("benign_miou", "adversarial_miou", "asr", "psnr_db", "posi_ratio",
                   "benign_posi_ratio", "per_class_iou", "n_images")
    runs = []
    for r in rows:
        runs.append({
            "target": r["target"], "surrogate": r["surrogate"], "attack": r["attack"], "seed": r["seed"],
            "sweep_param": r["sweep_param"], "sweep_value": r["sweep_value"],
            "defense": r["defense"], "defense_value": r["defense_value"],
            "metrics": {k: r[k] for k in metric_keys},
            "timing": {k: r[k] for k in TIMING_COLUMNS},
        })
    doc = {
        "schema_version": 1,
        "experiment_id": cfg.experiment_id,
        "command": exp.command,
        "config": cfg.echo(),
        "timing_disclaimer": TIMING_DISCLAIMER,
        "runs": runs,
        "summary": summarize(rows),
    }
    if cfg.save_loss_traces:
        doc["loss_traces"] = exp.traces
    (out / "results.json").write_text(json.dumps(_clean(doc), indent=2))

    seeds_dir = out / "seeds"
    seeds_dir.mkdir(exist_ok=True)
    for seed in cfg.seeds:
        per = [run for run in runs if run["seed"] == seed]
        (seeds_dir / f"seed_{seed}.json").write_text(json.dumps(_clean(per), indent=2))

    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r[k] is None else _clean(r[k])) for k in CSV_COLUMNS})

    summary = summarize(rows)
    if summary:
        with open(out / "summary.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(summary[0]))
            w.writeheader()
            for s in summary:
                w.writerow({k: ("" if v is None else v) for k, v in s.items()})
    return out


def run_attack_eval(cfg: ExperimentConfig) -> list[dict]:
    exp = Experiment(cfg, "attack")
    rows = exp.run_attack()
    write_results(exp, rows)
    return rows


def run_sweep(cfg: ExperimentConfig) -> list[dict]:
    if cfg.sweep is None:
        raise ConfigError("sweep section is required", cfg.source, "sweep")
    exp = Experiment(cfg, "sweep")
    rows = exp.run_sweep(cfg.sweep)
    write_results(exp, rows)
    return rows


def run_defense_eval(cfg: ExperimentConfig) -> list[dict]:
    if cfg.defense is None:
        raise ConfigError("defense section is required", cfg.source, "defense")
    exp = Experiment(cfg, "defense")
    rows = exp.run_defense(cfg.defense.kind, cfg.defense.values)
    write_results(exp, rows)
    return rows
