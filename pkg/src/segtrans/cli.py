"""Command-line entry point: ``segtrans <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 model error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, load_config
from .core import InvalidConfig, ModelGradientUnavailable
from .data import (
    InvalidParams,
    LabelValueOutOfRange,
    MissingPair,
    UnreadableFile,
    export_folder_dataset,
    gen_shapes_dataset,
)
from .models import DivergedTraining, InvalidSpec, UnsupportedModel, build_toy_model, save_checkpoint
from .runner import (
    Experiment,
    attack_fn,
    craft,
    run_attack_eval,
    run_defense_eval,
    run_sweep,
    summarize,
    toy_spec,
    train_model,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_MODEL = 0, 2, 3, 4

DATA_ERRORS = (InvalidParams, MissingPair, UnreadableFile, LabelValueOutOfRange)
MODEL_ERRORS = (UnsupportedModel, ModelGradientUnavailable, InvalidSpec, DivergedTraining)

def _experiment_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, type=Path, help="experiment YAML file")
    p.add_argument("--seed", type=int, action="append", help="override the seed list (repeatable)")
    p.add_argument("--out", type=Path, help="output directory (beats $SEGBENCH_OUT and the config)")
    p.add_argument("--workers", type=int, help="threads used to craft adversarial examples")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segtrans", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic shapes dataset as PNG folders")
    g.add_argument("--config", type=Path, help="take count/size/seed from the config's dataset section")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--num-classes", type=int, default=4)
    g.add_argument("--seed", type=int, action="append", help="dataset seed (first value is used)")

    t = sub.add_parser("train", help="train toy models listed in a config and save their checkpoints")
    _experiment_args(t)
    t.add_argument("--force", action="store_true", help="retrain even when the checkpoint exists")

    for name, text in (("attack", "craft on the surrogate and evaluate every target"),
                       ("sweep", "repeat the attack over one parameter's values"),
                       ("defense", "evaluate targets under pruning, input corruption or adversarial training")):
        _experiment_args(sub.add_parser(name, help=text))

    r = sub.add_parser("render", help="write benign/adversarial overlay PNGs for the first images")
    _experiment_args(r)
    r.add_argument("--count", type=int, default=4)
    return parser


def _cmd_gen_data(args) -> int:
    count, size, classes = args.count, args.size, args.num_classes
    seed = args.seed[0] if args.seed else 0
    if args.config:
        d = load_config(args.config).dataset
        count, size = int(d.get("count", count)), int(d.get("size", size))
        classes, seed = int(d.get("num_classes", classes)), int(d.get("seed", seed))
    ds = gen_shapes_dataset(count, size, classes, seed)
    root = export_folder_dataset(ds, args.out)
    print(f"wrote {len(ds)} image/label pairs to {root}")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed, args.out, args.workers)
    for where, spec in [("surrogate", cfg.surrogate)] + [(f"targets[{i}]", t) for i, t in enumerate(cfg.targets)]:
        if "train" not in spec or "variant" not in spec:
            continue
        ckpt = cfg.resolve(spec["checkpoint"]) if "checkpoint" in spec else None
        if ckpt is not None and ckpt.is_file() and not args.force:
            print(f"{where}: {ckpt} exists, skipping")
            continue
        handle = build_toy_model(toy_spec(spec, int(cfg.dataset.get("num_classes", 4))), spec.get("name"))
        handle, val = train_model(cfg, handle, spec["train"])
        msg = f"{where}: {handle.name} validation mIoU {100 * val:.2f}"
        if ckpt is not None:
            save_checkpoint(handle, ckpt)
            msg += f", saved to {ckpt}"
        print(msg)
    return EXIT_OK


def _print_summary(rows) -> None:
    for s in summarize(rows):
        label = s["target"]
        if s["sweep_param"]:
            label += f" {s['sweep_param']}={s['sweep_value']}"
        if s["defense"]:
            label += f" {s['defense']}={s['defense_value']}"
        print(f"{label}: benign {s['benign_miou_mean']:.2f}  adversarial {s['adversarial_miou_mean']:.2f}"
              f"  ASR {s['asr_mean']:.2f} +/- {s['asr_stderr']:.2f}")


def _cmd_experiment(args) -> int:
    cfg = load_config(args.config, args.seed, args.out, args.workers)
    run = {"attack": run_attack_eval, "sweep": run_sweep, "defense": run_defense_eval}[args.command]
    rows = run(cfg)
    _print_summary(rows)
    print(f"results written to {cfg.output_dir}")
    return EXIT_OK


def _cmd_render(args) -> int:
    cfg = load_config(args.config, args.seed, args.out, args.workers)
    cfg.dataset = {**cfg.dataset, "count": min(int(cfg.dataset.get("count", args.count)), args.count)}
    exp = Experiment(cfg, "attack")
    crafted = craft(exp.surrogate, exp.dataset, attack_fn(cfg.attack), cfg.seeds[0], cfg.workers)
    paths = exp.write_overlays(crafted.images, args.count)
    print(f"wrote {len(paths)} overlays to {Path(cfg.output_dir) / 'overlays'}")
    return EXIT_OK


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "attack": _cmd_experiment,
    "sweep": _cmd_experiment,
    "defense": _cmd_experiment,
    "render": _cmd_render,
}


def exit_code_for(exc: BaseException) -> Optional[int]:
    if isinstance(exc, (ConfigError, InvalidConfig)):
        return EXIT_CONFIG
    if isinstance(exc, DATA_ERRORS):
        return EXIT_DATA
    if isinstance(exc, MODEL_ERRORS):
        return EXIT_MODEL
    return None


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:
        code = exit_code_for(exc)
        if code is None:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
