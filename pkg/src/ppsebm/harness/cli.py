"""Command-line entry point.

    ppsebm train   [--config FILE] [flags]            one experiment
    ppsebm battery --methods ppsebm,finetune [flags]  all task orders x methods
    ppsebm ablate  [flags]                            neither / only_pps / only_ebm / ppsebm
    ppsebm sweep   --param gamma --values 0,0.05,0.2  one method over a grid
    ppsebm eval    --checkpoint FILE                  score a saved stage

Exit codes: 0 success, 2 configuration error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from ..latent_ebm import EBMDivergence
from ..pps import PromptBank
from ..seqmodel import BaseLM, load_checkpoint
from ..diffcore import NonFiniteError
from .battery import run_ablation, run_battery, run_sweep, write_battery
from .config import GRID, METHODS, ConfigError, ExperimentConfig, load_config
from .metrics import evaluate, write_forgetting, write_table, order_label
from .runner import ExperimentDivergence, Lab, run_continual

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3

# flag name -> config field
_FLAGS = {f.name: "--" + f.name.replace("_", "-") for f in dataclasses.fields(ExperimentConfig)}
_FLAGS["task_order"] = "--order"


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with config fields; flags override it")
    for name, flag in _FLAGS.items():
        p.add_argument(flag, dest=name, default=None, metavar=name.upper())


def _config(args) -> ExperimentConfig:
    overrides = {name: getattr(args, name) for name in _FLAGS}
    return load_config(args.config, overrides)


def _parse_list(text: str, kind=str) -> list:
    try:
        return [kind(v.strip()) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ppsebm", description=__doc__.split("\n\n")[0],
                                 allow_abbrev=False)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one experiment", allow_abbrev=False)
    _add_config_flags(p)

    p = sub.add_parser("battery", help="all six task orders for each method",
                       allow_abbrev=False)
    _add_config_flags(p)
    p.add_argument("--methods", default="ppsebm,finetune,multitask")

    p = sub.add_parser("ablate", help="the four ablation rows", allow_abbrev=False)
    _add_config_flags(p)
    p.add_argument("--all-orders", action="store_true",
                   help="average over all six orders instead of only --order")

    p = sub.add_parser("sweep", help="sweep gamma or lambda_p", allow_abbrev=False)
    _add_config_flags(p)
    p.add_argument("--param", required=True, choices=("gamma", "lambda_p"))
    p.add_argument("--values", default=",".join(str(v) for v in GRID))
    p.add_argument("--all-orders", action="store_true")

    p = sub.add_parser("eval", help="evaluate a saved checkpoint on every task")
    p.add_argument("--checkpoint", required=True)
    return ap


def _print_table(result) -> None:
    for r in result.table():
        print(f"{r['config']:<32} avg {r['average']:6.2f}  std {r['std']:5.2f}")


def _cmd_train(args) -> None:
    cfg = _config(args)
    if cfg.out is None:
        raise ConfigError("--out is required for train")
    rep = run_continual(cfg)
    out = Path(cfg.out)
    label = order_label(cfg.task_order)
    write_table(out / "table.csv", [{"config": cfg.method, "scores": {label: rep.average}}], [label])
    if cfg.method != "multitask":
        write_forgetting(out / "forgetting.csv", [(cfg.method, rep)])
    for t, row in zip(rep.tasks, rep.scores):
        print(f"{t:<10} " + " ".join(f"{s:6.2f}" for s in row))
    print(f"average {rep.average:.2f}")


def _cmd_battery(args) -> None:
    cfg = _config(args)
    methods = _parse_list(args.methods)
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown method(s) {bad}")
    _print_table(run_battery(cfg, methods, out=cfg.out))


def _cmd_ablate(args) -> None:
    cfg = _config(args)
    orders = None if args.all_orders else [cfg.task_order]
    _print_table(run_ablation(cfg, orders, out=cfg.out))


def _cmd_sweep(args) -> None:
    cfg = _config(args)
    values = _parse_list(args.values, float)
    orders = None if args.all_orders else [cfg.task_order]
    _print_table(run_sweep(cfg, args.param, values, cfg.method, orders, out=cfg.out))


def _cmd_eval(args) -> None:
    try:
        tensors, meta = load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError) as e:
        raise ConfigError(f"cannot load checkpoint {args.checkpoint}: {e}") from None
    cfg = ExperimentConfig.from_json({**meta["config"], "out": None}).validate()
    base = BaseLM.from_arrays(tensors["base"])
    bank = PromptBank.from_json(meta.get("bank", [])) if meta.get("bank") else None
    data = Lab().datasets(cfg)
    scores = {t: evaluate(base, bank, data[t]) for t in cfg.task_order}
    for t, s in scores.items():
        print(f"{t:<10} {s:6.2f}")
    print(f"average {np.mean(list(scores.values())):.2f}")


COMMANDS = {"train": _cmd_train, "battery": _cmd_battery, "ablate": _cmd_ablate,
            "sweep": _cmd_sweep, "eval": _cmd_eval}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ExperimentDivergence, EBMDivergence, NonFiniteError) as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
