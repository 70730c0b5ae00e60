"""Task-order batteries, ablations and hyperparameter sweeps."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..textdata import task_orders
from .config import GRID, ExperimentConfig
from .metrics import MetricsReport, order_label, write_forgetting, write_table
from .runner import Lab, run_continual

ABLATION = ("neither", "only_pps", "only_ebm", "ppsebm")


@dataclass
class BatteryRow:
    config: str
    method: str
    overrides: dict
    reports: dict[str, MetricsReport] = field(default_factory=dict)

    @property
    def averages(self) -> dict[str, float]:
        return {k: r.average for k, r in self.reports.items()}

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.averages.values())))

    @property
    def std(self) -> float:
        """Population std of the per-order averages."""
        return float(np.std(list(self.averages.values())))


@dataclass
class BatteryResult:
    orders: list[str]
    rows: list[BatteryRow]
    ebm_trainings: int = 0

    def row(self, config: str) -> BatteryRow:
        for r in self.rows:
            if r.config == config:
                return r
        raise KeyError(config)

    def table(self) -> list[dict]:
        return [{"config": r.config, "scores": r.averages, "average": r.mean, "std": r.std}
                for r in self.rows]


def _label(method: str, overrides: dict) -> str:
    if not overrides:
        return method
    return method + "[" + ",".join(f"{k}={v}" for k, v in sorted(overrides.items())) + "]"


def run_battery(base: ExperimentConfig, methods: Sequence[str],
                grid: Sequence[dict] | None = None, orders: Sequence[Sequence[str]] | None = None,
                lab: Lab | None = None, out: str | Path | None = None) -> BatteryResult:
    """Run every order x method x grid point.

    ``grid`` holds config overrides, one dict per grid point (default: a
    single empty selection). ``orders`` defaults to all six permutations of
    ``base.task_order``. With ``out``, each experiment writes to its own
    subdirectory and ``table.csv`` / ``forgetting.csv`` / ``metrics.jsonl``
    summarize the battery.
    """
    lab = lab or Lab()
    grid = list(grid) if grid else [{}]
    orders = [tuple(o) for o in (orders or task_orders(list(base.task_order)))]
    root = Path(out) if out is not None else None
    if root is not None:
        root.mkdir(parents=True, exist_ok=True)
    rows = []
    for method in methods:
        for sel in grid:
            label = _label(method, sel)
            row = BatteryRow(label, method, dict(sel))
            for order in orders:
                sub = None
                if root is not None:
                    sub = str(root / "runs" / _safe(label) / _safe(order_label(order)))
                cfg = dataclasses.replace(base, method=method, task_order=tuple(order), out=sub,
                                          **sel).validate()
                row.reports[order_label(order)] = run_continual(cfg, lab)
            rows.append(row)
    result = BatteryResult([order_label(o) for o in orders], rows, lab.ebm_trainings)
    if root is not None:
        write_battery(root, result)
    return result


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_.=" else "_" for c in name)


def write_battery(root: str | Path, result: BatteryResult) -> None:
    root = Path(root)
    write_table(root / "table.csv", result.table(), result.orders)
    write_forgetting(root / "forgetting.csv",
                     [(r.config, rep) for r in result.rows for rep in r.reports.values()
                      if rep.method != "multitask"])
    with open(root / "metrics.jsonl", "w") as fh:
        for r in result.rows:
            for label, rep in r.reports.items():
                fh.write(json.dumps({"config": r.config, "order": label, **rep.to_json(),
                                     "stages": rep.stages}, sort_keys=True) + "\n")
        for t in result.table():
            fh.write(json.dumps({"row": t["config"], "average": t["average"], "std": t["std"]},
                                sort_keys=True) + "\n")


def run_ablation(base: ExperimentConfig, orders=None, lab: Lab | None = None,
                 out=None) -> BatteryResult:
    """The four ablation rows: neither, only_pps, only_ebm, ppsebm."""
    return run_battery(base, ABLATION, None, orders, lab, out)


def run_sweep(base: ExperimentConfig, param: str, values: Sequence[float] = GRID,
              method: str = "ppsebm", orders=None, lab: Lab | None = None, out=None) -> BatteryResult:
    if param not in ("gamma", "lambda_p"):
        raise ValueError(f"sweep parameter must be gamma or lambda_p, got {param!r}")
    return run_battery(base, [method], [{param: float(v)} for v in values], orders, lab, out)
