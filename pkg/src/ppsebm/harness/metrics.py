"""Scoring, score matrices, forgetting curves and table output."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..pps import PromptBank
from ..seqmodel import BaseLM, greedy_answers
from ..textdata import VOCAB, TaskDataset


def exact_match(preds: Sequence[Sequence[str]], refs: Sequence[Sequence[str]]) -> float:
    if len(preds) != len(refs):
        raise ValueError("predictions and references differ in length")
    if not refs:
        raise ValueError("empty evaluation set")
    return 100.0 * sum(tuple(p) == tuple(r) for p, r in zip(preds, refs)) / len(refs)


def token_f1_one(pred: Sequence[str], ref: Sequence[str]) -> float:
    common = sum((Counter(pred) & Counter(ref)).values())
    if common == 0:
        return 0.0
    precision = common / len(pred)
    recall = common / len(ref)
    return 2 * precision * recall / (precision + recall)


def token_f1(preds: Sequence[Sequence[str]], refs: Sequence[Sequence[str]]) -> float:
    if len(preds) != len(refs):
        raise ValueError("predictions and references differ in length")
    if not refs:
        raise ValueError("empty evaluation set")
    return 100.0 * float(np.mean([token_f1_one(p, r) for p, r in zip(preds, refs)]))


SCORERS = {"exact_match": exact_match, "token_f1": token_f1}


def predict(base: BaseLM, bank: PromptBank | None, questions, max_len: int = 12) -> list[tuple[str, ...]]:
    prefix = None if bank is None else bank.prefix_array()
    ids = greedy_answers(base, prefix, [VOCAB.encode(q) for q in questions], max_len=max_len)
    return [VOCAB.decode(a) for a in ids]


def evaluate(base: BaseLM, bank: PromptBank | None, task: TaskDataset) -> float:
    """Greedy-decode answers to the test questions and score them."""
    if not task.test:
        raise ValueError(f"task {task.name!r} has an empty test set")
    preds = predict(base, bank, [p.question for p in task.test])
    return SCORERS[task.metric](preds, [p.answer for p in task.test])


@dataclass
class MetricsReport:
    """``scores[i][j]``: task i's test score after training stage j."""

    tasks: list[str]
    scores: list[list[float]]
    method: str = ""
    order: list[str] = field(default_factory=list)
    wall_clock: float = 0.0
    stages: list[dict] = field(default_factory=list)
    slot_checksums: dict = field(default_factory=dict)
    final_base: object = field(default=None, repr=False, compare=False)
    final_bank: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.tasks)
        if len(self.scores) != n:
            raise ValueError("score matrix needs one row per task")
        widths = {len(r) for r in self.scores}
        if len(widths) > 1 or (widths and widths.pop() not in (1, n)):
            raise ValueError("score matrix needs 1 or |tasks| columns")
        for row in self.scores:
            for s in row:
                if not 0.0 <= s <= 100.0:
                    raise ValueError(f"score {s} outside [0, 100]")

    @property
    def final_scores(self) -> list[float]:
        return [row[-1] for row in self.scores]

    @property
    def average(self) -> float:
        return float(np.mean(self.final_scores))

    def to_json(self) -> dict:
        return {"method": self.method, "order": self.order, "tasks": self.tasks,
                "scores": self.scores, "final": self.final_scores, "average": self.average}


def forgetting_curve(report: MetricsReport) -> dict[str, dict]:
    """Per task, in order of training: the series ``R[i][i..M]`` and ``R[i][i] - R[i][M]``."""
    if report.method == "multitask" or len(report.scores[0]) != len(report.tasks):
        raise ValueError("forgetting curves need a continual report")
    order = report.order or report.tasks
    out = {}
    for stage, name in enumerate(order):
        row = report.scores[report.tasks.index(name)]
        series = row[stage:]
        out[name] = {"series": list(series), "delta": series[0] - series[-1]}
    return out


def mean_forgetting(report: MetricsReport) -> float:
    return float(np.mean([c["delta"] for c in forgetting_curve(report).values()]))


def order_label(order: Sequence[str]) -> str:
    return ">".join(order)


def write_table(path: str | Path, rows: list[dict], orders: list[str]) -> None:
    """Rows of ``{"config": str, "scores": {order_label: avg}}``; adds Average and Std
    (population std over the orders present)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config"] + orders + ["Average", "Std"])
        for r in rows:
            vals = [r["scores"][o] for o in orders if o in r["scores"]]
            w.writerow([r["config"]] + [f"{r['scores'][o]:.2f}" if o in r["scores"] else ""
                                        for o in orders]
                       + [f"{np.mean(vals):.2f}", f"{np.std(vals):.2f}"])


def write_forgetting(path: str | Path, entries: list[tuple[str, MetricsReport]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "order", "task", "delta", "series"])
        for label, rep in entries:
            for task, c in forgetting_curve(rep).items():
                w.writerow([label, order_label(rep.order), task, f"{c['delta']:.2f}",
                            " ".join(f"{v:.2f}" for v in c["series"])])
