"""Continual and multitask experiment drivers.

A :class:`Lab` owns everything that several experiments can share: the
datasets, the pre-trained base model, and trained EBM states keyed by the
prefix of tasks they were trained on. An EBM trained on ``(a, b)`` depends
only on that prefix, the EBM settings and the seed, so the six task orders
of a battery need only nine EBM extensions in total.
"""

from __future__ import annotations

import json
import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..diffcore import Adam, GradMap, NonFiniteError, Rng, Tape, ops
from ..latent_ebm import EBMDivergence, EBMState, EBMTrainConfig, LangevinConfig, train_ebm
from ..pps import PromptBank, freeze, new_slot
from ..replay import ReplayConfig, SampleStore, generate_pseudo, merge
from ..seqmodel import (BaseLM, answer_nll_batch, mean_inference_energy, pretrain_base,
                        save_checkpoint, train_inference_net)
from ..textdata import VOCAB, QAPair, TaskDataset, serialize, toy_battery
from .config import ExperimentConfig
from .metrics import MetricsReport, evaluate, order_label


class ExperimentDivergence(RuntimeError):
    def __init__(self, stage: int, detail: str):
        super().__init__(f"training diverged at stage {stage}: {detail}")
        self.stage = stage


@dataclass
class StageStats:
    epochs_run: int
    final_loss: float
    steps: int


def langevin_config(cfg: ExperimentConfig) -> LangevinConfig:
    return LangevinConfig(cfg.k0, cfg.k1, cfg.s0, cfg.s1)


def ebm_train_config(cfg: ExperimentConfig) -> EBMTrainConfig:
    return EBMTrainConfig(cfg.T, cfg.eta0, cfg.eta1, cfg.b, cfg.clip_norm)


def _question_ids(pairs: Sequence[QAPair]) -> list[list[int]]:
    return [VOCAB.encode(p.question) for p in pairs]


class Lab:
    """Shared, cached inputs for a family of experiments."""

    def __init__(self):
        self._data: dict = {}
        self._base: dict = {}
        self._ebm: dict = {}
        self.ebm_trainings = 0

    def datasets(self, cfg: ExperimentConfig) -> dict[str, TaskDataset]:
        key = (cfg.data_seed, cfg.n_train, cfg.n_test)
        if key not in self._data:
            self._data[key] = toy_battery(cfg.data_seed, cfg.n_train, cfg.n_test)
        return self._data[key]

    def base(self, cfg: ExperimentConfig) -> BaseLM:
        """A fresh copy of the pre-trained base model."""
        key = (cfg.seed, cfg.pretrain_steps, cfg.embed_dim, cfg.hidden)
        if key not in self._base:
            rng = Rng(cfg.seed).child("base")
            base = BaseLM.init(len(VOCAB), rng.child("init"), cfg.embed_dim, cfg.hidden)
            self._base[key] = pretrain_base(base, rng.child("pretrain"), steps=cfg.pretrain_steps)
        return self._base[key].copy()

    def ebm(self, cfg: ExperimentConfig, prefix: Sequence[str]) -> tuple[EBMState, dict]:
        """The EBM after training on ``prefix`` one task after another."""
        prefix = tuple(prefix)
        key = (cfg.ebm_key(), prefix)
        if key in self._ebm:
            state, info = self._ebm[key]
            return state.copy(), dict(info)
        if not prefix:
            raise ValueError("an EBM needs at least one task")
        rng = Rng(cfg.seed).child("ebm", order_label(prefix))
        if len(prefix) == 1:
            prev = EBMState.init(len(VOCAB), Rng(cfg.seed).child("ebm", "init"), cfg.d,
                                 cfg.embed_dim, cfg.hidden)
        else:
            prev, _ = self.ebm(cfg, prefix[:-1])
        task = self.datasets(cfg)[prefix[-1]]
        seqs = [serialize(p)[1:] for p in task.train]
        self_replay = 0
        if prev.m > 0 and cfg.ebm_replay > 0:
            # Replay the EBM's own samples of earlier tasks so that extending it
            # on a new task does not erase what it learned before.
            count = math.ceil(cfg.ebm_replay * len(task.train) * prev.m)
            res = generate_pseudo(prev, count, ReplayConfig(gamma=0.0, k=cfg.k), langevin_config(cfg),
                                  rng.child("self-replay"))
            seqs = seqs + [serialize(p)[1:] for p in res.samples]
            self_replay = len(res.samples)
        log: list = []
        state = train_ebm(prev, [(prefix[-1], seqs)], langevin_config(cfg), ebm_train_config(cfg),
                          rng.child("train"), log)
        self.ebm_trainings += 1
        info = {"tasks": list(prefix), "self_replay": self_replay,
                "final_recon_loglik": log[-1]["mean_recon_loglik"] if log else None}
        if state.psi is not None and cfg.psi_steps > 0:
            xs = _question_ids(task.train)
            state.psi, _ = train_inference_net(state.psi, state.beta, xs, cfg.psi_steps,
                                               rng.child("psi"))
            info["inference_energy"] = mean_inference_energy(state.psi, state.beta, xs[:64]).item()
        self._ebm[key] = (state.copy(), dict(info))
        return state, info


def learner_gradients(base: BaseLM, bank: PromptBank | None, seqs: Sequence[Sequence[int]],
                      lambda_p: float, train_qa: bool = True):
    """Gradients of ``L_QA + lambda_p * L_P`` on one batch.

    Both terms are the mean answer-token NLL given ``[prompts, x]``. ``L_QA``
    reaches the base model with the prompt rows held fixed; ``L_P`` reaches
    the live prompt slot with the base model held fixed. One forward pass
    serves both. With ``train_qa`` off the base gradient map is empty.
    Returns (loss value, base gradient map, slot gradient or None).
    """
    live = bank.live() if bank is not None and bank.unfrozen() else None
    params = list(base.tensors().values()) if train_qa else []
    with Tape() as tape:
        prefix = bank.prefix() if bank is not None else None
        loss = ops.scale(answer_nll_batch(base, prefix, seqs), 1.0 / len(seqs))
    wrt = params + ([live.values] if live is not None else [])
    if not wrt:
        return loss.item(), GradMap(), None
    grads = tape.backward(loss, wrt=wrt)
    slot_grad = None if live is None else lambda_p * grads.pop(live.values)
    return loss.item(), grads, slot_grad


def train_stage(base: BaseLM, bank: PromptBank | None, train: Sequence[QAPair],
                cfg: ExperimentConfig, rng: Rng, lambda_p: float) -> tuple[BaseLM, StageStats]:
    """Minimize ``L_QA + lambda_p * L_P`` over the training list with Adam,
    stopping early once the epoch loss stops improving."""
    base = base.copy()
    opt = Adam(list(base.tensors().values()), lr=cfg.lr, clip_norm=5.0)
    live = bank.live() if bank is not None and bank.unfrozen() else None
    slot_opt = Adam([live.values], lr=cfg.slot_lr, clip_norm=5.0) if live is not None else None
    seqs = [serialize(p) for p in train]
    n, bs = len(seqs), cfg.batch_size
    best, stale, steps, epoch_loss = math.inf, 0, 0, math.inf
    epochs_run = 0
    for epoch in range(cfg.epochs):
        perm = rng.child("epoch", epoch).permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            batch = [seqs[i] for i in perm[start:start + bs]]
            loss, grads, slot_grad = learner_gradients(base, bank, batch, lambda_p, cfg.train_qa)
            if grads:
                opt.step(grads)
            if live is not None:
                slot_opt.step({live.values: slot_grad})
            total += loss * len(batch)
            steps += 1
        epochs_run = epoch + 1
        epoch_loss = total / n
        if not math.isfinite(epoch_loss):
            raise NonFiniteError(f"training loss became {epoch_loss}")
        if epoch_loss < best - 1e-4:
            best, stale = epoch_loss, 0
        else:
            stale += 1
            if stale >= cfg.patience > 0:
                break
    if not base.all_finite():
        raise NonFiniteError("base model parameters became non-finite")
    return base, StageStats(epochs_run, epoch_loss, steps)


class _Output:
    """Per-experiment output directory (or nothing)."""

    def __init__(self, out: str | None):
        self.root = Path(out) if out else None
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
            (self.root / "metrics.jsonl").write_text("")

    def record(self, obj: dict) -> None:
        if self.root is not None:
            with open(self.root / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(obj, sort_keys=True) + "\n")

    def checkpoint(self, stage: int, base: BaseLM, bank: PromptBank | None, meta: dict) -> None:
        if self.root is None:
            return
        ck = self.root / "checkpoints"
        ck.mkdir(exist_ok=True)
        groups = {"base": base}
        meta = dict(meta, bank=[] if bank is None else bank.to_json())
        save_checkpoint(ck / f"stage_{stage}.json", groups, meta)


def _evaluate_all(base: BaseLM, bank: PromptBank | None, data: dict[str, TaskDataset],
                  tasks: Sequence[str]) -> dict[str, float]:
    return {t: evaluate(base, bank, data[t]) for t in tasks}


def run_continual(cfg: ExperimentConfig, lab: Lab | None = None) -> MetricsReport:
    """Train on ``cfg.task_order`` one task at a time; column j of the score
    matrix holds every task's test score after stage j."""
    cfg.validate()
    if cfg.method == "multitask":
        return run_multitask(cfg, lab)
    lab = lab or Lab()
    t0 = time.perf_counter()
    data = lab.datasets(cfg)
    order = list(cfg.task_order)
    gamma, lambda_p = cfg.effective_gamma, cfg.effective_lambda_p
    out = _Output(cfg.out)
    tmp = None
    if gamma > 0:
        if out.root is not None:
            store = SampleStore(out.root / "store")
            if store.stages():
                raise FileExistsError(f"sample store {store.root} is not empty")
        else:
            tmp = tempfile.TemporaryDirectory()
            store = SampleStore(tmp.name)
    base = lab.base(cfg)
    bank = PromptBank() if cfg.uses_prompts else None
    freeze_sums: dict[int, str] = {}
    scores = {t: [] for t in order}
    stages = []
    rng = Rng(cfg.seed).child("learner")
    try:
        for j, name in enumerate(order):
            stage = j + 1
            train = list(data[name].train)
            replay_info = {"requested": 0, "generated": 0, "shortfall": None}
            ebm_info = None
            if gamma > 0 and j > 0:
                state, ebm_info = lab.ebm(cfg, order[:j])
                gen_rng = Rng(cfg.seed).child("replay", order_label(order[:j]))

                def generate(count, state=state, gen_rng=gen_rng):
                    return generate_pseudo(state, count, ReplayConfig(gamma=gamma, k=cfg.k),
                                           langevin_config(cfg), gen_rng)

                merged = merge(train, store, stage, gamma, generate, rng.child("merge", stage))
                train = merged.train
                replay_info = {"requested": merged.requested, "generated": merged.generated,
                               "shortfall": None if merged.shortfall is None
                               else merged.shortfall.missing}
                ebm_info["checksum"] = state.checksum()[:16]
            slot = None
            if bank is not None:
                slot = new_slot(base, cfg.p_len, stage, Rng(cfg.seed).child("slot", stage), bank,
                                seed=cfg.seed)
            try:
                base, stats = train_stage(base, bank, train, cfg, rng.child("stage", stage), lambda_p)
            except NonFiniteError as e:
                raise ExperimentDivergence(stage, str(e)) from e
            if slot is not None:
                freeze(bank, slot)
                freeze_sums[stage] = slot.checksum()
            col = _evaluate_all(base, bank, data, order)
            for t in order:
                scores[t].append(col[t])
            rec = {"stage": stage, "task": name, "method": cfg.method, "order": order,
                   "scores": col, "train_size": len(train), "epochs_run": stats.epochs_run,
                   "final_train_loss": stats.final_loss, "replay": replay_info,
                   "slot_checksums": {str(k): v for k, v in (bank.checksums() if bank else {}).items()},
                   "ebm": ebm_info}
            stages.append(rec)
            out.record(rec)
            if cfg.checkpoints:
                out.checkpoint(stage, base, bank, {"config": cfg.to_json(), "stage": stage})
    finally:
        if tmp is not None:
            tmp.cleanup()
    report = MetricsReport(order, [scores[t] for t in order], cfg.method, order,
                           time.perf_counter() - t0, stages,
                           {str(k): v for k, v in freeze_sums.items()})
    out.record({"summary": report.to_json(), "freeze_checksums": report.slot_checksums})
    if out.root is not None:
        (out.root / "timing.json").write_text(json.dumps({"wall_clock": report.wall_clock}))
    report.final_bank = bank
    report.final_base = base
    return report


def run_multitask(cfg: ExperimentConfig, lab: Lab | None = None) -> MetricsReport:
    """Joint training on the union of all train splits; one evaluation column."""
    cfg.validate()
    lab = lab or Lab()
    t0 = time.perf_counter()
    data = lab.datasets(cfg)
    order = list(cfg.task_order)
    out = _Output(cfg.out)
    rng = Rng(cfg.seed).child("learner", "multitask")
    train = [p for t in order for p in data[t].train]
    try:
        base, stats = train_stage(lab.base(cfg), None, train, cfg, rng.child("stage", 1), 0.0)
    except NonFiniteError as e:
        raise ExperimentDivergence(1, str(e)) from e
    col = _evaluate_all(base, None, data, order)
    rec = {"stage": 1, "task": "+".join(order), "method": "multitask", "order": order,
           "scores": col, "train_size": len(train), "epochs_run": stats.epochs_run,
           "final_train_loss": stats.final_loss}
    out.record(rec)
    if cfg.checkpoints:
        out.checkpoint(1, base, None, {"config": cfg.to_json(), "stage": 1})
    report = MetricsReport(order, [[col[t]] for t in order], "multitask", order,
                           time.perf_counter() - t0, [rec])
    out.record({"summary": report.to_json()})
    if out.root is not None:
        (out.root / "timing.json").write_text(json.dumps({"wall_clock": report.wall_clock}))
    report.final_bank = None
    report.final_base = base
    return report
