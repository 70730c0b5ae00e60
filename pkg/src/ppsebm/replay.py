"""Pseudo-sample generation from the trained EBM, the on-disk sample store,
and merging replayed samples into a task's training set."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .diffcore import Rng
from .latent_ebm import EBMState, LangevinConfig, sample_prior
from .seqmodel import decode_topk_batch
from .textdata import VOCAB, QAPair, Vocab, deserialize


@dataclass
class ReplayConfig:
    gamma: float = 0.05
    k: int = 1
    max_attempts_factor: int = 10
    max_len: int = 24
    batch: int = 64

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.k < 1:
            raise ValueError("k must be at least 1")


@dataclass
class Shortfall:
    requested: int
    produced: int
    attempts: int

    @property
    def missing(self) -> int:
        return self.requested - self.produced


@dataclass
class GenerationResult:
    samples: list[QAPair]
    attempts: int
    shortfall: Shortfall | None = None


def parse_generated(ids: Sequence[int], vocab: Vocab = VOCAB) -> QAPair | None:
    """Split a decoded stream at its first SEP; None if it is not a valid pair."""
    if not ids or ids[-1] != vocab.eos:
        return None
    try:
        return deserialize([vocab.gen] + list(ids), vocab, source="generated")
    except ValueError:
        return None


def generate_pseudo(state: EBMState, count: int, cfg: ReplayConfig, langevin_cfg: LangevinConfig,
                    rng: Rng, vocab: Vocab = VOCAB) -> GenerationResult:
    """Draw latents from the prior, decode, and keep well-formed pairs.

    Gives up after ``count * max_attempts_factor`` decodes and reports the
    shortfall instead of raising.
    """
    if count < 0:
        raise ValueError("count must be nonnegative")
    out: list[QAPair] = []
    budget = count * cfg.max_attempts_factor
    attempts = 0
    rnd = 0
    while len(out) < count and attempts < budget:
        n = min(cfg.batch, budget - attempts)
        z = sample_prior(state.alpha, n, langevin_cfg, rng.child("z", rnd))
        decoded = decode_topk_batch(state.beta, z, cfg.k, cfg.max_len, rng.child("decode", rnd))
        rnd += 1
        for ids in decoded:
            attempts += 1
            pair = parse_generated(ids, vocab)
            if pair is not None:
                out.append(pair)
                if len(out) == count:
                    break
    short = None if len(out) == count else Shortfall(count, len(out), attempts)
    return GenerationResult(out, attempts, short)


_STAGE_FILE = re.compile(r"^stage_(\d+)\.jsonl$")


class SampleStore:
    """Append-only directory of generated samples, one JSONL file per stage."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def stages(self) -> list[int]:
        if not self.root.exists():
            return []
        found = [int(m.group(1)) for p in self.root.iterdir() if (m := _STAGE_FILE.match(p.name))]
        return sorted(found)

    def persist(self, stage: int, samples: Sequence[QAPair]) -> Path:
        done = self.stages()
        if done and stage <= done[-1]:
            raise ValueError(f"stage {stage} is not after the last stored stage {done[-1]}")
        for s in samples:
            if s.source != "generated":
                raise ValueError("only generated samples may enter the store")
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / f"stage_{stage}.jsonl"
        tmp = path.with_suffix(".tmp")
        with open(tmp, "w") as fh:
            for s in samples:
                fh.write(json.dumps(s.to_json(stage=stage)) + "\n")
        tmp.replace(path)
        return path

    def load(self) -> list[QAPair]:
        out: list[QAPair] = []
        for stage in self.stages():
            path = self.root / f"stage_{stage}.jsonl"
            with open(path) as fh:
                for lineno, line in enumerate(fh, 1):
                    if not line.strip():
                        continue
                    try:
                        obj = json.loads(line)
                        pair = QAPair.from_json(obj)
                    except (ValueError, KeyError, TypeError, AttributeError) as e:
                        raise ValueError(f"{path}:{lineno}: malformed sample ({e})") from None
                    if pair.source != "generated":
                        raise ValueError(f"{path}:{lineno}: stored sample is not generated")
                    out.append(pair)
        return out


def pseudo_count(gamma: float, n_train: int) -> int:
    """ceil(gamma * n_train), robust to float noise in the product."""
    return math.ceil(round(gamma * n_train, 9))


@dataclass
class MergeResult:
    train: list[QAPair]
    requested: int
    generated: int
    shortfall: Shortfall | None = None


def merge(current: Sequence[QAPair], store: SampleStore, stage: int, gamma: float,
          generate, rng: Rng) -> MergeResult:
    """Generate this stage's pseudo-samples, persist them, and shuffle them
    into the current training list.

    ``generate(count)`` returns a :class:`GenerationResult`. With
    ``gamma == 0`` nothing is generated and the store is not touched.
    """
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    if gamma == 0:
        return MergeResult(list(current), 0, 0)
    requested = pseudo_count(gamma, len(current))
    result = generate(requested)
    store.persist(stage, result.samples)
    merged = rng.shuffle(list(current) + list(result.samples))
    return MergeResult(merged, requested, len(result.samples), result.shortfall)
