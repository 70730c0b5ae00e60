"""Shared vocabulary, QA serialization and the synthetic desk-scale tasks.

Three task kinds stand in for the sentiment / semantic-role / dialogue-state
benchmarks:

``classify`` (``sst-toy``)
    ``review w1 .. wn`` -> ``positive`` or ``negative`` by majority of
    sentiment words (n odd, neutral fillers allowed).
``tag`` (``srl-toy``)
    ``roles w1 .. wn`` -> one role tag per word (``A0`` agent, ``V`` verb,
    ``A1`` object).
``slots`` (``woz-toy``)
    ``state w1 .. wn`` -> ``food <f> area <a> [price <p>]`` read off the
    slot-valued words in the utterance.

Every answer is a deterministic function of its question (see :func:`solve`).
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .diffcore import Rng

PAD, GEN, SEP, EOS = "<pad>", "<gen>", "<sep>", "<eos>"
RESERVED = (PAD, GEN, SEP, EOS)

POSITIVE = ("good", "great", "fine", "nice", "happy", "superb")
NEGATIVE = ("bad", "awful", "poor", "sad", "dull", "worst")
NEUTRAL = ("movie", "plot", "scene", "film", "story", "cast")
AGENTS = ("john", "mary", "sam", "kim", "lee", "ann")
VERBS = ("saw", "took", "gave", "found", "made", "sold")
OBJECTS = ("ball", "book", "car", "cup", "key", "hat")
FOODS = ("thai", "sushi", "pizza", "curry", "tapas", "pasta")
AREAS = ("north", "south", "east", "west", "centre", "docks")
PRICES = ("cheap", "pricey", "moderate")
FILLERS = ("want", "some", "please", "in", "the", "near")
MARKERS = {"classify": "review", "tag": "roles", "slots": "state"}
LABELS = ("positive", "negative")
TAGS = {"agent": "A0", "verb": "V", "object": "A1"}
KEYS = ("food", "area", "price")

TASK_NAMES = {"classify": "sst-toy", "tag": "srl-toy", "slots": "woz-toy"}
KIND_OF = {v: k for k, v in TASK_NAMES.items()}
METRICS = {"classify": "exact_match", "tag": "token_f1", "slots": "exact_match"}


class Vocab:
    """Closed token <-> id bijection; id 0 is PAD."""

    def __init__(self, tokens: Iterable[str]):
        toks = list(RESERVED)
        for t in tokens:
            if t not in toks:
                toks.append(t)
        self.tokens = tuple(toks)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.pad, self.gen, self.sep, self.eos = (self.index[t] for t in RESERVED)
        self.reserved_ids = frozenset((self.pad, self.gen, self.sep, self.eos))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def encode(self, tokens: Sequence[str]) -> list[int]:
        try:
            return [self.index[t] for t in tokens]
        except KeyError as e:
            raise ValueError(f"token {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Sequence[int]) -> tuple[str, ...]:
        return tuple(self.tokens[i] for i in ids)


def default_vocab() -> Vocab:
    words = (POSITIVE + NEGATIVE + NEUTRAL + AGENTS + VERBS + OBJECTS + FOODS + AREAS
             + PRICES + FILLERS + tuple(MARKERS.values()) + LABELS + tuple(TAGS.values()) + KEYS)
    return Vocab(words)


VOCAB = default_vocab()


@dataclass(frozen=True)
class QAPair:
    question: tuple[str, ...]
    answer: tuple[str, ...]
    source: str = "real"

    def __post_init__(self):
        object.__setattr__(self, "question", tuple(self.question))
        object.__setattr__(self, "answer", tuple(self.answer))
        if not self.question or not self.answer:
            raise ValueError("question and answer must both be nonempty")
        bad = [t for t in self.question + self.answer if t in RESERVED]
        if bad:
            raise ValueError(f"reserved tokens inside a QA pair: {bad}")
        if self.source not in ("real", "generated"):
            raise ValueError(f"unknown source {self.source!r}")

    def to_json(self, **extra) -> dict:
        return {"question": " ".join(self.question), "answer": " ".join(self.answer),
                "source": self.source, **extra}

    @classmethod
    def from_json(cls, obj: dict) -> "QAPair":
        return cls(tuple(obj["question"].split()), tuple(obj["answer"].split()),
                   obj.get("source", "real"))


@dataclass
class TaskDataset:
    name: str
    kind: str
    train: list[QAPair]
    test: list[QAPair]
    metric: str = "exact_match"

    def to_jsonl(self, path: str | Path, split: str = "train") -> None:
        rows = self.train if split == "train" else self.test
        with open(path, "w") as fh:
            for p in rows:
                fh.write(json.dumps(p.to_json()) + "\n")


def serialize(p: QAPair, vocab: Vocab = VOCAB) -> list[int]:
    """``[GEN] x [SEP] y [EOS]`` as token ids."""
    if not p.question or not p.answer:
        raise ValueError("question and answer must both be nonempty")
    for t in p.question + p.answer:
        if t in RESERVED:
            raise ValueError(f"reserved token {t!r} inside a QA pair")
    return [vocab.gen, *vocab.encode(p.question), vocab.sep, *vocab.encode(p.answer), vocab.eos]


def deserialize(ids: Sequence[int], vocab: Vocab = VOCAB, source: str = "real") -> QAPair:
    ids = list(ids)
    if len(ids) < 5 or ids[0] != vocab.gen or ids[-1] != vocab.eos:
        raise ValueError("sequence is not framed as [GEN] x [SEP] y [EOS]")
    body = ids[1:-1]
    if vocab.sep not in body:
        raise ValueError("sequence has no SEP")
    cut = body.index(vocab.sep)
    return QAPair(vocab.decode(body[:cut]), vocab.decode(body[cut + 1:]), source)


# ----------------------------------------------------------------------------
# Task rules

def solve(kind: str, question: Sequence[str]) -> tuple[str, ...]:
    """The hidden rule of each task kind, applied to a question."""
    words = list(question[1:])
    if kind == "classify":
        pos = sum(w in POSITIVE for w in words)
        neg = sum(w in NEGATIVE for w in words)
        return ("positive",) if pos > neg else ("negative",)
    if kind == "tag":
        out = []
        for w in words:
            if w in AGENTS:
                out.append(TAGS["agent"])
            elif w in VERBS:
                out.append(TAGS["verb"])
            else:
                out.append(TAGS["object"])
        return tuple(out)
    if kind == "slots":
        out = []
        for key, pool in zip(KEYS, (FOODS, AREAS, PRICES)):
            hit = [w for w in words if w in pool]
            if hit:
                out += [key, hit[0]]
        return tuple(out)
    raise ValueError(f"unknown task kind {kind!r}")


def _pick(rng: Rng, pool: Sequence[str]) -> str:
    return pool[int(rng.integers(0, len(pool)))]


def _question(kind: str, rng: Rng) -> tuple[str, ...]:
    if kind == "classify":
        n_sent = (1, 3, 5)[int(rng.integers(0, 3))]
        words = [_pick(rng, POSITIVE + NEGATIVE) for _ in range(n_sent)]
        words += [_pick(rng, NEUTRAL) for _ in range(int(rng.integers(0, 3)))]
    elif kind == "tag":
        n = int(rng.integers(3, 7))
        words = [_pick(rng, AGENTS), _pick(rng, VERBS), _pick(rng, OBJECTS)]
        words += [_pick(rng, AGENTS + VERBS + OBJECTS) for _ in range(n - 3)]
    elif kind == "slots":
        words = [_pick(rng, FOODS), _pick(rng, AREAS)]
        if rng.uniform() < 0.5:
            words.append(_pick(rng, PRICES))
        words += [_pick(rng, FILLERS) for _ in range(int(rng.integers(1, 3)))]
    else:
        raise ValueError(f"unknown task kind {kind!r}")
    order = rng.permutation(len(words))
    return (MARKERS[kind],) + tuple(words[i] for i in order)


def make_task(kind: str, seed: int, n_train: int = 512, n_test: int = 128,
              name: str | None = None) -> TaskDataset:
    """Generate a solvable task with disjoint train/test question sets."""
    if kind not in MARKERS:
        raise ValueError(f"unknown task kind {kind!r}")
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be at least 1")
    rng = Rng(seed, ("task", kind))
    seen: set[tuple[str, ...]] = set()
    pairs: list[QAPair] = []
    budget = 200 * (n_train + n_test)
    while len(pairs) < n_train + n_test:
        budget -= 1
        if budget < 0:
            raise ValueError(f"cannot draw {n_train + n_test} distinct {kind} questions")
        q = _question(kind, rng)
        if q in seen:
            continue
        seen.add(q)
        pairs.append(QAPair(q, solve(kind, q)))
    return TaskDataset(name or TASK_NAMES[kind], kind, pairs[:n_train], pairs[n_train:],
                       METRICS[kind])


def toy_battery(seed: int, n_train: int = 512, n_test: int = 128) -> dict[str, TaskDataset]:
    """The three-task battery keyed by task name."""
    return {TASK_NAMES[k]: make_task(k, seed + i, n_train, n_test)
            for i, k in enumerate(("classify", "tag", "slots"))}


def task_orders(tasks: Sequence[str]) -> list[tuple[str, ...]]:
    """All 6 orders of 3 task names, lexicographic in input positions."""
    if len(tasks) != 3:
        raise ValueError(f"expected exactly 3 task names, got {len(tasks)}")
    if len(set(tasks)) != 3:
        raise ValueError(f"task names must be distinct: {list(tasks)}")
    return [tuple(tasks[i] for i in perm) for perm in itertools.permutations(range(3))]
