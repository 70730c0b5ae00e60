"""Progressive parameter selection: per-task prompt slots copied from the base
model's embedding rows, prepended newest-first, trained while their task is
current and frozen afterwards."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .diffcore import Rng, ShapeError, Tensor, ops
from .seqmodel import BaseLM, answer_nll_batch
from .textdata import VOCAB, QAPair, serialize


class FrozenSlotError(RuntimeError):
    """A write was attempted on a frozen prompt slot."""


class BankError(ValueError):
    """The prompt bank is not in the state an operation requires."""


@dataclass
class PromptSlot:
    task_index: int
    row_indices: tuple[int, ...]
    values: Tensor
    frozen: bool = False
    seed: int = 0
    frozen_checksum: str | None = field(default=None, repr=False)

    def __post_init__(self):
        self.row_indices = tuple(int(i) for i in self.row_indices)
        if len(set(self.row_indices)) != len(self.row_indices):
            raise ValueError("row_indices must be distinct")
        if self.values.ndim != 2 or self.values.shape[0] != len(self.row_indices):
            raise ShapeError(f"slot values {self.values.shape} do not match "
                             f"{len(self.row_indices)} rows")

    @property
    def p_len(self) -> int:
        return len(self.row_indices)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def assign(self, data: np.ndarray) -> None:
        if self.frozen:
            raise FrozenSlotError(f"slot for task {self.task_index} is frozen")
        data = np.asarray(data, dtype=np.float64)
        if data.shape != self.values.shape:
            raise ShapeError(f"cannot assign {data.shape} to slot of shape {self.values.shape}")
        self.values.data = data.copy()

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.values.data, dtype="<f8").tobytes()).hexdigest()

    def to_json(self) -> dict:
        return {"task_index": self.task_index, "row_indices": list(self.row_indices),
                "seed": self.seed, "frozen": self.frozen, "checksum": self.checksum(),
                "values": self.values.data.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "PromptSlot":
        slot = cls(obj["task_index"], tuple(obj["row_indices"]),
                   Tensor(np.array(obj["values"], dtype=np.float64)), False, obj.get("seed", 0))
        if obj.get("frozen"):
            _seal(slot)
        return slot


def _seal(slot: PromptSlot) -> None:
    arr = slot.values.data.copy()
    arr.flags.writeable = False
    slot.values.data = arr
    slot.values.requires_grad = False
    slot.frozen = True
    slot.frozen_checksum = slot.checksum()


@dataclass
class PromptBank:
    """Slots ordered newest-first, ``[P_m, ..., P_1]``."""

    slots: list[PromptSlot] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.slots)

    @property
    def total_rows(self) -> int:
        return sum(s.p_len for s in self.slots)

    def unfrozen(self) -> list[PromptSlot]:
        return [s for s in self.slots if not s.frozen]

    def live(self) -> PromptSlot:
        """The single trainable slot."""
        free = self.unfrozen()
        if len(free) != 1:
            raise BankError(f"expected exactly one unfrozen slot, found {len(free)}")
        return free[0]

    def push(self, slot: PromptSlot) -> None:
        if self.unfrozen():
            raise BankError("an older slot is still unfrozen")
        if self.slots and slot.task_index <= self.slots[0].task_index:
            raise BankError(f"task index {slot.task_index} does not follow "
                            f"{self.slots[0].task_index}")
        if self.slots and slot.width != self.slots[0].width:
            raise ShapeError(f"slot width {slot.width} != bank width {self.slots[0].width}")
        self.slots.insert(0, slot)

    def prefix(self) -> Tensor | None:
        """All slot rows stacked newest-first; only the live slot carries gradient."""
        if not self.slots:
            return None
        return ops.concat([s.values for s in self.slots], axis=0)

    def prefix_array(self) -> np.ndarray | None:
        if not self.slots:
            return None
        return np.concatenate([s.values.data for s in self.slots], axis=0)

    def checksums(self) -> dict[int, str]:
        return {s.task_index: s.checksum() for s in self.slots}

    def to_json(self) -> list[dict]:
        return [s.to_json() for s in self.slots]

    @classmethod
    def from_json(cls, rows: list[dict]) -> "PromptBank":
        return cls([PromptSlot.from_json(r) for r in rows])


def new_slot(base: BaseLM, p_len: int, m: int, rng: Rng, bank: PromptBank | None = None,
             seed: int = 0) -> PromptSlot:
    """Copy ``p_len`` distinct, uniformly chosen embedding rows into a fresh
    trainable slot; pushed onto ``bank`` when one is given."""
    V = base.vocab_size
    if not 1 <= p_len <= V:
        raise ValueError(f"p_len must lie in [1, {V}], got {p_len}")
    if bank is not None and bank.unfrozen():
        raise BankError("an older slot is still unfrozen")
    rows = tuple(int(i) for i in rng.sample_without_replacement(V, p_len))
    values = Tensor(base.emb.data[list(rows)].copy(), requires_grad=True, name=f"P{m}")
    slot = PromptSlot(m, rows, values, False, seed)
    if bank is not None:
        bank.push(slot)
    return slot


def concat_prompts(bank: PromptBank, x_embedded):
    """``[P_m rows, ..., P_1 rows, x rows]`` along the sequence axis."""
    x = x_embedded if isinstance(x_embedded, Tensor) else Tensor(np.asarray(x_embedded, dtype=np.float64))
    if x.ndim != 2:
        raise ShapeError(f"x_embedded must be (length, width), got {x.shape}")
    for s in bank.slots:
        if s.width != x.shape[1]:
            raise ShapeError(f"slot width {s.width} != embedding width {x.shape[1]}")
    if not bank.slots:
        return x
    return ops.concat([bank.prefix(), x], axis=0)


def selection_loss(bank: PromptBank, base: BaseLM, batch: Sequence[QAPair]) -> Tensor:
    """Summed answer-token NLL given ``[P_m, ..., P_1, x]``.

    Differentiable with respect to the unfrozen slot only: the base model is
    read through detached copies, and frozen slots never require gradients.
    """
    bank.live()
    detached = BaseLM(**{k: t.detach() for k, t in base.tensors().items()})
    seqs = [serialize(p, VOCAB) for p in batch]
    return answer_nll_batch(detached, bank.prefix(), seqs)


def combined_loss(l_qa, l_p, lambda_p: float):
    """``L_QA + lambda_p * L_P``; works on floats and Tensors alike."""
    if isinstance(l_qa, Tensor) or isinstance(l_p, Tensor):
        return ops.add(l_qa, ops.scale(l_p, lambda_p))
    return float(l_qa) + lambda_p * float(l_p)


def freeze(bank: PromptBank, slot: PromptSlot) -> None:
    """Freeze ``slot``; it must be the newest. Freezing twice is a no-op."""
    if not bank.slots or bank.slots[0] is not slot:
        if slot.frozen and slot in bank.slots:
            return
        raise BankError("only the newest slot may be frozen")
    if slot.frozen:
        return
    _seal(slot)
