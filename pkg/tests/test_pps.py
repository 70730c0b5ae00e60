import math

import numpy as np
import pytest

from ppsebm.diffcore import Rng, ShapeError, Tape, Tensor, finite_diff_check, numeric_grad, ops
from ppsebm.harness.runner import learner_gradients
from ppsebm.pps import (BankError, FrozenSlotError, PromptBank, PromptSlot, combined_loss,
                        concat_prompts, freeze, new_slot, selection_loss)
from ppsebm.seqmodel import BaseLM, answer_nll_batch
from ppsebm.textdata import VOCAB, make_task, serialize

V = len(VOCAB)


def base_model(seed=0, e=6, h=7, scale=0.3):
    return BaseLM.init(V, Rng(seed), e, h, scale=scale)


def uniform_base(e=6, h=7):
    b = base_model(0, e, h)
    for t in (b.w_out, b.b_out):
        t.data = np.zeros_like(t.data)
    return b


def batch(n=4, seed=0):
    return make_task("tag", seed, n_train=n, n_test=1).train


def test_new_slot_rows_and_values():
    base = base_model()
    slot = new_slot(base, 10, 1, Rng(3))
    assert slot.p_len == 10 and len(set(slot.row_indices)) == 10
    np.testing.assert_array_equal(slot.values.data, base.emb.data[list(slot.row_indices)])
    assert not slot.frozen and slot.values.requires_grad
    # a copy: editing the slot leaves the base embedding alone
    slot.values.data[0, 0] += 1.0
    assert base.emb.data[slot.row_indices[0], 0] != slot.values.data[0, 0]
    assert new_slot(base, 10, 1, Rng(3)).row_indices == new_slot(base, 10, 1, Rng(3)).row_indices
    assert new_slot(base, 10, 1, Rng(3)).row_indices != new_slot(base, 10, 1, Rng(4)).row_indices
    with pytest.raises(ValueError):
        new_slot(base, V + 1, 1, Rng(0))
    with pytest.raises(ValueError):
        new_slot(base, 0, 1, Rng(0))


def test_slot_rejects_repeated_rows():
    with pytest.raises(ValueError):
        PromptSlot(1, (2, 2), Tensor(np.zeros((2, 3))))
    with pytest.raises(ShapeError):
        PromptSlot(1, (2, 3), Tensor(np.zeros((3, 3))))


def test_new_slot_requires_frozen_history():
    base = base_model()
    bank = PromptBank()
    new_slot(base, 3, 1, Rng(0), bank)
    with pytest.raises(BankError):
        new_slot(base, 3, 2, Rng(1), bank)


def test_concat_prompts():
    base = base_model()
    x = Rng(1).gaussian((5, 6))
    bank = PromptBank()
    np.testing.assert_array_equal(concat_prompts(bank, x).data, x)
    s1 = new_slot(base, 10, 1, Rng(2), bank)
    assert concat_prompts(bank, x).shape == (15, 6)
    freeze(bank, s1)
    s2 = new_slot(base, 4, 2, Rng(3), bank)
    out = concat_prompts(bank, x).data
    assert out.shape == (19, 6)
    np.testing.assert_array_equal(out[:4], s2.values.data)
    np.testing.assert_array_equal(out[4:14], s1.values.data)
    np.testing.assert_array_equal(out[14:], x)
    with pytest.raises(ShapeError):
        concat_prompts(bank, np.zeros((2, 5)))


def test_selection_loss_uniform_model():
    base = uniform_base()
    bank = PromptBank()
    new_slot(base, 5, 1, Rng(0), bank)
    pairs = batch(6)
    n_answer = sum(len(p.answer) + 1 for p in pairs)   # answer tokens plus EOS
    assert selection_loss(bank, base, pairs).item() == pytest.approx(n_answer * math.log(V), abs=1e-9)


def test_selection_loss_needs_one_live_slot():
    base = base_model()
    bank = PromptBank()
    with pytest.raises(BankError):
        selection_loss(bank, base, batch())
    s = new_slot(base, 3, 1, Rng(0), bank)
    freeze(bank, s)
    with pytest.raises(BankError):
        selection_loss(bank, base, batch())


def _two_slot_bank(base):
    bank = PromptBank()
    old = new_slot(base, 3, 1, Rng(5), bank)
    freeze(bank, old)
    live = new_slot(base, 4, 2, Rng(6), bank)
    return bank, old, live


def test_selection_loss_gradients():
    base = base_model(1)
    bank, old, live = _two_slot_bank(base)
    pairs = batch(3)
    with Tape() as tape:
        loss = selection_loss(bank, base, pairs)
    grads = tape.backward(loss, wrt=[live.values, old.values, base.emb])
    assert grads.of(old.values).tolist() == np.zeros_like(old.values.data).tolist()
    assert grads.get(base.emb) is None or not np.any(grads[base.emb])
    assert np.any(grads[live.values])
    seqs = [serialize(p) for p in pairs]

    def f(t):
        prefix = ops.concat([t, Tensor(old.values.data)], axis=0)
        return answer_nll_batch(base, prefix, seqs)

    assert finite_diff_check(f, live.values.data.copy()) <= 1e-4


def test_combined_loss():
    assert combined_loss(1.0, 2.0, 0.05) == pytest.approx(1.1, abs=1e-15)
    assert combined_loss(1.0, 2.0, 0.0) == 1.0
    assert combined_loss(1.0, 4.0, 0.05) - combined_loss(1.0, 2.0, 0.05) == pytest.approx(0.1)
    t = combined_loss(Tensor(1.0), Tensor(2.0), 0.05)
    assert isinstance(t, Tensor) and t.item() == pytest.approx(1.1)


def test_freeze_invariants():
    base = base_model()
    bank = PromptBank()
    s1 = new_slot(base, 3, 1, Rng(0), bank)
    before = s1.checksum()
    freeze(bank, s1)
    freeze(bank, s1)
    assert s1.frozen and s1.frozen_checksum == before
    with pytest.raises(FrozenSlotError):
        s1.assign(np.zeros_like(s1.values.data))
    with pytest.raises(ValueError):
        s1.values.data[0, 0] = 5.0
    s2 = new_slot(base, 3, 2, Rng(1), bank)
    assert bank.slots == [s2, s1] and bank.live() is s2
    with pytest.raises(BankError):
        freeze(PromptBank([s2, s1]), PromptSlot(9, (1,), Tensor(np.zeros((1, 6)))))
    # train the live slot for a few steps; the frozen one does not move
    seqs = [serialize(p) for p in batch(4)]
    for _ in range(3):
        _, grads, slot_grad = learner_gradients(base, bank, seqs, 1.0)
        s2.assign(s2.values.data - 0.1 * slot_grad)
    assert s1.checksum() == before and s2.checksum() != s2.frozen_checksum


def test_bank_json_round_trip():
    base = base_model()
    bank, old, live = _two_slot_bank(base)
    back = PromptBank.from_json(bank.to_json())
    assert back.checksums() == bank.checksums()
    assert back.slots[1].frozen and not back.slots[0].frozen


def test_learner_gradients_match_finite_differences():
    base = base_model(2)
    bank, old, live = _two_slot_bank(base)
    seqs = [serialize(p) for p in batch(3, seed=1)]
    lam = 0.05
    loss, grads, slot_grad = learner_gradients(base, bank, seqs, lam)
    prefix = bank.prefix_array()
    mean_nll = lambda b, pre: ops.scale(answer_nll_batch(b, pre, seqs), 1 / len(seqs))  # noqa: E731
    assert loss == pytest.approx(mean_nll(base, Tensor(prefix)).item())
    # slot: lambda * d(mean NLL)/d(slot), base held fixed
    def f_slot(t):
        return mean_nll(base, ops.concat([t, Tensor(old.values.data)], axis=0))
    np.testing.assert_allclose(slot_grad, lam * numeric_grad(f_slot, live.values.data.copy()),
                               rtol=1e-4, atol=1e-8)
    # base: d(mean NLL)/d(w_out), prompts held fixed
    arrs = base.arrays()

    def f_base(t):
        b = BaseLM(**{**{k: Tensor(v) for k, v in arrs.items()}, "w_out": t})
        return mean_nll(b, Tensor(prefix))

    np.testing.assert_allclose(grads[base.w_out], numeric_grad(f_base, arrs["w_out"]),
                               rtol=1e-4, atol=1e-8)
    assert old.values not in grads
    # lambda = 0 zeroes the slot step; switching off L_QA empties the base map
    assert not np.any(learner_gradients(base, bank, seqs, 0.0)[2])
    _, none, sg = learner_gradients(base, bank, seqs, lam, train_qa=False)
    assert len(none) == 0
    np.testing.assert_array_equal(sg, slot_grad)
