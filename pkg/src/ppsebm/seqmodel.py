"""Recurrent sequence networks.

* :class:`DecoderParams` -- the latent-conditioned autoregressive text model
  ``p(x | z)``. The latent enters through an affine map into the initial
  hidden state and is concatenated to every step's input.
* :class:`InferenceNetParams` -- the recurrent encoder that amortizes the
  energy minimization over answers. It emits logits over the vocabulary for
  the relaxed answer-head token (see :func:`local_energy`).
* :class:`BaseLM` -- the unconditioned recurrent LM trained by the continual
  learner; prompt rows are prepended to its input embeddings.

Sequences are token-id lists. The decoder and base LM always start from the
GEN id, so a scored sequence ``tokens`` is predicted from inputs
``[GEN] + tokens[:-1]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffcore import Adam, NonFiniteError, Params, Rng, ShapeError, Tape, Tensor, ops
from .diffcore.ops import _sigmoid, log_softmax_np, softmax_np
from .textdata import VOCAB

GEN_ID = VOCAB.gen
CHECKPOINT_FORMAT = "ppsebm-checkpoint"
CHECKPOINT_VERSION = 1


def _init(rng: Rng, shape, scale: float) -> Tensor:
    return Tensor(rng.gaussian(shape) * scale, requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _pad(seqs: Sequence[Sequence[int]], value: int = 0) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), value, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def _check_ids(seqs, vocab_size: int) -> None:
    for s in seqs:
        if len(s) == 0:
            raise ValueError("token sequence must be nonempty")
        if min(s) < 0 or max(s) >= vocab_size:
            raise ValueError(f"token id out of range [0, {vocab_size}) in {list(s)}")


def _gru_step_np(x, h, w, u, b):
    H = h.shape[1]
    a = x @ w + b
    hu = h @ u
    r = _sigmoid(a[:, :H] + hu[:, :H])
    z = _sigmoid(a[:, H:2 * H] + hu[:, H:2 * H])
    n = np.tanh(a[:, 2 * H:] + r * hu[:, 2 * H:])
    return (1.0 - z) * n + z * h


# ----------------------------------------------------------------------------
# Decoder p(x | z)

@dataclass
class DecoderParams(Params):
    emb: Tensor      # (V, e)
    w: Tensor        # (e + d, 3h)
    u: Tensor        # (h, 3h)
    b: Tensor        # (3h,)
    w_z: Tensor      # (d, h)
    b_z: Tensor      # (h,)
    w_out: Tensor    # (h, V)
    b_out: Tensor    # (V,)

    @property
    def vocab_size(self) -> int:
        return self.emb.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.w_z.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.emb.shape[1]

    @classmethod
    def init(cls, vocab_size: int, rng: Rng, embed_dim: int = 32, hidden: int = 64,
             latent_dim: int = 16, scale: float = 0.1) -> "DecoderParams":
        return cls(
            emb=_init(rng, (vocab_size, embed_dim), scale),
            w=_init(rng, (embed_dim + latent_dim, 3 * hidden), scale),
            u=_init(rng, (hidden, 3 * hidden), scale),
            b=_zeros((3 * hidden,)),
            w_z=_init(rng, (latent_dim, hidden), scale),
            b_z=_zeros((hidden,)),
            w_out=_init(rng, (hidden, vocab_size), scale),
            b_out=_zeros((vocab_size,)),
        )

    @classmethod
    def zeros(cls, vocab_size: int, embed_dim: int, hidden: int, latent_dim: int):
        z = lambda *s: _zeros(s)  # noqa: E731
        return cls(z(vocab_size, embed_dim), z(embed_dim + latent_dim, 3 * hidden),
                   z(hidden, 3 * hidden), z(3 * hidden), z(latent_dim, hidden), z(hidden),
                   z(hidden, vocab_size), z(vocab_size))


def decoder_logprobs(beta: DecoderParams, inputs: np.ndarray, z: Tensor,
                     soft: Tensor | None = None) -> Tensor:
    """Next-token log-probabilities (B, T, V) for input ids (B, T) and latents (B, d).

    ``soft`` is an optional (B, e) embedding added to every input slot.
    """
    z = ops.as_tensor(z)
    B, T = inputs.shape
    if z.shape != (B, beta.latent_dim):
        raise ShapeError(f"latent batch {z.shape} does not match ({B}, {beta.latent_dim})")
    x = ops.gather_rows(beta.emb, inputs)
    if soft is not None:
        x = ops.add(x, ops.reshape(soft, (B, 1, beta.embed_dim)))
    zt = ops.add(ops.reshape(z, (B, 1, beta.latent_dim)), np.zeros((B, T, beta.latent_dim)))
    x = ops.concat([x, zt], axis=2)
    h0 = ops.tanh(ops.add(ops.matmul(z, beta.w_z), beta.b_z))
    hs = ops.gru_sequence(x, h0, beta.w, beta.u, beta.b)
    return ops.log_softmax(ops.add(ops.matmul(hs, beta.w_out), beta.b_out))


def decoder_loglik_batch(beta: DecoderParams, seqs: Sequence[Sequence[int]], z,
                         start: int = GEN_ID) -> Tensor:
    """Per-sequence teacher-forced log p(x | z), shape (B,)."""
    _check_ids(seqs, beta.vocab_size)
    targets = _pad(seqs)
    inputs = np.concatenate([np.full((len(seqs), 1), start), targets[:, :-1]], axis=1)
    mask = np.zeros(targets.shape)
    for i, s in enumerate(seqs):
        mask[i, :len(s)] = 1.0
    lp = ops.pick(decoder_logprobs(beta, inputs, z), targets)
    return ops.sum(ops.mul(lp, mask), axis=1)


def decoder_loglik(beta: DecoderParams, tokens: Sequence[int], z, start: int = GEN_ID) -> Tensor:
    """log p(tokens | z) for one sequence, as a scalar tensor (always <= 0)."""
    z = ops.as_tensor(z)
    if z.ndim != 1:
        raise ShapeError(f"expected a latent vector, got shape {z.shape}")
    zb = ops.reshape(z, (1, z.shape[0]))
    return ops.sum(decoder_loglik_batch(beta, [list(tokens)], zb, start))


def decode_topk_batch(beta: DecoderParams, z: np.ndarray, k: int, max_len: int, rng: Rng,
                      eos: int = VOCAB.eos, start: int = GEN_ID) -> list[list[int]]:
    """Autoregressive top-k decoding for a batch of latents (B, d)."""
    if k < 1 or max_len < 1:
        raise ValueError("k and max_len must be at least 1")
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    B = z.shape[0]
    emb, w, u, b = beta.emb.data, beta.w.data, beta.u.data, beta.b.data
    h = np.tanh(z @ beta.w_z.data + beta.b_z.data)
    tok = np.full(B, start)
    out: list[list[int]] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    for _ in range(max_len):
        h = _gru_step_np(np.concatenate([emb[tok], z], axis=1), h, w, u, b)
        logits = h @ beta.w_out.data + beta.b_out.data
        if k == 1:
            tok = np.argmax(logits, axis=1)
        else:
            kk = min(k, logits.shape[1])
            top = np.argsort(-logits, axis=1, kind="stable")[:, :kk]
            p = softmax_np(np.take_along_axis(logits, top, axis=1))
            tok = top[np.arange(B), rng.categorical(p)]
        for i in np.flatnonzero(~done):
            out[i].append(int(tok[i]))
        done |= tok == eos
        if done.all():
            break
    return out


def decode_topk(beta: DecoderParams, z, k: int, max_len: int, rng: Rng,
                eos: int = VOCAB.eos, start: int = GEN_ID) -> list[int]:
    return decode_topk_batch(beta, np.asarray(z)[None, :], k, max_len, rng, eos, start)[0]


# ----------------------------------------------------------------------------
# Inference network, operators, energies

@dataclass
class InferenceNetParams(Params):
    emb: Tensor      # (V, e)
    w: Tensor        # (e, 3h)
    u: Tensor        # (h, 3h)
    b: Tensor        # (3h,)
    w_out: Tensor    # (h, V)
    b_out: Tensor    # (V,)

    @property
    def out_dim(self) -> int:
        return self.w_out.shape[1]

    @classmethod
    def init(cls, vocab_size: int, rng: Rng, embed_dim: int = 32, hidden: int = 64,
             scale: float = 0.1) -> "InferenceNetParams":
        return cls(_init(rng, (vocab_size, embed_dim), scale),
                   _init(rng, (embed_dim, 3 * hidden), scale),
                   _init(rng, (hidden, 3 * hidden), scale), _zeros((3 * hidden,)),
                   _init(rng, (hidden, vocab_size), scale), _zeros((vocab_size,)))


def infer_logits_batch(psi: InferenceNetParams, xs: Sequence[Sequence[int]]) -> Tensor:
    if any(len(x) == 0 for x in xs):
        raise ValueError("inference network input must be nonempty")
    _check_ids(xs, psi.emb.shape[0])
    ids = _pad(xs)
    B = len(xs)
    hidden = psi.u.shape[0]
    hs = ops.gru_sequence(ops.gather_rows(psi.emb, ids), np.zeros((B, hidden)),
                          psi.w, psi.u, psi.b)
    last = np.array([len(x) - 1 for x in xs])
    flat = ops.reshape(hs, (B * ids.shape[1], hidden))
    h_last = ops.gather_rows(flat, np.arange(B) * ids.shape[1] + last)
    return ops.add(ops.matmul(h_last, psi.w_out), psi.b_out)


def infer_logits(psi: InferenceNetParams, x: Sequence[int]) -> Tensor:
    """Relaxed answer-head logits for one question."""
    if len(x) == 0:
        raise ValueError("inference network input must be nonempty")
    return ops.reshape(infer_logits_batch(psi, [x]), (psi.out_dim,))


def apply_operators(z_m) -> tuple[Tensor, Tensor]:
    """Both operators are the softmax: (feed-in distribution, scoring distribution)."""
    z_m = ops.as_tensor(z_m)
    if not np.all(np.isfinite(z_m.data)):
        raise NonFiniteError("logits must be finite")
    return ops.softmax(z_m), ops.softmax(z_m)


def _question_inputs(xs: Sequence[Sequence[int]], sep: int) -> tuple[np.ndarray, np.ndarray]:
    seqs = [list(x) + [sep] for x in xs]
    ids = _pad(seqs)
    inputs = np.concatenate([np.full((len(seqs), 1), GEN_ID), ids], axis=1)
    last = np.array([len(s) for s in seqs])  # position of SEP in ``inputs``
    return inputs, last


def local_energy_batch(beta: DecoderParams, xs: Sequence[Sequence[int]], z) -> Tensor:
    """Relaxed local energies (B,) for questions ``xs`` and answer-head logits (B, V).

    The decoder reads ``[GEN] x [SEP]`` with the feed-in distribution's
    expected embedding added to its input slots and a zero latent; the
    energy is the cross-entropy between the scoring distribution and the
    decoder's next-symbol distribution after SEP.
    """
    z = ops.as_tensor(z)
    _check_ids(xs, beta.vocab_size)
    B = len(xs)
    if z.shape != (B, beta.vocab_size):
        raise ShapeError(f"answer logits {z.shape} do not match ({B}, {beta.vocab_size})")
    feed, score = apply_operators(z)
    inputs, last = _question_inputs(xs, VOCAB.sep)
    soft = ops.matmul(feed, beta.emb)
    lp = decoder_logprobs(beta, inputs, np.zeros((B, beta.latent_dim)), soft=soft)
    V = beta.vocab_size
    flat = ops.reshape(lp, (B * inputs.shape[1], V))
    head = ops.gather_rows(flat, np.arange(B) * inputs.shape[1] + last)
    return ops.scale(ops.sum(ops.mul(score, head), axis=1), -1.0)


def local_energy(beta: DecoderParams, x_m: Sequence[int], z_m) -> Tensor:
    z_m = ops.as_tensor(z_m)
    e = local_energy_batch(beta, [x_m], ops.reshape(z_m, (1, z_m.shape[-1])))
    return ops.sum(e)


def answer_energy(beta: DecoderParams, x: Sequence[int], y: Sequence[int]) -> Tensor:
    """Hard energy -log p(y, EOS | x) with a zero latent."""
    seq = list(x) + [VOCAB.sep] + list(y) + [VOCAB.eos]
    lp = decoder_logprobs(beta, np.array([[GEN_ID] + seq[:-1]]), np.zeros((1, beta.latent_dim)))
    start = len(x) + 1  # first answer target
    picked = ops.pick(lp, np.array([seq]))
    return ops.scale(ops.sum(ops.index(picked, (0, slice(start, None)))), -1.0)


@dataclass
class EnergyBreakdown:
    local: list[float]
    total: float


def total_energy(beta: DecoderParams, xs: Sequence[Sequence[int]], zs) -> EnergyBreakdown:
    """Sum of per-task local energies for one (question, answer-logits) per task."""
    if len(xs) == 0:
        raise ValueError("total energy needs at least one task")
    zs = np.asarray(zs, dtype=np.float64)
    local = [local_energy(beta, x, z).item() for x, z in zip(xs, zs)]
    return EnergyBreakdown(local, float(np.sum(local)))


def mean_inference_energy(psi: InferenceNetParams, beta: DecoderParams,
                          xs: Sequence[Sequence[int]]) -> Tensor:
    return ops.mean(local_energy_batch(beta, xs, infer_logits_batch(psi, xs)))


def train_inference_net(psi: InferenceNetParams, beta: DecoderParams,
                        xs: Sequence[Sequence[int]], steps: int, rng: Rng, lr: float = 1e-2,
                        batch_size: int = 32, log_every: int = 10):
    """Fit the inference network to minimize E(x, A(x)) with the decoder fixed.

    Returns the best parameters seen at logging checkpoints and the history of
    (step, mean energy over ``xs``).
    """
    if steps == 0:
        return psi, []
    psi = psi.copy()
    params = list(psi.tensors().values())
    opt = Adam(params, lr=lr)
    beta_fixed = beta  # decoder tensors are only read

    def full_energy() -> float:
        return mean_inference_energy(psi, beta_fixed, xs).item()

    best = full_energy()
    best_psi = psi.copy()
    history = [(0, best)]
    for step in range(1, steps + 1):
        idx = rng.permutation(len(xs))[:batch_size]
        batch = [xs[i] for i in idx]
        with Tape() as tape:
            loss = mean_inference_energy(psi, beta_fixed, batch)
        if not np.isfinite(loss.item()):
            raise NonFiniteError(f"inference-net loss diverged at step {step}")
        opt.step(tape.backward(loss, wrt=params))
        if step % log_every == 0 or step == steps:
            e = full_energy()
            if e < best:
                best, best_psi = e, psi.copy()
            history.append((step, best))
    return best_psi, history


# ----------------------------------------------------------------------------
# Base language model for the continual learner

@dataclass
class BaseLM(Params):
    emb: Tensor      # (V, e)
    w: Tensor        # (e, 3h)
    u: Tensor        # (h, 3h)
    b: Tensor        # (3h,)
    w_out: Tensor    # (h, V)
    b_out: Tensor    # (V,)

    @property
    def embed_dim(self) -> int:
        return self.emb.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.emb.shape[0]

    @classmethod
    def init(cls, vocab_size: int, rng: Rng, embed_dim: int = 32, hidden: int = 64,
             scale: float = 0.1) -> "BaseLM":
        return cls(_init(rng, (vocab_size, embed_dim), scale),
                   _init(rng, (embed_dim, 3 * hidden), scale),
                   _init(rng, (hidden, 3 * hidden), scale), _zeros((3 * hidden,)),
                   _init(rng, (hidden, vocab_size), scale), _zeros((vocab_size,)))


def prefix_state(base: BaseLM, prefix: Tensor | None, batch: int) -> Tensor:
    """Hidden state after reading the prompt rows (P, e), repeated over the batch.

    The prompt is the same for every row, so it is run once and broadcast.
    """
    H = base.u.shape[0]
    if prefix is None:
        return Tensor(np.zeros((batch, H)))
    if prefix.ndim != 2 or prefix.shape[1] != base.embed_dim:
        raise ShapeError(f"prompt rows {prefix.shape} do not match embedding width "
                         f"{base.embed_dim}")
    hp = ops.gru_sequence(ops.reshape(prefix, (1,) + prefix.shape), np.zeros((1, H)),
                          base.w, base.u, base.b)
    last = ops.index(hp, (slice(None), -1))
    return ops.add(np.zeros((batch, H)), last)


def base_logprobs(base: BaseLM, prefix: Tensor | None, inputs: np.ndarray) -> Tensor:
    """Log-probs (B, T, V) at the token positions of ``[prompt rows] inputs``.

    Prompt rows (P, e) are read by the recurrent cell before the tokens; their
    own output positions carry no targets and are not returned.
    """
    B, T = inputs.shape
    x = ops.gather_rows(base.emb, inputs)
    h0 = prefix_state(base, prefix, B)
    hs = ops.gru_sequence(x, h0, base.w, base.u, base.b)
    return ops.log_softmax(ops.add(ops.matmul(hs, base.w_out), base.b_out))


def answer_nll_batch(base: BaseLM, prefix: Tensor | None, seqs: Sequence[Sequence[int]],
                     sep: int = VOCAB.sep) -> Tensor:
    """Summed negative log-likelihood of the answer span (tokens after SEP, incl. EOS).

    ``seqs`` are serialized ``[GEN] x [SEP] y [EOS]`` id lists.
    """
    ids = _pad(seqs)
    inputs, targets = ids[:, :-1], ids[:, 1:]
    mask = np.zeros(targets.shape)
    for i, s in enumerate(seqs):
        cut = list(s).index(sep)
        mask[i, cut:len(s) - 1] = 1.0
    lp = base_logprobs(base, prefix, inputs)
    picked = ops.pick(lp, targets)
    return ops.scale(ops.sum(ops.mul(picked, mask)), -1.0)


def greedy_answers(base: BaseLM, prefix: np.ndarray | None, questions: Sequence[Sequence[int]],
                   max_len: int = 12, eos: int = VOCAB.eos, sep: int = VOCAB.sep) -> list[list[int]]:
    """Greedy answer decoding given ``[prompts] [GEN] x [SEP]``; EOS is not included."""
    emb, w, u, b = base.emb.data, base.w.data, base.u.data, base.b.data
    wo, bo = base.w_out.data, base.b_out.data
    H = u.shape[0]
    results: list[list[int] | None] = [None] * len(questions)
    h_prefix = np.zeros((1, H))
    if prefix is not None:
        for row in np.asarray(prefix):
            h_prefix = _gru_step_np(row[None, :], h_prefix, w, u, b)
    by_len: dict[int, list[int]] = {}
    for i, q in enumerate(questions):
        by_len.setdefault(len(q), []).append(i)
    for _, idx in sorted(by_len.items()):
        ids = np.array([[GEN_ID] + list(questions[i]) + [sep] for i in idx])
        h = np.repeat(h_prefix, len(idx), axis=0)
        for t in range(ids.shape[1]):
            h = _gru_step_np(emb[ids[:, t]], h, w, u, b)
        outs = [[] for _ in idx]
        done = np.zeros(len(idx), dtype=bool)
        for _ in range(max_len):
            tok = np.argmax(h @ wo + bo, axis=1)
            done_now = done | (tok == eos)
            for j in np.flatnonzero(~done_now):
                outs[j].append(int(tok[j]))
            done = done_now
            if done.all():
                break
            h = _gru_step_np(emb[tok], h, w, u, b)
        for j, i in enumerate(idx):
            results[i] = outs[j]
    return results


def pretrain_base(base: BaseLM, rng: Rng, steps: int = 150, batch_size: int = 32,
                  lr: float = 1e-2, length: tuple[int, int] = (4, 12)) -> BaseLM:
    """Brief LM pre-training on a generic corpus: GEN-framed strings of content
    tokens drawn from a fixed random bigram chain."""
    base = base.copy()
    V = base.vocab_size
    content = np.array(sorted(set(range(V)) - set(VOCAB.reserved_ids)))
    chain = rng.child("chain")
    trans = softmax_np(2.0 * chain.gaussian((len(content), len(content))))
    params = list(base.tensors().values())
    opt = Adam(params, lr=lr)
    for _ in range(steps):
        seqs = []
        for _ in range(batch_size):
            n = int(rng.integers(length[0], length[1] + 1))
            cur = int(rng.integers(0, len(content)))
            toks = [cur]
            for _ in range(n - 1):
                cur = int(rng.categorical(trans[cur]))
                toks.append(cur)
            seqs.append([GEN_ID] + [int(content[t]) for t in toks] + [VOCAB.eos])
        ids = _pad(seqs)
        mask = (np.arange(ids.shape[1] - 1)[None, :] < np.array([len(s) - 1 for s in seqs])[:, None])
        with Tape() as tape:
            lp = ops.pick(base_logprobs(base, None, ids[:, :-1]), ids[:, 1:])
            loss = ops.scale(ops.sum(ops.mul(lp, mask.astype(float))), -1.0 / len(seqs))
        opt.step(tape.backward(loss, wrt=params))
    return base


# ----------------------------------------------------------------------------
# Checkpoints

def save_checkpoint(path: str | Path, groups: dict[str, Params | dict], meta: dict | None = None) -> None:
    """Write named parameter groups as one JSON document.

    Layout::

        {"format": "ppsebm-checkpoint", "version": 1, "meta": {...},
         "tensors": {"<group>.<name>": {"shape": [...], "data": [...]}}}

    Floats are written with ``repr`` precision, so a load is bit-exact.
    """
    tensors = {}
    for group, params in groups.items():
        arrays = params.arrays() if isinstance(params, Params) else params
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            tensors[f"{group}.{name}"] = {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "meta": meta or {},
           "tensors": tensors}
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> tuple[dict[str, dict[str, np.ndarray]], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} document")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    groups: dict[str, dict[str, np.ndarray]] = {}
    for key, entry in doc["tensors"].items():
        group, name = key.split(".", 1)
        groups.setdefault(group, {})[name] = np.array(entry["data"], dtype=np.float64).reshape(
            entry["shape"])
    return groups, doc["meta"]
