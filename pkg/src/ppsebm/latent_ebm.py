"""Latent-space energy-based prior, short-run Langevin samplers and EBM training.

The prior over latents is an exponential tilt of the standard normal,
``p_alpha(z) ∝ exp(f_alpha(z)) N(z; 0, I)``, where ``f_alpha`` is the negative
energy. Scores never touch the normalizer:

    prior score      = grad_z f_alpha(z) - z
    posterior score  = prior score + grad_z log p_beta(x | z)

Learning follows the contrastive updates

    alpha += eta0 * mean_i [grad_alpha f(z_i+) - grad_alpha f(z_i-)]
    beta  += eta1 * mean_i  grad_beta log p_beta(x_i | z_i+)

with z- drawn by prior Langevin and z+ by posterior Langevin, both started
from N(0, I) and run for a fixed number of steps.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .diffcore import NonFiniteError, Params, Rng, ShapeError, Tape, Tensor, ops
from .seqmodel import DecoderParams, InferenceNetParams, decoder_loglik_batch


class LangevinDivergence(NonFiniteError):
    def __init__(self, chain: int, step: int):
        super().__init__(f"Langevin chain {chain} became non-finite at step {step}")
        self.chain, self.step = chain, step


class EBMDivergence(NonFiniteError):
    def __init__(self, task: int, iteration: int, detail: str = ""):
        msg = f"EBM training diverged at task {task}, iteration {iteration}"
        super().__init__(msg + (f": {detail}" if detail else ""))
        self.task, self.iteration = task, iteration


# ----------------------------------------------------------------------------
# Priors

@dataclass
class MLPPrior(Params):
    """f(z) = w3 . tanh(W2 tanh(W1 z + b1) + b2) + b3."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor

    @property
    def dim(self) -> int:
        return self.w1.shape[0]

    @classmethod
    def init(cls, dim: int, rng: Rng, hidden: int = 64, scale: float = 0.1) -> "MLPPrior":
        g = lambda *s: Tensor(rng.gaussian(s) * scale, requires_grad=True)  # noqa: E731
        z = lambda *s: Tensor(np.zeros(s), requires_grad=True)  # noqa: E731
        return cls(g(dim, hidden), z(hidden), g(hidden, hidden), z(hidden), g(hidden, 1), z(1))

    @classmethod
    def zeros(cls, dim: int, hidden: int = 64) -> "MLPPrior":
        z = lambda *s: Tensor(np.zeros(s), requires_grad=True)  # noqa: E731
        return cls(z(dim, hidden), z(hidden), z(hidden, hidden), z(hidden), z(hidden, 1), z(1))

    def negative_energy(self, z: Tensor) -> Tensor:
        h = ops.tanh(ops.add(ops.matmul(z, self.w1), self.b1))
        h = ops.tanh(ops.add(ops.matmul(h, self.w2), self.b2))
        out = ops.add(ops.matmul(h, self.w3), self.b3)
        return ops.reshape(out, (z.shape[0],))


@dataclass
class LinearPrior(Params):
    """f(z) = a . z (+ c); a tractable tilt for checks."""

    a: Tensor
    c: Tensor = field(default_factory=lambda: Tensor(np.zeros(1), requires_grad=True))

    @property
    def dim(self) -> int:
        return self.a.shape[0]

    def negative_energy(self, z: Tensor) -> Tensor:
        return ops.add(ops.matmul(z, self.a), self.c)


@dataclass
class QuadraticPrior(Params):
    """f(z) = q * |z|^2 (+ c); with q = -1/4 the prior is N(0, 2/3 I)."""

    q: Tensor
    dim: int = 1
    c: Tensor = field(default_factory=lambda: Tensor(np.zeros(1), requires_grad=True))

    def negative_energy(self, z: Tensor) -> Tensor:
        sq = ops.sum(ops.mul(z, z), axis=1)
        return ops.add(ops.mul(sq, self.q), self.c)


def _prior_dim(alpha) -> int:
    return alpha.dim


def f_alpha(alpha, z) -> Tensor:
    """Negative energy at a single latent vector, as a scalar tensor."""
    z = ops.as_tensor(z)
    if z.ndim != 1 or z.shape[0] != _prior_dim(alpha):
        raise ShapeError(f"latent shape {z.shape} does not match prior dim {_prior_dim(alpha)}")
    return ops.sum(alpha.negative_energy(ops.reshape(z, (1, z.shape[0]))))


def _check_batch(alpha, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != _prior_dim(alpha):
        raise ShapeError(f"latent batch {z.shape} does not match prior dim {_prior_dim(alpha)}")
    return z


def grad_f_z(alpha, z: np.ndarray) -> np.ndarray:
    z = _check_batch(alpha, z)
    zt = Tensor(z, requires_grad=True)
    with Tape() as tape:
        total = ops.sum(alpha.negative_energy(zt))
    return tape.backward(total, wrt=[zt])[zt]


def prior_score(alpha, z: np.ndarray) -> np.ndarray:
    """grad_z log p_alpha(z) = grad_z f(z) - z for a batch (n, d)."""
    z = _check_batch(alpha, z)
    return grad_f_z(alpha, z) - z


def grad_loglik_z(beta: DecoderParams, z: np.ndarray, seqs: Sequence[Sequence[int]]) -> np.ndarray:
    zt = Tensor(np.asarray(z, dtype=np.float64), requires_grad=True)
    frozen = DecoderParams(**{k: t.detach() for k, t in beta.tensors().items()})
    with Tape() as tape:
        total = ops.sum(decoder_loglik_batch(frozen, seqs, zt))
    return tape.backward(total, wrt=[zt])[zt]


def posterior_score(alpha, beta: DecoderParams, z: np.ndarray,
                    seqs: Sequence[Sequence[int]]) -> np.ndarray:
    """grad_z [f(z) - |z|^2/2 + log p_beta(x | z)]; row i pairs with ``seqs[i]``."""
    z = _check_batch(alpha, z)
    if len(seqs) != z.shape[0]:
        raise ShapeError(f"{z.shape[0]} latents for {len(seqs)} sequences")
    return prior_score(alpha, z) + grad_loglik_z(beta, z, seqs)


# ----------------------------------------------------------------------------
# Langevin

@dataclass
class LangevinConfig:
    k0: int = 20
    k1: int = 20
    s0: float = 0.1
    s1: float = 0.1

    def __post_init__(self):
        if self.k0 < 0 or self.k1 < 0:
            raise ValueError("Langevin step counts must be nonnegative")
        if self.s0 < 0 or self.s1 < 0:
            raise ValueError("Langevin step sizes must be nonnegative")


def langevin(score_fn: Callable[[np.ndarray], np.ndarray], n: int, dim: int, steps: int,
             step_size: float, rng: Rng) -> np.ndarray:
    """Run ``n`` independent chains z <- z + s * score(z) + sqrt(2 s) * eps from N(0, I)."""
    if steps < 0 or step_size < 0:
        raise ValueError("steps and step_size must be nonnegative")
    z = rng.gaussian((n, dim))
    noise_scale = math.sqrt(2.0 * step_size)
    for k in range(steps):
        eps = rng.gaussian((n, dim))
        with np.errstate(over="ignore", invalid="ignore"):  # checked just below
            z = z + step_size * score_fn(z) + noise_scale * eps
        bad = ~np.all(np.isfinite(z), axis=1)
        if bad.any():
            raise LangevinDivergence(int(np.flatnonzero(bad)[0]), k + 1)
    return z


def sample_prior(alpha, n: int, cfg: LangevinConfig, rng: Rng) -> np.ndarray:
    return langevin(lambda z: prior_score(alpha, z), n, _prior_dim(alpha), cfg.k0, cfg.s0, rng)


def sample_posterior(alpha, beta: DecoderParams, seqs: Sequence[Sequence[int]],
                     cfg: LangevinConfig, rng: Rng) -> np.ndarray:
    return langevin(lambda z: posterior_score(alpha, beta, z, seqs), len(seqs),
                    _prior_dim(alpha), cfg.k1, cfg.s1, rng)


# ----------------------------------------------------------------------------
# Parameter updates

def prior_gradient(alpha, z_plus: np.ndarray, z_minus: np.ndarray):
    """mean grad_alpha f(z+) - mean grad_alpha f(z-), as a gradient map."""
    z_plus, z_minus = _check_batch(alpha, z_plus), _check_batch(alpha, z_minus)
    if z_plus.shape[0] != z_minus.shape[0] or z_plus.shape[0] < 1:
        raise ShapeError(f"batch sizes differ: {z_plus.shape[0]} vs {z_minus.shape[0]}")
    params = list(alpha.tensors().values())
    with Tape() as tape:
        obj = ops.sub(ops.mean(alpha.negative_energy(Tensor(z_plus))),
                      ops.mean(alpha.negative_energy(Tensor(z_minus))))
    return tape.backward(obj, wrt=params)


def update_prior(alpha, z_plus: np.ndarray, z_minus: np.ndarray, eta0: float):
    """One contrastive ascent step on the prior."""
    return alpha.apply_update(prior_gradient(alpha, z_plus, z_minus), eta0)


def generator_gradient(beta: DecoderParams, seqs: Sequence[Sequence[int]], z_plus: np.ndarray):
    z_plus = np.asarray(z_plus, dtype=np.float64)
    if len(seqs) != z_plus.shape[0]:
        raise ShapeError(f"{len(seqs)} sequences for {z_plus.shape[0]} latents")
    params = list(beta.tensors().values())
    with Tape() as tape:
        obj = ops.mean(decoder_loglik_batch(beta, seqs, Tensor(z_plus)))
    return obj.item(), tape.backward(obj, wrt=params)


def update_generator(beta: DecoderParams, seqs: Sequence[Sequence[int]], z_plus: np.ndarray,
                     eta1: float) -> DecoderParams:
    """One ascent step on the mean reconstruction log-likelihood."""
    _, grads = generator_gradient(beta, seqs, z_plus)
    return beta.apply_update(grads, eta1)


def _clip(grads, max_norm: float | None):
    if max_norm is None:
        return grads
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    return type(grads)({k: g * (max_norm / norm) for k, g in grads.items()})


# ----------------------------------------------------------------------------
# Partition function diagnostic

def estimate_logZ(alpha, n: int, rng: Rng, chunk: int = 100_000) -> float:
    """log E_{N(0,I)}[exp f(z)] by Monte Carlo (diagnostic only)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    vals = []
    left = n
    while left > 0:
        m = min(chunk, left)
        z = rng.gaussian((m, _prior_dim(alpha)))
        vals.append(alpha.negative_energy(Tensor(z)).data)
        left -= m
    f = np.concatenate(vals)
    top = f.max()
    return float(top + np.log(np.mean(np.exp(f - top))))


# ----------------------------------------------------------------------------
# Training loop

@dataclass
class EBMTrainConfig:
    iterations: int = 500        # T, per task
    eta0: float = 1e-4
    eta1: float = 1e-3
    batch_size: int = 16
    clip_norm: float | None = None


@dataclass
class EBMState:
    alpha: MLPPrior
    beta: DecoderParams
    psi: InferenceNetParams | None = None
    t: int = 0
    m: int = 0
    tasks: list[str] = field(default_factory=list)

    @classmethod
    def init(cls, vocab_size: int, rng: Rng, latent_dim: int = 16, embed_dim: int = 32,
             hidden: int = 64, prior_hidden: int = 64, with_inference_net: bool = True):
        return cls(MLPPrior.init(latent_dim, rng.child("alpha"), prior_hidden),
                   DecoderParams.init(vocab_size, rng.child("beta"), embed_dim, hidden, latent_dim),
                   InferenceNetParams.init(vocab_size, rng.child("psi"), embed_dim, hidden)
                   if with_inference_net else None)

    def copy(self) -> "EBMState":
        return EBMState(self.alpha.copy(), self.beta.copy(),
                        None if self.psi is None else self.psi.copy(), self.t, self.m,
                        list(self.tasks))

    def checksum(self) -> str:
        return self.alpha.checksum() + self.beta.checksum()


def train_ebm(state: EBMState, tasks: Sequence[tuple[str, Sequence[Sequence[int]]]],
              langevin_cfg: LangevinConfig, train_cfg: EBMTrainConfig, rng: Rng,
              log: list | None = None) -> EBMState:
    """Train the prior and generator on each task in turn, T iterations per task.

    ``tasks`` holds (name, sequences) with sequences as decoder targets
    (serialized pairs without the leading GEN). Each iteration draws z- from
    the prior, z+ from the posterior of the batch, then applies the prior
    and generator updates. Per-iteration records are appended to ``log``.
    """
    if not tasks:
        raise ValueError("train_ebm needs at least one task")
    state = state.copy()
    b = train_cfg.batch_size
    for name, seqs in tasks:
        if len(seqs) == 0:
            raise ValueError(f"task {name!r} has no sequences")
        state.m += 1
        task_rng = rng.child("task", state.m, name)
        order = np.array([], dtype=np.int64)
        for t in range(1, train_cfg.iterations + 1):
            if order.size < b:
                order = np.concatenate([order, task_rng.permutation(len(seqs))])
            idx, order = order[:b], order[b:]
            batch = [seqs[i] for i in idx]
            try:
                z_minus = sample_prior(state.alpha, len(batch), langevin_cfg, task_rng.child("neg", t))
                z_plus = sample_posterior(state.alpha, state.beta, batch, langevin_cfg,
                                          task_rng.child("pos", t))
                new_alpha = update_prior(state.alpha, z_plus, z_minus, train_cfg.eta0)
                recon, grads = generator_gradient(state.beta, batch, z_plus)
                new_beta = state.beta.apply_update(_clip(grads, train_cfg.clip_norm),
                                                   train_cfg.eta1)
            except NonFiniteError as e:
                raise EBMDivergence(state.m, t, str(e)) from e
            state.alpha, state.beta = new_alpha, new_beta
            state.t += 1
            if log is not None:
                energy = -float(np.mean(state.alpha.negative_energy(Tensor(z_plus)).data))
                log.append({"iteration": state.t, "task": name, "mean_energy": energy,
                            "mean_recon_loglik": recon})
        state.tasks.append(name)
    return state


def write_log(records: list[dict], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
