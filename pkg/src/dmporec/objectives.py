"""SFT, DMPO/DPO and BPR losses with analytic gradients.

Sequence log-probabilities are sums over completion tokens only. For one
chosen completion ``y_w`` and ``k`` rejected completions ``y_l`` sharing a
prompt, with implicit reward ``r(y) = beta * (log pi(y) - log pi_ref(y))``::

    loss = -log sigmoid(r(y_w) - mean_i r(y_l_i))
    grad = -beta * w * (grad log pi(y_w) - mean_i grad log pi(y_l_i))
    w    = sigmoid(mean_i r(y_l_i) - r(y_w))

``w`` is large when the rewards currently rank the pair the wrong way.
DPO is the ``k == 1`` case.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .seqmodel import PolicyPair
from .tokenizer import TokenSequence


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    ex = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))


def neg_log_sigmoid(z):
    """``-log sigmoid(z)`` without overflow for large ``|z|``."""
    return softplus(-np.asarray(z, dtype=np.float64))


@dataclass
class DmpoConfig:
    beta: float = 0.1
    k: int = 1

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigError(f"beta must be > 0, got {self.beta}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")


@dataclass
class LossOutput:
    loss: float
    grads: dict[str, np.ndarray] | None = None
    aux: dict[str, float] = field(default_factory=dict)


@dataclass
class DmpoTerms:
    loss: float
    weight: float
    chosen_reward: float
    rejected_rewards: np.ndarray

    @property
    def mean_rejected_reward(self) -> float:
        return float(np.mean(self.rejected_rewards))

    @property
    def margin(self) -> float:
        return self.chosen_reward - self.mean_rejected_reward


def implicit_reward_from_logps(policy_logp: float, ref_logp: float, beta: float) -> float:
    return beta * (policy_logp - ref_logp)


def dmpo_terms(policy_chosen: float, ref_chosen: float, policy_rejected: Sequence[float],
               ref_rejected: Sequence[float], beta: float) -> DmpoTerms:
    """Scalar DMPO quantities from completion log-probabilities."""
    pr = np.asarray(policy_rejected, dtype=np.float64)
    rr = np.asarray(ref_rejected, dtype=np.float64)
    if pr.size == 0:
        raise ValueError("at least one rejected completion is required")
    if pr.shape != rr.shape:
        raise ValueError("policy and reference rejected log-probs differ in length")
    r_w = beta * (policy_chosen - ref_chosen)
    r_l = beta * (pr - rr)
    z = r_w - r_l.mean()
    return DmpoTerms(float(neg_log_sigmoid(z)), float(sigmoid(-z)), float(r_w), r_l)


# ---------------------------------------------------------------- model-level


def _aux(t: DmpoTerms) -> dict[str, float]:
    return {"chosen_reward": t.chosen_reward,
            "mean_rejected_reward": t.mean_rejected_reward,
            "margin": t.margin}


def sft_loss(pair: PolicyPair, seq: TokenSequence, with_grad: bool = True) -> LossOutput:
    """Negative completion log-likelihood under the policy."""
    if len(seq.completion) == 0:
        raise ValueError("SFT needs a non-empty completion")
    pol = pair.policy
    if not with_grad:
        return LossOutput(-pol.logprobs(seq).sum_logp)
    res, grads = pol.grad_logprob(seq, coef=-1.0)
    return LossOutput(-res.sum_logp, {n: grads[n] for n in pol.trainable})


def implicit_reward(pair: PolicyPair, seq: TokenSequence, beta: float) -> float:
    return implicit_reward_from_logps(pair.policy.logprobs(seq).sum_logp,
                                      pair.reference.logprobs(seq).sum_logp, beta)


def dmpo_loss(pair: PolicyPair, chosen: TokenSequence, rejected: Sequence[TokenSequence],
              cfg: DmpoConfig, ref_logps: Sequence[float] | None = None,
              with_grad: bool = True) -> LossOutput:
    """DMPO loss and its analytic gradient over the policy's trainable parameters.

    ``ref_logps`` optionally supplies reference log-probabilities for
    ``[chosen, *rejected]`` (the trainer caches them since the reference is
    frozen).
    """
    if len(rejected) == 0:
        raise ValueError("dmpo_loss needs at least one rejected completion")
    if len(rejected) != cfg.k:
        raise ValueError(f"got {len(rejected)} rejected completions but k={cfg.k}")
    seqs = [chosen, *rejected]
    if ref_logps is None:
        ref_logps = [pair.reference.logprobs(s).sum_logp for s in seqs]
    elif len(ref_logps) != len(seqs):
        raise ValueError("ref_logps must cover the chosen and every rejected completion")

    pol = pair.policy
    runs = []
    for s in seqs:
        rows = np.arange(s.prompt_len - 1, len(s.ids) - 1)
        targets = np.asarray(s.completion, dtype=np.int64)
        if len(targets) == 0:
            raise ValueError("empty completion")
        logp, cache = pol.forward(s.ids, rows)
        runs.append((logp, cache, targets, float(logp[np.arange(len(rows)), targets].sum())))

    terms = dmpo_terms(runs[0][3], ref_logps[0], [r[3] for r in runs[1:]], ref_logps[1:], cfg.beta)
    out = LossOutput(terms.loss, aux=_aux(terms))
    if not with_grad:
        return out

    k = len(rejected)
    coefs = [-cfg.beta * terms.weight] + [cfg.beta * terms.weight / k] * k
    grads = pol.zero_grads()
    for (logp, cache, targets, _), c in zip(runs, coefs):
        dlogp = np.zeros_like(logp)
        dlogp[np.arange(len(targets)), targets] = c
        pol.backward(cache, dlogp, grads)
    out.grads = {n: grads[n] for n in pol.trainable}
    return out


def dpo_loss(pair: PolicyPair, chosen: TokenSequence, rejected: TokenSequence, beta: float = 0.1,
             ref_logps: Sequence[float] | None = None, with_grad: bool = True) -> LossOutput:
    return dmpo_loss(pair, chosen, [rejected], DmpoConfig(beta=beta, k=1), ref_logps, with_grad)


# ---------------------------------------------------------------- BPR


def bpr_loss(score_pos, score_neg):
    """``-ln sigmoid(score_pos - score_neg)``; elementwise on arrays."""
    out = neg_log_sigmoid(np.asarray(score_pos, dtype=np.float64) - np.asarray(score_neg, dtype=np.float64))
    return float(out) if out.ndim == 0 else out


def bpr_loss_grad(score_pos, score_neg):
    """Derivative of :func:`bpr_loss` w.r.t. ``score_pos`` (its negative w.r.t. ``score_neg``)."""
    diff = np.asarray(score_pos, dtype=np.float64) - np.asarray(score_neg, dtype=np.float64)
    return -sigmoid(-diff)
