"""Candidate scoring, AUC and probability-gap reports.

A candidate is scored as the completion ``<title>`` right after the prompt.
``token-mean`` averages the per-token conditional probabilities;
``joint-over-n`` divides the joint probability by the token count.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .datapipe import PreferenceSample
from .errors import ConfigError
from .seqmodel import PolicyPair, TransformerLM
from .tokenizer import Vocabulary, encode, tokenize

log = logging.getLogger(__name__)

MODES = ("token-mean", "joint-over-n")


@dataclass
class CandidateScore:
    candidate_text: str
    n_tokens: int
    score: float
    per_token_prob: list[float]
    tokens: list[str] = field(default_factory=list)


@dataclass
class EvalReport:
    auc: float
    mean_pos_score: float
    mean_neg_score: float
    gap: float
    pairwise_accuracy: float
    mode: str
    n_samples: int
    n_skipped: int = 0
    records: list[dict] = field(default_factory=list)

    def to_dict(self, with_records: bool = True) -> dict:
        d = asdict(self)
        if not with_records:
            d.pop("records")
        return d

    def to_json(self, with_records: bool = True) -> str:
        return json.dumps(self.to_dict(with_records), indent=1)


def _model(m) -> TransformerLM:
    return m.policy if isinstance(m, PolicyPair) else m


def aggregate(per_token_prob: Sequence[float], mode: str = "token-mean") -> float:
    p = np.asarray(per_token_prob, dtype=np.float64)
    if p.size == 0:
        raise ValueError("cannot score an empty candidate")
    if mode == "token-mean":
        return float(p.mean())
    if mode == "joint-over-n":
        return float(np.exp(np.log(p).sum()) / p.size)
    raise ConfigError(f"unknown scoring mode {mode!r}; expected one of {MODES}")


def score_candidate(model, prompt: str, candidate_text: str, vocab: Vocabulary,
                    mode: str = "token-mean") -> CandidateScore:
    """Score ``candidate_text`` as the continuation of ``prompt``."""
    toks = tokenize(candidate_text)
    if not toks:
        raise ValueError("empty candidate")
    seq = encode(prompt, vocab, completion=candidate_text)
    res = _model(model).logprobs(seq)
    probs = np.exp(res.per_token_logp)
    return CandidateScore(candidate_text, len(probs), aggregate(probs, mode), probs.tolist(), toks)


def auc(pos_scores: Sequence[float], neg_scores: Sequence[float]) -> float:
    """Probability a positive outranks a negative, ties counted one half.

    Computed from average ranks (Mann-Whitney U).
    """
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auc needs at least one positive and one negative score")
    allv = np.concatenate([pos, neg])
    uniq, inv, counts = np.unique(allv, return_inverse=True, return_counts=True)
    # 1-based average rank of each distinct value
    upper = np.cumsum(counts)
    avg_rank = upper - (counts - 1) / 2.0
    rank_sum = avg_rank[inv[:pos.size]].sum()
    u = rank_sum - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def pairwise_accuracy(records: Sequence[dict]) -> float:
    """Mean over samples of the within-sample positive-vs-negative pair outcome."""
    vals = []
    for r in records:
        p = r["pos_score"]
        vals.extend(1.0 if p > n else 0.5 if p == n else 0.0 for n in r["neg_scores"])
    return float(np.mean(vals)) if vals else float("nan")


def evaluate_split(model, samples: Sequence[PreferenceSample], vocab: Vocabulary,
                   mode: str = "token-mean") -> EvalReport:
    """Score each sample's positive and negative candidates; pooled AUC."""
    if mode not in MODES:
        raise ConfigError(f"unknown scoring mode {mode!r}")
    m = _model(model)
    pos_all, neg_all, records = [], [], []
    skipped = 0
    for s in samples:
        if not s.positive_item or not s.negative_items:
            log.info("skipping sample %s: missing candidates", s.user_id)
            skipped += 1
            continue
        ps = score_candidate(m, s.prompt, f"<{s.positive_item}>", vocab, mode).score
        ns = [score_candidate(m, s.prompt, f"<{n}>", vocab, mode).score for n in s.negative_items]
        pos_all.append(ps)
        neg_all.extend(ns)
        records.append({"user_id": s.user_id, "pos_score": ps, "neg_scores": ns})
    if not records:
        raise ValueError("no scorable samples")
    mp, mn = float(np.mean(pos_all)), float(np.mean(neg_all))
    return EvalReport(auc(pos_all, neg_all), mp, mn, mp - mn, pairwise_accuracy(records),
                      mode, len(records), skipped, records)


def case_study_dump(before, after, sample: PreferenceSample, vocab: Vocabulary,
                    mode: str = "token-mean") -> list[dict]:
    """Per-token conditional probabilities of every candidate under two models."""
    mb, ma = _model(before), _model(after)
    if mb.cfg.vocab_size != ma.cfg.vocab_size:
        raise ConfigError(
            f"vocabulary mismatch: {mb.cfg.vocab_size} vs {ma.cfg.vocab_size} tokens")
    out = []
    cands = [(sample.positive_item, "positive")] + [(n, "negative") for n in sample.negative_items]
    for title, label in cands:
        text = f"<{title}>"
        b = score_candidate(mb, sample.prompt, text, vocab, mode)
        a = score_candidate(ma, sample.prompt, text, vocab, mode)
        rows = [{"token": t, "prob_before": pb, "prob_after": pa}
                for t, pb, pa in zip(b.tokens, b.per_token_prob, a.per_token_prob)]
        out.append({"candidate": title, "label": label, "score_before": b.score,
                    "score_after": a.score, "tokens": rows})
    return out


def format_case_study(dump: list[dict]) -> str:
    lines = []
    for c in dump:
        lines.append(f"{c['label']:<8} {c['candidate']}  "
                     f"score {c['score_before']:.4f} -> {c['score_after']:.4f}")
        for r in c["tokens"]:
            lines.append(f"    {r['token']:<16} {r['prob_before']:.4f}  {r['prob_after']:.4f}")
    return "\n".join(lines)
