"""Matrix-factorization baseline trained with the BPR pairwise loss.

Items are keyed by title, the only item feature the language-model pipeline
sees. Training triples come from the train split only:

* ``(u, liked, negative)`` for the held-out positive and every history item
  against each of the sample's negatives;
* ``(u, history item, random catalog item)``.

Valid/test users are never trained on. Like the language model, which reads
their liked items in the prompt, they are represented through that history:
their vector is the mean of the known history item vectors (fold-in).
Without any known history item the user vector is zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .datapipe import DatasetSplit, InteractionEvent, PreferenceSample
from .evalkit import EvalReport, auc, pairwise_accuracy
from .objectives import bpr_loss, bpr_loss_grad
from .trainer import Adam


@dataclass
class BprConfig:
    dim: int = 32
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 256
    reg: float = 1e-4
    init_std: float = 0.1
    seed: int = 0


@dataclass
class MfParams:
    users: dict[str, int]
    items: dict[str, int]
    U: np.ndarray
    V: np.ndarray
    history: list[float] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.U.shape[1]


def mf_score(params: MfParams, user: str, item: str) -> float:
    """Dot product of user and item factors; unknown ids use a zero vector."""
    u = params.users.get(user)
    i = params.items.get(item)
    if u is None or i is None:
        return 0.0
    return float(params.U[u] @ params.V[i])


def user_vector(params: MfParams, user: str, history: Sequence[str] = ()) -> np.ndarray:
    """Learned vector for a train user, else the fold-in mean of known history items."""
    u = params.users.get(user)
    if u is not None:
        return params.U[u]
    rows = [params.items[h] for h in history if h in params.items]
    if not rows:
        return np.zeros(params.dim)
    return params.V[rows].mean(axis=0)


def _triples(samples: Sequence[PreferenceSample], catalog: Sequence[str],
             rng: np.random.Generator):
    trip = []
    for s in samples:
        hist = s.meta.get("history", [])
        liked = [s.positive_item, *hist]
        trip.extend((s.user_id, p, n) for p in liked for n in s.negative_items)
        seen = set(liked) | set(s.negative_items)
        for h, j in zip(liked, rng.integers(0, len(catalog), size=len(liked))):
            if catalog[j] not in seen:
                trip.append((s.user_id, h, catalog[j]))
    return trip


def train_bpr(split: DatasetSplit, cfg: BprConfig | None = None,
              events: Iterable[InteractionEvent] | None = None) -> tuple[MfParams, EvalReport]:
    """Fit user/item factors with minibatch Adam on the BPR loss; evaluate on test.

    The item table covers the titles of the train split; ``events`` only
    widens the catalog used to draw random negatives.
    """
    cfg = cfg or BprConfig()
    rng = np.random.default_rng(cfg.seed)
    titles = set()
    for s in split.train:
        titles.update(s.meta.get("history", []))
        titles.add(s.positive_item)
        titles.update(s.negative_items)
    if events is not None:
        titles.update(e.item_title for e in events)
    catalog = sorted(titles)
    trip = _triples(split.train, catalog, rng) if catalog else []

    users = {u: i for i, u in enumerate(sorted({t[0] for t in trip}))}
    items = {t: i for i, t in enumerate(catalog)}
    U = rng.normal(0, cfg.init_std, (len(users), cfg.dim))
    V = rng.normal(0, cfg.init_std, (len(items), cfg.dim))
    params = MfParams(users, items, U, V)
    if trip and cfg.epochs > 0:
        tu = np.array([users[t[0]] for t in trip])
        ti = np.array([items[t[1]] for t in trip])
        tj = np.array([items[t[2]] for t in trip])
        tables = {"U": U, "V": V}
        opt = Adam(["U", "V"], tables)
        for _ in range(cfg.epochs):
            order = rng.permutation(len(trip))
            total = 0.0
            for start in range(0, len(order), cfg.batch_size):
                b = order[start:start + cfg.batch_size]
                u, i, j = tu[b], ti[b], tj[b]
                pu, qi, qj = U[u], V[i], V[j]
                x_pos = (pu * qi).sum(1)
                x_neg = (pu * qj).sum(1)
                total += float(np.sum(bpr_loss(x_pos, x_neg)))
                c = bpr_loss_grad(x_pos, x_neg)[:, None] / len(b)
                gU = np.zeros_like(U)
                gV = np.zeros_like(V)
                np.add.at(gU, u, c * (qi - qj) + cfg.reg * pu / len(b))
                np.add.at(gV, i, c * pu + cfg.reg * qi / len(b))
                np.add.at(gV, j, -c * pu + cfg.reg * qj / len(b))
                opt.step(tables, {"U": gU, "V": gV}, cfg.lr)
            params.history.append(total / len(trip))
    return params, evaluate_mf(params, split.test)


def _item_vector(params: MfParams, item: str) -> np.ndarray:
    i = params.items.get(item)
    return params.V[i] if i is not None else np.zeros(params.dim)


def evaluate_mf(params: MfParams, samples: Sequence[PreferenceSample]) -> EvalReport:
    """Pooled AUC of dot-product scores over each sample's candidates."""
    pos, neg, records = [], [], []
    for s in samples:
        u = user_vector(params, s.user_id, s.meta.get("history", []))
        ps = float(u @ _item_vector(params, s.positive_item))
        ns = [float(u @ _item_vector(params, n)) for n in s.negative_items]
        pos.append(ps)
        neg.extend(ns)
        records.append({"user_id": s.user_id, "pos_score": ps, "neg_scores": ns})
    mp, mn = float(np.mean(pos)), float(np.mean(neg))
    return EvalReport(auc(pos, neg), mp, mn, mp - mn, pairwise_accuracy(records),
                      "mf-dot", len(records), 0, records)
