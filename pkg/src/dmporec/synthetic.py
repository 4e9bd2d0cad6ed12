"""Synthetic rating logs with latent genre preferences.

Every genre owns a pool of *shared* title words used in all domains, plus a
pool of words specific to each domain. A title is two shared words and one
domain word from a single genre, in random order. Each user likes one genre
and rates its items 4-5; items from other genres get 1-3. A small fraction
of ratings is flipped to the other side as noise.

Two domains built from the same word seed share the genre words, which makes
them related but not identical (the cross-domain setting).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datapipe import InteractionEvent

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
           "br", "dr", "gr", "kr", "pl", "st", "tr", "sk", "sh", "th"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou", "ea"]
_CODAS = ["", "n", "r", "s", "x", "l", "m", "k"]


@dataclass
class SyntheticConfig:
    n_users: int = 1400
    n_genres: int = 6
    shared_words: int = 5
    domain_words: int = 5
    min_items: int = 24
    max_items: int = 40
    liked_fraction: float = 0.5
    noise: float = 0.03
    word_seed: int = 12345
    seed: int = 0


def _pseudowords(n: int, rng: np.random.Generator, taken: set[str]) -> list[str]:
    out = []
    while len(out) < n:
        syl = [rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(2)]
        word = ("".join(syl) + rng.choice(_CODAS)).capitalize()
        if word not in taken:
            taken.add(word)
            out.append(word)
    return out


class GenreWorld:
    """Deterministic genre word pools, shared by every domain built from one seed."""

    def __init__(self, n_genres: int = 6, shared_words: int = 5, domain_words: int = 5,
                 domains=("movie", "game"), word_seed: int = 12345):
        rng = np.random.default_rng(word_seed)
        taken: set[str] = set()
        self.n_genres = n_genres
        self.shared = [_pseudowords(shared_words, rng, taken) for _ in range(n_genres)]
        self.domain = {d: [_pseudowords(domain_words, rng, taken) for _ in range(n_genres)]
                       for d in domains}

    def title(self, domain: str, genre: int, rng: np.random.Generator) -> str:
        a, b = rng.choice(self.shared[genre], size=2, replace=False)
        c = rng.choice(self.domain[domain][genre])
        words = [a, b, c]
        rng.shuffle(words)
        return " ".join(words)

    def genre_of_word(self, word: str) -> int | None:
        for g in range(self.n_genres):
            if word in self.shared[g] or any(word in pools[g] for pools in self.domain.values()):
                return g
        return None


def generate_events(cfg: SyntheticConfig, domain: str = "movie",
                    world: GenreWorld | None = None, user_prefix: str | None = None
                    ) -> list[InteractionEvent]:
    """Rating rows for ``cfg.n_users`` users in ``domain``.

    User ids are ``<prefix><index>``; the prefix defaults to the domain's
    first letter so pools of different domains never share users.
    """
    if world is None:
        world = GenreWorld(cfg.n_genres, cfg.shared_words, cfg.domain_words,
                           word_seed=cfg.word_seed)
    prefix = domain[0] if user_prefix is None else user_prefix
    rng = np.random.default_rng([cfg.seed, sum(map(ord, domain))])
    events = []
    for u in range(cfg.n_users):
        uid = f"{prefix}{u:05d}"
        liked = int(rng.integers(cfg.n_genres))
        others = [g for g in range(cfg.n_genres) if g != liked]
        n = int(rng.integers(cfg.min_items, cfg.max_items + 1))
        ts = 1_000_000_000 + int(rng.integers(0, 10**7))
        seen = set()
        for _ in range(n):
            is_liked = rng.random() < cfg.liked_fraction
            genre = liked if is_liked else int(rng.choice(others))
            title = world.title(domain, genre, rng)
            if title in seen:
                continue
            seen.add(title)
            if rng.random() < cfg.noise:
                is_liked = not is_liked
            rating = int(rng.integers(4, 6)) if is_liked else int(rng.integers(1, 4))
            ts += int(rng.integers(60, 86_400))
            events.append(InteractionEvent(uid, title, float(rating), ts))
    return events


def catalog_corpus(world: GenreWorld, domains=("movie", "game"), n_docs: int = 2000,
                   items_per_doc: int = 6, seed: int = 0) -> list[str]:
    """Unlabeled catalog text: lists of same-genre titles from one domain.

    No users and no ratings are involved; it only tells a model which title
    words go together, the kind of prior a pretrained language model has.
    """
    rng = np.random.default_rng([seed, 7])
    docs = []
    for _ in range(n_docs):
        domain = domains[int(rng.integers(len(domains)))]
        genre = int(rng.integers(world.n_genres))
        titles = [world.title(domain, genre, rng) for _ in range(items_per_doc)]
        docs.append(", ".join(f"<{t}>" for t in titles))
    return docs
