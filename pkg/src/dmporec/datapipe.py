"""Rating logs to preference samples.

Raw rows are ``(user_id, item_title, rating, timestamp)``. Ratings above 3
are positive, the rest negative. Users need at least ``min_pos`` positive
and ``min_neg`` negative items after truncation to the most recent
``max_history`` events.

Each surviving user yields one :class:`PreferenceSample`: the prompt shows
the user's liked items (minus the candidate), then ``k`` candidate pairs that
each hold the held-out positive and one of ``k`` negatives drawn from the
user's own low-rated items. Pair order inside the prompt is a coin flip per
pair, so position carries no label information. ``meta["pair_prompts"]``
keeps the same prompt restricted to each single pair.
"""

from __future__ import annotations

import ast
import csv
import gzip
import io
import json
import logging
import re
import zlib
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, InsufficientNegatives

log = logging.getLogger(__name__)

POSITIVE = "positive"
NEGATIVE = "negative"

DEFAULT_TEMPLATE = (
    "{role} Here is the user's history of {nouns} they liked: {history}. "
    "Rank the likelihood of the user liking the two {nouns} {pairs} Answer:"
)
REQUIRED_PLACEHOLDERS = ("role", "history", "pairs")
DOMAIN_NOUNS = {"movie": "movies", "game": "games", "book": "books"}

_PAIR_RE = re.compile(r"<([^<>]*)>, <([^<>]*)>")


@dataclass(frozen=True)
class InteractionEvent:
    user_id: str
    item_title: str
    rating: float
    timestamp: int


@dataclass(frozen=True)
class LabeledItem:
    item_title: str
    label: str

    @property
    def positive(self) -> bool:
        return self.label == POSITIVE


@dataclass
class UserHistory:
    user_id: str
    items: list[LabeledItem]

    @property
    def pos_count(self) -> int:
        return sum(it.positive for it in self.items)

    @property
    def neg_count(self) -> int:
        return len(self.items) - self.pos_count

    @property
    def positives(self) -> list[LabeledItem]:
        return [it for it in self.items if it.positive]

    @property
    def negatives(self) -> list[LabeledItem]:
        return [it for it in self.items if not it.positive]


@dataclass
class PreferenceSample:
    prompt: str
    chosen: str
    rejected: list[str]
    positive_item: str
    negative_items: list[str]
    rng_tag: int
    meta: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return len(self.rejected)

    @property
    def user_id(self) -> str:
        return self.meta.get("user_id", "")

    def to_dict(self) -> dict:
        # field order is part of the file format
        return {
            "prompt": self.prompt,
            "chosen": self.chosen,
            "rejected": list(self.rejected),
            "positive_item": self.positive_item,
            "negative_items": list(self.negative_items),
            "rng_tag": self.rng_tag,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "PreferenceSample":
        return cls(obj["prompt"], obj["chosen"], list(obj["rejected"]),
                   obj["positive_item"], list(obj["negative_items"]),
                   int(obj["rng_tag"]), dict(obj.get("meta", {})))


@dataclass
class DatasetSplit:
    train: list[PreferenceSample]
    valid: list[PreferenceSample]
    test: list[PreferenceSample]

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.valid), len(self.test)

    def users(self, name: str) -> set[str]:
        return {s.user_id for s in getattr(self, name)}


# ---------------------------------------------------------------- labels


def label_rating(rating: float, row=None) -> str:
    if not 1 <= rating <= 5:
        where = f" (row {row})" if row is not None else ""
        raise DataError(f"rating {rating!r} outside [1, 5]{where}")
    return POSITIVE if rating > 3 else NEGATIVE


# ---------------------------------------------------------------- readers


def read_rating_rows(path, delimiter: str = "\t") -> list[InteractionEvent]:
    """Read ``user_id, item_title, rating, timestamp`` rows (UTF-8, no header)."""
    events = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter=delimiter), start=1):
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            events.append(_make_event(row, f"{path}:{lineno}"))
    return events


def write_rating_rows(events: Iterable[InteractionEvent], path, delimiter: str = "\t") -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        for e in events:
            rating = int(e.rating) if float(e.rating).is_integer() else e.rating
            w.writerow([e.user_id, e.item_title, rating, e.timestamp])


def _make_event(row, where) -> InteractionEvent:
    user, title, rating, ts = row
    try:
        rating_f = float(rating)
        ts_i = int(float(ts))
    except ValueError as exc:
        raise DataError(f"{where}: unparsable rating/timestamp {row!r}") from exc
    label_rating(rating_f, row=where)
    if not title.strip():
        raise DataError(f"{where}: empty item title")
    return InteractionEvent(str(user), title, rating_f, ts_i)


def load_movielens_1m(root) -> list[InteractionEvent]:
    """Native ML-1M files: ``ratings.dat`` joined with ``movies.dat`` for titles."""
    root = Path(root)
    titles = {}
    with open(root / "movies.dat", encoding="latin-1") as fh:
        for line in fh:
            if line.strip():
                movie_id, title, _genres = line.rstrip("\n").split("::")
                titles[movie_id] = title
    events = []
    with open(root / "ratings.dat", encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            user, movie_id, rating, ts = line.rstrip("\n").split("::")
            if movie_id not in titles:
                raise DataError(f"ratings.dat:{lineno}: unknown movie id {movie_id}")
            events.append(_make_event((user, titles[movie_id], rating, ts),
                                      f"ratings.dat:{lineno}"))
    return events


def _open_text(path):
    path = str(path)
    if path.endswith(".gz"):
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, encoding="utf-8")


def _parse_loose_json(line: str) -> dict:
    # the 2014 metadata dumps are python dict literals rather than JSON
    try:
        return json.loads(line)
    except json.JSONDecodeError:
        return ast.literal_eval(line)


def flatten_amazon(reviews_path, meta_path) -> list[InteractionEvent]:
    """Flatten an Amazon review dump plus its metadata into rating rows.

    Reviews need ``reviewerID``, ``asin``, ``overall``, ``unixReviewTime``;
    metadata needs ``asin`` and ``title``. Reviews of items without a title
    are dropped. Review text and brand are ignored.
    """
    titles = {}
    with _open_text(meta_path) as fh:
        for line in fh:
            if line.strip():
                obj = _parse_loose_json(line)
                title = (obj.get("title") or "").strip()
                if title:
                    titles[obj["asin"]] = title
    events = []
    dropped = 0
    with _open_text(reviews_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = _parse_loose_json(line)
            title = titles.get(obj["asin"])
            if title is None:
                dropped += 1
                continue
            events.append(_make_event(
                (obj["reviewerID"], title, obj["overall"], obj["unixReviewTime"]),
                f"{reviews_path}:{lineno}"))
    if dropped:
        log.info("dropped %d reviews of untitled items", dropped)
    return events


# ---------------------------------------------------------------- filtering


def filter_and_truncate(events: Iterable[InteractionEvent], min_pos: int = 5,
                        min_neg: int = 5, max_history: int = 40) -> list[UserHistory]:
    by_user: dict[str, list[InteractionEvent]] = defaultdict(list)
    for e in events:
        by_user[e.user_id].append(e)
    out = []
    for user in sorted(by_user):
        # stable sort keeps file order among equal timestamps
        evs = sorted(by_user[user], key=lambda e: e.timestamp)[-max_history:]
        items = [LabeledItem(e.item_title, label_rating(e.rating)) for e in evs]
        hist = UserHistory(user, items)
        if hist.pos_count >= min_pos and hist.neg_count >= min_neg:
            out.append(hist)
    return out


# ---------------------------------------------------------------- samples


def derive_seed(seed: int, user_id: str) -> int:
    return (int(seed) * 1_000_003 + zlib.crc32(user_id.encode("utf-8"))) % (2**31 - 1)


def sample_negatives(history: UserHistory, positive: LabeledItem, k: int, seed,
                     exclude: Iterable[str] = ()) -> list[str]:
    """Draw ``k`` distinct negatives from the user's own low-rated items.

    ``seed`` is an int or a ``numpy.random.Generator``.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    banned = set(exclude) | {positive.item_title}
    eligible = []
    for it in history.negatives:
        if it.item_title not in banned and it.item_title not in eligible:
            eligible.append(it.item_title)
    if len(eligible) < k:
        raise InsufficientNegatives(
            f"user {history.user_id}: {len(eligible)} eligible negatives, need {k}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    # a permutation prefix, so the first j negatives do not depend on k
    picks = rng.permutation(len(eligible))[:k]
    return [eligible[i] for i in picks]


def check_template(template: str) -> None:
    missing = [p for p in REQUIRED_PLACEHOLDERS if "{" + p + "}" not in template]
    if missing:
        raise ConfigError(f"prompt template lacks placeholder(s): {', '.join(missing)}")


def role_line(domain: str) -> str:
    return f"You are an assistant working on {domain} recommendations."


def render_pair(first: str, second: str) -> str:
    return f"<{first}>, <{second}>"


def render_answer(positive: str, negatives: Sequence[str]) -> str:
    """Chosen answer: the positive ahead of every negative, one pair per negative."""
    return "; ".join(render_pair(positive, neg) for neg in negatives)


def parse_answer(text: str) -> list[tuple[str, str]]:
    return _PAIR_RE.findall(text)


def build_preference_sample(history: Sequence[str], positive: str, negatives: Sequence[str],
                            template: str = DEFAULT_TEMPLATE, seed: int = 0,
                            domain: str = "movie", user_id: str = "") -> PreferenceSample:
    check_template(template)
    if not negatives:
        raise ConfigError("at least one negative is required")
    rng = np.random.default_rng(seed)
    flips = rng.random(len(negatives)) < 0.5
    ordered = [(positive, neg) if pos_first else (neg, positive)
               for neg, pos_first in zip(negatives, flips)]

    def render(pairs):
        return template.format(
            role=role_line(domain),
            nouns=DOMAIN_NOUNS.get(domain, domain + "s"),
            history=", ".join(f"<{t}>" for t in history),
            pairs=" ".join(f"({i}) <{a}> and <{b}>" for i, (a, b) in enumerate(pairs, start=1)),
        )

    prompt = render(ordered)
    chosen = render_answer(positive, negatives)
    rejected = [render_pair(neg, positive) for neg in negatives]
    meta = {"user_id": user_id, "domain": domain, "history": list(history),
            "pos_first": [bool(f) for f in flips],
            # the same prompt restricted to pair i, in the same order
            "pair_prompts": [render([p]) for p in ordered]}
    return PreferenceSample(prompt, chosen, rejected, positive, list(negatives), int(seed), meta)


def sample_from_history(history: UserHistory, k: int, seed: int, template: str = DEFAULT_TEMPLATE,
                        domain: str = "movie", max_prompt_items: int = 10) -> PreferenceSample:
    """One sample per user: the most recent liked item is the held-out positive."""
    positives = history.positives
    if len(positives) < 2:
        raise InsufficientNegatives(f"user {history.user_id}: needs 2+ liked items")
    target = positives[-1]
    window = [it.item_title for it in positives[:-1] if it.item_title != target.item_title]
    window = window[-max_prompt_items:]
    tag = derive_seed(seed, history.user_id)
    rng = np.random.default_rng(tag)
    negatives = sample_negatives(history, target, k, rng, exclude=window)
    return build_preference_sample(window, target.item_title, negatives, template,
                                   seed=tag, domain=domain, user_id=history.user_id)


def build_pool(histories: Iterable[UserHistory], k: int, seed: int,
               template: str = DEFAULT_TEMPLATE, domain: str = "movie",
               max_prompt_items: int = 10) -> list[PreferenceSample]:
    pool = []
    for hist in histories:
        try:
            pool.append(sample_from_history(hist, k, seed, template, domain, max_prompt_items))
        except InsufficientNegatives as exc:
            log.info("skipping sample: %s", exc)
    return pool


def validate_sample(s: PreferenceSample) -> None:
    """Raise ``DataError`` if ``s`` breaks any structural invariant."""
    k = len(s.rejected)
    if k < 1 or len(s.negative_items) != k:
        raise DataError(f"sample {s.user_id}: need k>=1 matching negatives")
    if len(set(s.negative_items)) != k:
        raise DataError(f"sample {s.user_id}: duplicate negatives")
    shown = set(s.meta.get("history", []))
    if shown & set(s.negative_items) or s.positive_item in shown:
        raise DataError(f"sample {s.user_id}: candidate leaks into prompt history")
    chosen_pairs = parse_answer(s.chosen)
    if chosen_pairs != [(s.positive_item, n) for n in s.negative_items]:
        raise DataError(f"sample {s.user_id}: chosen answer malformed")
    for i, rej in enumerate(s.rejected):
        if parse_answer(rej) != [chosen_pairs[i][::-1]]:
            raise DataError(f"sample {s.user_id}: rejected[{i}] is not chosen pair {i} flipped")
    prompts = s.meta.get("pair_prompts")
    if prompts is not None:
        if len(prompts) != k:
            raise DataError(f"sample {s.user_id}: {len(prompts)} pair prompts for k={k}")
        if k == 1 and prompts[0] != s.prompt:
            raise DataError(f"sample {s.user_id}: single pair prompt differs from the prompt")


# ---------------------------------------------------------------- splits


def _perm_users(samples: Sequence[PreferenceSample], seed: int) -> list[PreferenceSample]:
    by_user = {}
    for s in samples:
        if s.user_id in by_user:
            raise DataError(f"user {s.user_id!r} has more than one sample")
        by_user[s.user_id] = s
    users = sorted(by_user)
    order = np.random.default_rng(seed).permutation(len(users))
    return [by_user[users[i]] for i in order]


def make_splits(samples: Sequence[PreferenceSample], sizes=(100, 100, 1000),
                seed: int = 0) -> DatasetSplit:
    n_tr, n_va, n_te = sizes
    need = n_tr + n_va + n_te
    if len(samples) < need:
        raise DataError(f"need {need} users for splits {tuple(sizes)}, only {len(samples)} available")
    shuffled = _perm_users(samples, seed)
    return DatasetSplit(shuffled[:n_tr], shuffled[n_tr:n_tr + n_va],
                        shuffled[n_tr + n_va:need])


def cross_domain_splits(source: Sequence[PreferenceSample], target: Sequence[PreferenceSample],
                        sizes=(100, 100, 1000), seed: int = 0) -> DatasetSplit:
    """Train on ``source``; validate and test on ``target`` users not used for training."""
    if source is target:
        return make_splits(source, sizes, seed)
    n_tr, n_va, n_te = sizes
    src = _perm_users(source, seed)
    if len(src) < n_tr:
        raise DataError(f"source pool has {len(src)} users, need {n_tr}")
    train = src[:n_tr]
    used = {s.user_id for s in train}
    tgt = [s for s in _perm_users(target, seed + 1) if s.user_id not in used]
    if len(tgt) < n_va + n_te:
        raise DataError(f"target pool has {len(tgt)} usable users, need {n_va + n_te}")
    return DatasetSplit(train, tgt[:n_va], tgt[n_va:n_va + n_te])


def pair_prompt(s: PreferenceSample, i: int) -> str:
    """Prompt showing only candidate pair ``i`` of ``s``."""
    prompts = s.meta.get("pair_prompts")
    if prompts is None:
        if s.k == 1:
            return s.prompt
        raise DataError(f"sample {s.user_id!r} carries no per-pair prompts")
    return prompts[i]


def single_pair_view(s: PreferenceSample) -> PreferenceSample:
    """The sample cut down to its first negative.

    Negative draws and pair orders are prefix-stable, so this equals the
    sample that would have been built with ``k=1``.
    """
    if s.k == 1:
        return s
    meta = dict(s.meta)
    meta["pos_first"] = list(meta.get("pos_first", []))[:1]
    meta["pair_prompts"] = [pair_prompt(s, 0)]
    return PreferenceSample(pair_prompt(s, 0), render_pair(s.positive_item, s.negative_items[0]),
                            s.rejected[:1], s.positive_item, s.negative_items[:1], s.rng_tag, meta)


def eval_view(split: DatasetSplit) -> DatasetSplit:
    """Keep train as is; valid and test become single-pair samples.

    With several pairs in one prompt the positive is the only title shown in
    every pair, which gives away the answer; single-pair prompts do not.
    """
    return DatasetSplit(split.train, [single_pair_view(s) for s in split.valid],
                        [single_pair_view(s) for s in split.test])


# ---------------------------------------------------------------- io


def dumps_sample(s: PreferenceSample) -> str:
    return json.dumps(s.to_dict(), ensure_ascii=False)


def write_jsonl(samples: Iterable[PreferenceSample], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(dumps_sample(s) + "\n")


def read_jsonl(path) -> list[PreferenceSample]:
    with open(path, encoding="utf-8") as fh:
        return [PreferenceSample.from_dict(json.loads(line)) for line in fh if line.strip()]


def write_split(split: DatasetSplit, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in ("train", "valid", "test"):
        write_jsonl(getattr(split, name), out_dir / f"split.{name}.jsonl")


def read_split(out_dir) -> DatasetSplit:
    out_dir = Path(out_dir)
    return DatasetSplit(*(read_jsonl(out_dir / f"split.{n}.jsonl") for n in ("train", "valid", "test")))
