"""Word-level tokenizer with standalone item-marker tokens.

Text is split into words and single punctuation characters; ``<``, ``>``
and ``,`` are always their own tokens so item titles stay delimited.
Ids 0..6 are reserved and fixed:

    0 <pad>   1 <unk>   2 <bos>   3 <eos>   4 <   5 >   6 ,
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigError

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
RESERVED = (PAD, UNK, BOS, EOS, "<", ">", ",")
PAD_ID, UNK_ID, BOS_ID, EOS_ID, LT_ID, GT_ID, COMMA_ID = range(len(RESERVED))
UNK_GLYPH = "�"

_TOKEN_RE = re.compile(r"[<>,]|\w+(?:['\-]\w+)*|[^\w\s]")
_NO_SPACE_BEFORE = frozenset({">", ",", ".", ")", ":", ";", "!", "?", "]"})
_NO_SPACE_AFTER = frozenset({"<", "(", "["})


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def detokenize(tokens: Sequence[str]) -> str:
    out: list[str] = []
    prev = None
    for tok in tokens:
        if out and tok not in _NO_SPACE_BEFORE and prev not in _NO_SPACE_AFTER:
            out.append(" ")
        out.append(tok)
        prev = tok
    return "".join(out)


def normalize(text: str) -> str:
    """Canonical spacing: what ``decode(encode(text))`` returns when no UNKs occur."""
    return detokenize(tokenize(text))


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    prompt_len: int

    def __post_init__(self):
        if not 0 <= self.prompt_len <= len(self.ids):
            raise ValueError(
                f"prompt_len {self.prompt_len} outside [0, {len(self.ids)}]")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def completion(self) -> tuple[int, ...]:
        return self.ids[self.prompt_len:]


@dataclass
class Vocabulary:
    tokens: list[str]
    token_to_id: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:len(RESERVED)]) != RESERVED:
            raise ConfigError("vocabulary must start with the reserved tokens")
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise ConfigError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def to_json(self) -> str:
        reserved = {name: i for i, name in enumerate(RESERVED)}
        return json.dumps({"version": 1, "reserved": reserved, "tokens": self.tokens},
                          ensure_ascii=False, indent=1)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        for name, idx in obj["reserved"].items():
            if RESERVED[idx] != name:
                raise ConfigError(f"reserved id table mismatch at {name!r}")
        return cls(list(obj["tokens"]))


def build_vocab(corpus: Iterable[str], cap: int) -> Vocabulary:
    """Frequency-ranked word vocabulary, truncated to ``cap`` entries in total.

    Ties in frequency are broken alphabetically so the result does not depend
    on corpus order.
    """
    if cap < len(RESERVED):
        raise ConfigError(f"vocabulary cap {cap} is below the {len(RESERVED)} reserved tokens")
    counts: Counter[str] = Counter()
    n_docs = 0
    for text in corpus:
        n_docs += 1
        counts.update(tokenize(text))
    if n_docs == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    for tok in RESERVED:
        counts.pop(tok, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    words = [w for w, _ in ranked[: cap - len(RESERVED)]]
    return Vocabulary(list(RESERVED) + words)


def encode(text: str, vocab: Vocabulary, completion: str | None = None) -> TokenSequence:
    """Encode ``text`` (the prompt) optionally followed by a completion.

    A BOS id is prepended. ``prompt_len`` covers BOS plus the prompt tokens,
    so it equals ``len(encode(text, vocab))``.
    """
    ids = [BOS_ID] + [vocab.id_of(t) for t in tokenize(text)]
    prompt_len = len(ids)
    if completion is not None:
        ids.extend(vocab.id_of(t) for t in tokenize(completion))
    return TokenSequence(tuple(ids), prompt_len)


def decode(seq: TokenSequence | Sequence[int], vocab: Vocabulary) -> str:
    ids = seq.ids if isinstance(seq, TokenSequence) else seq
    toks = []
    for i in ids:
        if i in (BOS_ID, EOS_ID, PAD_ID):
            continue
        toks.append(UNK_GLYPH if i == UNK_ID else vocab.tokens[i])
    return detokenize(toks)
