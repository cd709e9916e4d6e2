"""Word-level vocabulary and tokenizer for the bundled encoder."""
from __future__ import annotations

import hashlib
import re
from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

PAD, UNK, MASK, BOS, EOS = "<pad>", "<unk>", "<mask>", "<s>", "</s>"
SPECIALS = (PAD, UNK, MASK, BOS, EOS)
CASE_POLICIES = ("preserve", "lower")

_TOKEN_RE = re.compile(r"<mask>|\w+|[^\w\s]", re.UNICODE)
_APOSTROPHES = str.maketrans({"’": "'", "‘": "'", "ʼ": "'"})


def normalize(text: str) -> str:
    """Map typographic apostrophes to ASCII."""
    return text.translate(_APOSTROPHES)


def split_words(text: str, case_policy: str = "preserve") -> list[str]:
    """Split into word and punctuation tokens; ``<mask>`` survives as one token."""
    tokens = _TOKEN_RE.findall(normalize(text))
    if case_policy == "lower":
        tokens = [t if t == MASK else t.lower() for t in tokens]
    return tokens


class VocabError(ValueError):
    pass


class Vocabulary:
    def __init__(self, tokens: Sequence[str], case_policy: str = "preserve"):
        if case_policy not in CASE_POLICIES:
            raise VocabError(f"unknown case policy {case_policy!r}")
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise VocabError("vocabulary must start with the special tokens")
        if len(set(tokens)) != len(tokens):
            raise VocabError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self.case_policy = case_policy
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        self.pad_id, self.unk_id, self.mask_id, self.bos_id, self.eos_id = range(len(SPECIALS))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(range(len(SPECIALS)))

    def tokenize(self, text: str) -> list[str]:
        return split_words(text, self.case_policy)

    def encode(self, text: str, add_delimiters: bool = False) -> list[int]:
        ids = [self.index.get(tok, self.unk_id) for tok in self.tokenize(text)]
        if add_delimiters:
            ids = [self.bos_id] + ids + [self.eos_id]
        return ids

    def decode(self, ids: Iterable[int], skip_delimiters: bool = True) -> str:
        skip = {self.bos_id, self.eos_id, self.pad_id} if skip_delimiters else set()
        return " ".join(self.tokens[i] for i in ids if i not in skip)

    def to_text(self) -> str:
        return "".join(tok + "\n" for tok in self.tokens)

    @property
    def hash(self) -> str:
        digest = hashlib.sha256()
        digest.update(self.case_policy.encode())
        digest.update(b"\0")
        digest.update(self.to_text().encode("utf-8"))
        return digest.hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path, case_policy: str = "preserve") -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls(text.split("\n")[:-1] if text.endswith("\n") else text.split("\n"), case_policy)


def build_vocab(corpus: Sequence[str], min_freq: int = 1, case_policy: str = "preserve") -> Vocabulary:
    """Collect word tokens with frequency >= ``min_freq``.

    Ids after the specials are assigned by descending frequency, then
    lexicographically, so the result is independent of corpus order.
    """
    if not corpus:
        raise VocabError("empty corpus")
    counts: Counter = Counter()
    for line in corpus:
        counts.update(t for t in split_words(line, case_policy) if t not in SPECIALS)
    kept = sorted((tok for tok, n in counts.items() if n >= min_freq), key=lambda t: (-counts[t], t))
    if not kept:
        raise VocabError(f"no token reaches min_freq={min_freq}")
    return Vocabulary(list(SPECIALS) + kept, case_policy)
