"""Tabular records -> template sentences -> word-level token ids."""

from __future__ import annotations

import enum
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError

PAD_ID = 0
UNK_ID = 1
MAX_TOKENS = 64


class Region(str, enum.Enum):
    FRONTAL = "frontal"
    PARIETAL = "parietal"
    TEMPORAL = "temporal"
    OCCIPITAL = "occipital"
    CEREBELLAR = "cerebellar"

    def __str__(self) -> str:
        return self.value


REGIONS: tuple[Region, ...] = tuple(Region)
GENDERS = ("male", "female")


@dataclass(frozen=True)
class TabularRecord:
    age_at_diagnosis: int
    gender: str
    lesions: tuple[Region, ...] = ()

    def __post_init__(self):
        if not isinstance(self.age_at_diagnosis, (int, np.integer)) or not 0 <= self.age_at_diagnosis <= 120:
            raise ContractError(f"age_at_diagnosis must be an integer in [0, 120], got {self.age_at_diagnosis!r}")
        if self.gender not in GENDERS:
            raise ContractError(f"gender must be one of {GENDERS}, got {self.gender!r}")
        lesions = tuple(Region(r) for r in self.lesions)
        if len(set(lesions)) != len(lesions):
            raise ContractError(f"duplicate lesion regions in {[r.value for r in lesions]}")
        object.__setattr__(self, "age_at_diagnosis", int(self.age_at_diagnosis))
        object.__setattr__(self, "lesions", lesions)

    @property
    def label_set(self) -> frozenset[Region]:
        return frozenset(self.lesions)

    def to_json(self) -> dict:
        return {
            "age_at_diagnosis": self.age_at_diagnosis,
            "gender": self.gender,
            "lesions": [r.value for r in self.lesions],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TabularRecord":
        expected = {"age_at_diagnosis", "gender", "lesions"}
        if set(obj) != expected:
            raise ContractError(f"record fields must be exactly {sorted(expected)}, got {sorted(obj)}")
        return cls(obj["age_at_diagnosis"], obj["gender"], tuple(obj["lesions"]))


def record_to_sentence(record: TabularRecord) -> str:
    parts = [
        f"The age of the subject is {record.age_at_diagnosis}.",
        f"The gender of the patient is {record.gender}.",
    ]
    for i, region in enumerate(record.lesions):
        if i == 0:
            parts.append(f"A tumor has been identified in the {region.value} area of the brain.")
        else:
            parts.append(f"Additionally, a lesion is present in the {region.value} area.")
    return " ".join(parts)


def region_prompt(region: Region | str) -> str:
    return f"There is a lesion in the {Region(region).value} section"


def words(text: str) -> list[str]:
    return re.sub(r"[.,]", "", text.lower()).split()


@dataclass
class Vocabulary:
    """Word list; ``tokens[i]`` has id ``i + 2`` (0 = padding, 1 = unknown)."""

    tokens: list[str]
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self._index = {t: i + 2 for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens) + 2

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id_of(self, word: str) -> int:
        return self._index.get(word, UNK_ID)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def build_vocab(corpus: Sequence[str]) -> Vocabulary:
    """Ids by descending word frequency, ties broken lexicographically."""
    if not corpus:
        raise ContractError("cannot build a vocabulary from an empty corpus")
    counts = Counter(w for text in corpus for w in words(text))
    ordered = sorted(counts, key=lambda w: (-counts[w], w))
    return Vocabulary(ordered)


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray
    length: int
    truncated: bool = False

    @property
    def mask(self) -> np.ndarray:
        return self.ids != PAD_ID


def tokenize(text: str, vocab: Vocabulary, max_tokens: int = MAX_TOKENS) -> TokenSequence:
    toks = [vocab.id_of(w) for w in words(text)]
    truncated = len(toks) > max_tokens
    toks = toks[:max_tokens]
    ids = np.zeros(max_tokens, dtype=np.int64)
    ids[: len(toks)] = toks
    return TokenSequence(ids, len(toks), truncated)


def template_corpus() -> list[str]:
    """Sentences covering every word the templates and prompts can emit."""
    out = []
    for age in range(121):
        for gender in GENDERS:
            out.append(record_to_sentence(TabularRecord(age, gender, REGIONS)))
    out.extend(region_prompt(r) for r in REGIONS)
    return out


def stack_tokens(seqs: Iterable[TokenSequence]) -> np.ndarray:
    return np.stack([s.ids for s in seqs])
