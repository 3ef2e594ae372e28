"""Hard-negative keyword generation.

Four strategies: a random vocabulary word, character substitution with
acoustically similar letters, concatenation of a random word onto the
positive, and the in-batch nearest keyword by text-embedding cosine
distance. Every strategy guarantees the result does not occur in the
source transcript.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import (
    BatchTooSmall,
    CollisionUnresolvable,
    DegenerateEmbedding,
    ExhaustedVocabulary,
    KeywordTooShort,
    NoEligibleKeyword,
)

MIN_KEYWORD_CHARS = 3
_RESAMPLE_ATTEMPTS = 8

_SIMILAR_PAIRS = [("s", "z"), ("p", "b"), ("t", "d"), ("k", "g"), ("f", "v"),
                  ("c", "k"), ("m", "n"), ("i", "y"), ("a", "e"), ("o", "u")]


class NegativeStrategy(str, Enum):
    RANDOM = "random"
    CHAR_SUB = "charsub"
    CONCAT = "concat"
    NEAREST_KEYWORD = "nk"


DEFAULT_MIXTURE = {
    NegativeStrategy.RANDOM: 0.25,
    NegativeStrategy.CHAR_SUB: 0.25,
    NegativeStrategy.CONCAT: 0.25,
    NegativeStrategy.NEAREST_KEYWORD: 0.25,
}

EVAL_MIXTURE = {
    NegativeStrategy.RANDOM: 1 / 3,
    NegativeStrategy.CHAR_SUB: 1 / 3,
    NegativeStrategy.CONCAT: 1 / 3,
}


def normalize_mixture(mixture):
    """Validate weights and scale them to sum to 1."""
    mix = {NegativeStrategy(k): float(v) for k, v in mixture.items() if float(v) != 0.0}
    if not mix:
        raise ValueError("strategy mixture is empty")
    if any(w < 0 for w in mix.values()):
        raise ValueError("strategy weights must be non-negative")
    total = sum(mix.values())
    return {k: w / total for k, w in mix.items()}


class SimilarCharMap:
    """Acoustically similar character substitutions, e.g. s->z, p->b."""

    def __init__(self, mapping=None):
        if mapping is None:
            mapping = {}
            for a, b in _SIMILAR_PAIRS:
                mapping.setdefault(a, []).append(b)
                mapping.setdefault(b, []).append(a)
        self.mapping = {}
        for ch, subs in mapping.items():
            if len(ch) != 1 or any(len(s) != 1 for s in subs):
                raise ValueError(f"similar-char map entries must be single characters: {ch!r}")
            if ch in subs:
                raise ValueError(f"character {ch!r} maps to itself")
            self.mapping[ch] = list(subs)

    def get(self, ch):
        return self.mapping.get(ch)

    @classmethod
    def from_json_file(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls(json.load(f))

    def to_json(self):
        return {k: list(v) for k, v in self.mapping.items()}


def _candidates(vocab, transcript):
    excluded = set(transcript)
    return sorted(w for w in set(vocab) if w not in excluded)


def random_negative(vocab, transcript, rng) -> str:
    """Uniform draw from the vocabulary minus the transcript's words."""
    cands = _candidates(vocab, transcript)
    if not cands:
        raise ExhaustedVocabulary("no vocabulary word outside the transcript")
    return cands[int(rng.integers(len(cands)))]


def char_substitute(keyword, char_map: SimilarCharMap, rng, n_subs=1,
                    mode="similar", alphabet="abcdefghijklmnopqrstuvwxyz",
                    transcript=(), positions=None) -> str:
    """Replace 1..2 characters; 'similar' mode prefers the confusion map.

    Unmapped characters (or 'random' mode) draw a different random
    alphabet letter. Resamples up to 8 times if the result lands in the
    transcript.
    """
    if len(keyword) < 2:
        raise KeywordTooShort(f"cannot substitute within {keyword!r}")
    if mode not in ("similar", "random"):
        raise ValueError(f"unknown substitution mode {mode!r}")
    n_subs = min(n_subs, len(keyword))
    transcript = set(transcript)

    for _ in range(_RESAMPLE_ATTEMPTS):
        pos = (np.asarray(positions, dtype=np.int64) if positions is not None
               else rng.choice(len(keyword), size=n_subs, replace=False))
        chars = list(keyword)
        for p in pos:
            orig = chars[p]
            subs = char_map.get(orig) if mode == "similar" else None
            if subs is None:
                subs = [c for c in alphabet if c != orig]
            chars[p] = subs[int(rng.integers(len(subs)))]
        result = "".join(chars)
        if result != keyword and result not in transcript:
            return result
    raise CollisionUnresolvable(f"could not find a substitution for {keyword!r} "
                                f"outside its transcript")


def concat_negative(keyword, vocab, transcript, rng) -> str:
    """Concatenate a random other word before or after the positive."""
    cands = _candidates(vocab, transcript)
    if not cands:
        raise ExhaustedVocabulary("no vocabulary word outside the transcript")
    transcript = set(transcript)
    for _ in range(_RESAMPLE_ATTEMPTS):
        other = cands[int(rng.integers(len(cands)))]
        result = other + keyword if int(rng.integers(2)) == 0 else keyword + other
        if result not in transcript:
            return result
    raise ExhaustedVocabulary(f"every concatenation for {keyword!r} collides "
                              f"with its transcript")


def cosine_distance(a, b):
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise DegenerateEmbedding("zero-norm keyword embedding")
    return 1.0 - float(np.dot(a, b)) / (na * nb)


def nearest_keyword(keyword, batch_keywords, embeddings, exclude=()) -> str:
    """Argmin cosine distance over the batch's other keywords.

    ``embeddings`` maps keyword -> vector. ``exclude`` removes words of the
    positive's own transcript (they would be false negatives). Ties break
    lexicographically.
    """
    exclude = set(exclude) | {keyword}
    cands = sorted(k for k in set(batch_keywords) if k not in exclude)
    if not cands:
        raise BatchTooSmall("no other keyword in the batch to mine from")
    target = embeddings[keyword]
    best, best_dist = None, np.inf
    for cand in cands:
        dist = cosine_distance(target, embeddings[cand])
        if dist < best_dist:
            best, best_dist = cand, dist
    return best


@dataclass
class TrainingPair:
    """One positive and one negative example over the same features."""

    features: np.ndarray
    transcript: list[str]
    positive: str
    negative: str | None          # None until NK is resolved in-batch
    strategy: NegativeStrategy


def eligible_keywords(transcript):
    return [w for w in transcript if len(w) >= MIN_KEYWORD_CHARS]


def pick_strategy(mixture, rng) -> NegativeStrategy:
    items = sorted(mixture.items(), key=lambda kv: kv[0].value)
    u = float(rng.random())
    acc = 0.0
    for strategy, weight in items:
        acc += weight
        if u < acc:
            return strategy
    return items[-1][0]


def make_training_pair(features, transcript, vocab, mixture, rng,
                       char_map=None, n_subs=1, sub_mode="similar",
                       alphabet="abcdefghijklmnopqrstuvwxyz") -> TrainingPair:
    """Sample a positive keyword and produce its negative.

    Nearest-keyword negatives are deferred (negative=None); they need the
    batch context and are resolved at assembly time.
    """
    eligible = eligible_keywords(transcript)
    if not eligible:
        raise NoEligibleKeyword(f"no transcript word of >= {MIN_KEYWORD_CHARS} chars")
    positive = eligible[int(rng.integers(len(eligible)))]
    strategy = pick_strategy(normalize_mixture(mixture), rng)

    if char_map is None:
        char_map = SimilarCharMap()
    if strategy is NegativeStrategy.RANDOM:
        negative = random_negative(vocab, transcript, rng)
    elif strategy is NegativeStrategy.CHAR_SUB:
        negative = char_substitute(positive, char_map, rng, n_subs=n_subs,
                                   mode=sub_mode, alphabet=alphabet,
                                   transcript=transcript)
    elif strategy is NegativeStrategy.CONCAT:
        negative = concat_negative(positive, vocab, transcript, rng)
    else:
        negative = None
    return TrainingPair(features=features, transcript=list(transcript),
                        positive=positive, negative=negative, strategy=strategy)
