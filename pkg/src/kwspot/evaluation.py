"""Offline evaluation: mixed-negative pair construction and scoring."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .classifier import PaddedBatchFeatures, stack_norm_params
from .data import corpus_vocabulary
from .errors import NoEligibleKeyword
from .metrics import build_report
from .negatives import (
    EVAL_MIXTURE,
    NegativeStrategy,
    SimilarCharMap,
    make_training_pair,
    normalize_mixture,
)


@dataclass
class EvalItem:
    features: np.ndarray
    keyword: str
    label: int
    strategy: str | None


def build_eval_pairs(examples, mixture=None, rng=None, pairs_per_utterance=1,
                     char_map=None, n_subs=1, sub_mode="similar",
                     alphabet="abcdefghijklmnopqrstuvwxyz"):
    """One positive and one strategy-drawn negative per utterance visit.

    Nearest-keyword negatives need in-batch embeddings and are not
    meaningful offline, so the mixture may only use the string-based
    strategies (random, charsub, concat).
    """
    mixture = normalize_mixture(EVAL_MIXTURE if mixture is None else mixture)
    if NegativeStrategy.NEAREST_KEYWORD in mixture:
        raise ValueError("nearest-keyword negatives are train-time only")
    if rng is None:
        rng = np.random.Generator(np.random.Philox(0))
    if char_map is None:
        char_map = SimilarCharMap()

    vocab = corpus_vocabulary(examples)
    items = []
    for ex in examples:
        for _ in range(pairs_per_utterance):
            try:
                pair = make_training_pair(ex.features, ex.transcript, vocab,
                                          mixture, rng, char_map=char_map,
                                          n_subs=n_subs, sub_mode=sub_mode,
                                          alphabet=alphabet)
            except NoEligibleKeyword:
                break
            items.append(EvalItem(ex.features, pair.positive, 1, None))
            items.append(EvalItem(ex.features, pair.negative, 0,
                                  pair.strategy.value))
    return items


def score_items(encoder, classifier, items, batch_size=64):
    """Probabilities for (utterance, keyword) items; keywords encoded once."""
    distinct = sorted({it.keyword for it in items})
    with ad.no_grad():
        enc = encoder.encode_batch(distinct)
        norm = {kw: enc.norm_params(kw) for kw in distinct}
        scores = np.empty(len(items), dtype=np.float64)
        for lo in range(0, len(items), batch_size):
            chunk = items[lo: lo + batch_size]
            batch = PaddedBatchFeatures.from_list([it.features for it in chunk])
            gain_rows, bias_rows = stack_norm_params(
                [norm[it.keyword] for it in chunk], classifier.dtype)
            feats = [batch.example(i) for i in range(len(chunk))]
            probs = classifier.forward_graph(feats, gain_rows, bias_rows)
            scores[lo: lo + len(chunk)] = probs.data
    return scores


def evaluate(encoder, classifier, examples, mixture=None, rng=None,
             pairs_per_utterance=1, threshold=0.5, batch_size=64):
    """Score a corpus against mixed negatives and build the metric report."""
    items = build_eval_pairs(examples, mixture, rng,
                             pairs_per_utterance=pairs_per_utterance)
    scores = score_items(encoder, classifier, items, batch_size=batch_size)
    labels = np.array([it.label for it in items], dtype=np.int64)
    strategies = [it.strategy for it in items]
    report = build_report(scores, labels, strategies, threshold=threshold)
    return report, items, scores
