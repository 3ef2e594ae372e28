"""Corpus ingestion, deterministic synthetic features, batch assembly.

The synthetic generator gives every alphabet character a fixed random
template of k frames; an utterance is its words' templates joined by short
silences, plus i.i.d. Gaussian noise. Ground-truth word spans come back
with the features, which makes window-alignment checks possible without
any real corpus. Philox (a counter-based, portable PRNG) drives all
randomness so corpora are reproducible across platforms.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .classifier import PaddedBatchFeatures
from .errors import BatchTooSmall, MissingAudioFile, ParseError, UnknownCharacter
from .frontend import AudioBuffer, compute_log_mel, load_melf, read_wav
from .negatives import (
    NegativeStrategy,
    SimilarCharMap,
    TrainingPair,
    make_training_pair,
    nearest_keyword,
    random_negative,
)

SYNTHETIC_PREFIX = "synthetic:"


@dataclass
class ManifestEntry:
    audio: str
    transcript: list[str]
    lang: str = "und"


def load_manifest(path, check_files=True) -> list[ManifestEntry]:
    """Read a JSONL manifest; one {audio, transcript, lang} object per line."""
    entries = []
    base = os.path.dirname(os.path.abspath(path))
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}: line {lineno}: invalid JSON ({e})") from e
            if not isinstance(obj, dict) or "audio" not in obj or "transcript" not in obj:
                raise ParseError(f"{path}: line {lineno}: needs 'audio' and 'transcript'")
            transcript = obj["transcript"]
            if isinstance(transcript, str):
                transcript = transcript.split()
            if not transcript:
                raise ParseError(f"{path}: line {lineno}: empty transcript")
            audio = str(obj["audio"])
            if check_files and not audio.startswith(SYNTHETIC_PREFIX):
                resolved = audio if os.path.isabs(audio) else os.path.join(base, audio)
                if not os.path.exists(resolved):
                    raise MissingAudioFile(f"{path}: line {lineno}: {resolved} not found")
            entries.append(ManifestEntry(audio=audio,
                                         transcript=[w.lower() for w in transcript],
                                         lang=str(obj.get("lang", "und"))))
    return entries


@dataclass
class SynthSpec:
    seed: int = 0
    chars_per_template: int = 6
    template_noise_std: float = 0.3
    silence_min: int = 2
    silence_max: int = 6
    feature_dim: int = 80
    alphabet: str = "abcdefghijklmnopqrstuvwxyz"
    rng_algorithm: str = "philox"  # fixed portable counter-based generator

    def to_json(self):
        return self.__dict__.copy()

    @classmethod
    def from_json(cls, d):
        return cls(**d)


@dataclass
class WordSpan:
    word: str
    start_frame: int
    end_frame: int  # exclusive


class SyntheticGenerator:
    """Deterministic feature synthesis from a SynthSpec."""

    def __init__(self, spec: SynthSpec):
        if spec.rng_algorithm != "philox":
            raise ValueError(f"unsupported rng algorithm {spec.rng_algorithm!r}")
        self.spec = spec
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(spec.seed)))
        k, d = spec.chars_per_template, spec.feature_dim
        self.templates = {
            ch: rng.standard_normal((k, d)).astype(np.float32)
            for ch in spec.alphabet
        }

    def _utterance_rng(self, utterance_id):
        return np.random.Generator(np.random.Philox(
            np.random.SeedSequence([self.spec.seed, int(utterance_id)])))

    def synthesize(self, words, utterance_id=0, noise=None):
        """Features plus exact frame spans for each word.

        Draw order is fixed: inter-word gap lengths first, then the noise
        matrix. ``noise=False`` disables the additive noise.
        """
        spec = self.spec
        if not words:
            raise ParseError("cannot synthesize an empty utterance")
        for w in words:
            for ch in w:
                if ch not in self.templates:
                    raise UnknownCharacter(f"{ch!r} not in the synthesis alphabet")
        rng = self._utterance_rng(utterance_id)
        gaps = rng.integers(spec.silence_min, spec.silence_max + 1,
                            size=max(0, len(words) - 1))

        k, d = spec.chars_per_template, spec.feature_dim
        pieces, spans = [], []
        cursor = 0
        for i, w in enumerate(words):
            block = np.concatenate([self.templates[ch] for ch in w], axis=0)
            pieces.append(block)
            spans.append(WordSpan(word=w, start_frame=cursor,
                                  end_frame=cursor + block.shape[0]))
            cursor += block.shape[0]
            if i < len(words) - 1:
                pieces.append(np.zeros((int(gaps[i]), d), dtype=np.float32))
                cursor += int(gaps[i])
        features = np.concatenate(pieces, axis=0)

        use_noise = spec.template_noise_std > 0 if noise is None else noise
        if use_noise:
            features = features + rng.normal(
                0.0, spec.template_noise_std, features.shape).astype(np.float32)
        return features.astype(np.float32), spans

    def decode_chars(self, features, spans):
        """Nearest-template decode of every character inside known spans.

        Independent separability oracle: returns (n_correct, n_total).
        """
        k = self.spec.chars_per_template
        names = sorted(self.templates)
        stack = np.stack([self.templates[ch] for ch in names])
        correct = total = 0
        for span in spans:
            for j, ch in enumerate(span.word):
                lo = span.start_frame + j * k
                block = features[lo: lo + k]
                dists = ((stack - block[None]) ** 2).sum(axis=(1, 2))
                total += 1
                correct += names[int(np.argmin(dists))] == ch
        return correct, total


def synthesize_utterance(words, spec: SynthSpec, utterance_id=0, noise=None):
    return SyntheticGenerator(spec).synthesize(words, utterance_id, noise)


# -- corpus loading ------------------------------------------------------------


@dataclass
class CorpusExample:
    features: np.ndarray
    transcript: list[str]
    lang: str = "und"


def entry_features(entry: ManifestEntry, base_dir, generator=None) -> np.ndarray:
    """Resolve a manifest entry to a feature matrix.

    WAV files go through the frontend, .melf files load from cache, and
    'synthetic:<id>' markers synthesize the entry's transcript on the fly
    (requires a generator).
    """
    audio = entry.audio
    if audio.startswith(SYNTHETIC_PREFIX):
        if generator is None:
            raise MissingAudioFile(f"{audio}: no synthesis spec available")
        utt_id = int(audio[len(SYNTHETIC_PREFIX):])
        features, _ = generator.synthesize(entry.transcript, utterance_id=utt_id)
        return features
    path = audio if os.path.isabs(audio) else os.path.join(base_dir, audio)
    if audio.endswith(".melf"):
        return load_melf(path).frames
    if audio.endswith(".wav"):
        return compute_log_mel(read_wav(path)).frames
    raise ParseError(f"{audio}: unsupported audio reference")


def load_corpus(manifest_path, generator=None) -> list[CorpusExample]:
    entries = load_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    return [CorpusExample(features=entry_features(e, base, generator),
                          transcript=e.transcript, lang=e.lang)
            for e in entries]


def corpus_vocabulary(examples) -> list[str]:
    """Sorted mining vocabulary: every eligible transcript word."""
    words = set()
    for ex in examples:
        words.update(w for w in ex.transcript if len(w) >= 3)
    return sorted(words)


# -- batch assembly -------------------------------------------------------------


@dataclass
class AssembledBatch:
    """Positive half then negative half, padded, with provenance."""

    features: PaddedBatchFeatures
    keywords: list[str]
    labels: np.ndarray
    strategies: list[NegativeStrategy | None]
    transcripts: list[list[str]]

    @property
    def size(self):
        return len(self.keywords)


def assemble_batch(examples, vocab, encoder, config, rng,
                   char_map=None) -> AssembledBatch:
    """Build B = 2 * len(examples) training examples.

    Each source utterance yields one positive and one negative. Nearest
    keyword negatives are resolved against this batch's positive-keyword
    embeddings under the encoder's current parameters.
    """
    if char_map is None:
        char_map = SimilarCharMap()
    pairs: list[TrainingPair] = []
    for ex in examples:
        pairs.append(make_training_pair(
            ex.features, ex.transcript, vocab, config.mixture, rng,
            char_map=char_map, n_subs=config.n_subs, sub_mode=config.sub_mode,
            alphabet=config.alphabet))

    pending = [p for p in pairs if p.strategy is NegativeStrategy.NEAREST_KEYWORD]
    if pending:
        positives = sorted({p.positive for p in pairs})
        with ad.no_grad():
            enc = encoder.encode_batch(positives)
        embeddings = {kw: enc.embedding(kw) for kw in positives}
        for p in pending:
            try:
                p.negative = nearest_keyword(p.positive, positives, embeddings,
                                             exclude=p.transcript)
            except BatchTooSmall:
                # every other positive sits in this transcript; fall back
                p.negative = random_negative(vocab, p.transcript, rng)
                p.strategy = NegativeStrategy.RANDOM

    features_list = [p.features for p in pairs] + [p.features for p in pairs]
    keywords = [p.positive for p in pairs] + [p.negative for p in pairs]
    labels = np.array([1] * len(pairs) + [0] * len(pairs), dtype=np.int64)
    strategies = [None] * len(pairs) + [p.strategy for p in pairs]
    transcripts = [p.transcript for p in pairs] * 2
    return AssembledBatch(
        features=PaddedBatchFeatures.from_list(features_list),
        keywords=keywords, labels=labels, strategies=strategies,
        transcripts=transcripts)
