"""Keyword registry: cached per-keyword parameters, shared audio encoding.

Registering a keyword runs the text encoder once and caches the resulting
normalization parameters; ``score_all`` then encodes the utterance through
the keyword-independent prefix a single time and re-runs only the adaptive
blocks and head per keyword. Probabilities are bit-identical to the
uncached forward path.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from . import autodiff as ad
from .classifier import stack_norm_params
from .errors import EmptyRegistry, ParseError
from .frontend import MelSpectrogram
from .text_encoder import KeywordNormParams

_REGISTRY_MAGIC = b"KWRG"


class KeywordRegistry:
    """keyword -> (normalization parameters, text embedding) cache.

    The registry snapshots the text encoder's parameters at construction,
    so cached entries stay consistent even if the source encoder trains
    on; build a new registry to pick up new parameters.
    """

    def __init__(self, encoder, classifier):
        self._encoder = encoder.clone() if encoder is not None else None
        self.classifier = classifier
        self.entries: dict[str, tuple[KeywordNormParams, np.ndarray]] = {}

    @property
    def encode_calls(self):
        return self._encoder.encode_calls if self._encoder else 0

    @staticmethod
    def _key(keyword):
        return keyword.strip().lower()

    def register(self, keyword):
        """Cache (theta_v, embedding) for one keyword; idempotent."""
        key = self._key(keyword)
        if key in self.entries:
            return self.entries[key]
        if self._encoder is None:
            raise EmptyRegistry("registry was loaded without an encoder; "
                                "cannot register new keywords")
        params, embedding = self._encoder.encode_keyword(key)
        self.entries[key] = (params, embedding)
        return self.entries[key]

    def register_all(self, keywords):
        for kw in keywords:
            self.register(kw)

    def norm_params(self, keyword) -> KeywordNormParams:
        return self.entries[self._key(keyword)][0]

    def embedding(self, keyword) -> np.ndarray:
        return self.entries[self._key(keyword)][1]

    def score_all(self, mel) -> dict[str, float]:
        """Probability per registered keyword for one utterance.

        The stem + positional encoding run once (check ``stem_calls``);
        each keyword re-runs only the adaptive blocks and the head.
        """
        if not self.entries:
            raise EmptyRegistry("no keywords registered")
        frames = mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel)
        out = {}
        with ad.no_grad():
            packed, segments = self.classifier.encode_utterances([frames])
            for kw in sorted(self.entries):
                gain_rows, bias_rows = stack_norm_params(
                    [self.entries[kw][0]], self.classifier.dtype)
                probs = self.classifier.adaptive_blocks_and_head(
                    packed, segments, gain_rows, bias_rows)

                out[kw] = float(probs.data[0])
        return out

    # -- persistence ----------------------------------------------------------

    def save(self, path):
        """Container: JSON header + little-endian float32 payloads."""
        keywords = sorted(self.entries)
        tensors = {}
        for i, kw in enumerate(keywords):
            params, emb = self.entries[kw]
            for layer, (g, b) in enumerate(zip(params.gains, params.biases)):
                tensors[f"{i}/gain{layer}"] = g
                tensors[f"{i}/bias{layer}"] = b
            tensors[f"{i}/embedding"] = emb

        manifest, payloads = [], []
        offset = 0
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
            payloads.append(arr.tobytes())
            offset += arr.nbytes
        header = {"keywords": keywords,
                  "n_layers": len(next(iter(self.entries.values()))[0].gains),
                  "tensors": manifest}
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as f:
            f.write(_REGISTRY_MAGIC)
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)
            for p in payloads:
                f.write(p)

    @classmethod
    def load(cls, path, classifier, encoder=None):
        with open(path, "rb") as f:
            if f.read(4) != _REGISTRY_MAGIC:
                raise ParseError(f"{path}: not a keyword registry file")
            (header_len,) = struct.unpack("<Q", f.read(8))
            header = json.loads(f.read(header_len).decode("utf-8"))
            payload = f.read()

        arrays = {}
        for item in header["tensors"]:
            shape = tuple(item["shape"])
            count = int(np.prod(shape)) if shape else 1
            arrays[item["name"]] = np.frombuffer(
                payload, dtype="<f4", count=count, offset=item["offset"]
            ).reshape(shape).copy()

        registry = cls(encoder, classifier)
        for i, kw in enumerate(header["keywords"]):
            gains = [arrays[f"{i}/gain{layer}"] for layer in range(header["n_layers"])]
            biases = [arrays[f"{i}/bias{layer}"] for layer in range(header["n_layers"])]
            registry.entries[kw] = (KeywordNormParams(gains=gains, biases=biases),
                                    arrays[f"{i}/embedding"])
        return registry
