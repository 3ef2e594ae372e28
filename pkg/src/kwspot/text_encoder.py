"""Character-level LSTM keyword encoder.

A keyword string becomes (a) one (gain, bias) vector pair per adaptive
normalization layer of the classifier, via affine heads on the final
hidden state, and (b) a 256-d embedding used for nearest-keyword mining.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import EmptyKeyword, TooLong

DEFAULT_ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789 '-"
MAX_KEYWORD_LEN = 64


class CharVocab:
    """Ordered alphabet -> contiguous indices, plus reserved UNK and PAD."""

    def __init__(self, alphabet=DEFAULT_ALPHABET):
        chars = list(alphabet)
        if len(set(chars)) != len(chars):
            raise ValueError("alphabet contains duplicate characters")
        self.alphabet = "".join(chars)
        self.index = {c: i for i, c in enumerate(chars)}
        self.unk = len(chars)
        self.pad = len(chars) + 1

    @property
    def size(self):
        return len(self.alphabet) + 2

    def to_json(self):
        return list(self.alphabet)

    @classmethod
    def from_json(cls, chars):
        return cls("".join(chars))

    def __eq__(self, other):
        return isinstance(other, CharVocab) and self.alphabet == other.alphabet


def tokenize(keyword: str, vocab: CharVocab) -> np.ndarray:
    """One index per character; lowercased; unknown characters map to UNK."""
    trimmed = keyword.strip()
    if not trimmed:
        raise EmptyKeyword(f"keyword {keyword!r} is empty after trimming")
    if len(trimmed) > MAX_KEYWORD_LEN:
        raise TooLong(f"keyword of length {len(trimmed)} exceeds {MAX_KEYWORD_LEN}")
    lowered = trimmed.lower()
    return np.array([vocab.index.get(c, vocab.unk) for c in lowered], dtype=np.int64)


@dataclass
class TextEncoderConfig:
    embed_dim: int = 64
    hidden_dim: int = 256
    num_layers: int = 4
    n_adain_layers: int = 4      # classifier adaptive layers (2 per block)
    d_model: int = 64            # width of each gain/bias vector
    head_weight_std: float = 0.01

    def to_json(self):
        return self.__dict__.copy()

    @classmethod
    def from_json(cls, d):
        return cls(**d)


@dataclass
class KeywordNormParams:
    """Per adaptive layer: gain and bias vectors of length d_model."""

    gains: list[np.ndarray]
    biases: list[np.ndarray]


class BatchEncoding:
    """Graph-connected encodings for a set of distinct keywords.

    ``gains[layer]`` and ``biases[layer]`` are (K, d_model) tensors whose
    row order follows ``keywords`` (sorted, deduplicated). ``embeddings``
    is (K, hidden_dim).
    """

    def __init__(self, keywords, gains, biases, embeddings):
        self.keywords = keywords
        self.row = {k: i for i, k in enumerate(keywords)}
        self.gains = gains
        self.biases = biases
        self.embeddings = embeddings

    def norm_params(self, keyword) -> KeywordNormParams:
        r = self.row[keyword]
        return KeywordNormParams(
            gains=[g.data[r].copy() for g in self.gains],
            biases=[b.data[r].copy() for b in self.biases],
        )

    def embedding(self, keyword) -> np.ndarray:
        return self.embeddings.data[self.row[keyword]].copy()


class TextEncoder:
    """4-layer character LSTM with per-layer affine parameter heads."""

    def __init__(self, config: TextEncoderConfig, vocab: CharVocab, seed=0,
                 dtype=np.float32):
        self.config = config
        self.vocab = vocab
        self.dtype = dtype
        self.encode_calls = 0
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.Generator(np.random.Philox(seed)))

    def _init_params(self, rng):
        cfg = self.config
        dt = self.dtype

        def param(name, arr):
            self.params[name] = Tensor(arr.astype(dt), requires_grad=True)

        param("embed", rng.normal(0.0, 0.1, (self.vocab.size, cfg.embed_dim)))
        bound = 1.0 / np.sqrt(cfg.hidden_dim)
        for layer in range(cfg.num_layers):
            in_dim = cfg.embed_dim if layer == 0 else cfg.hidden_dim
            param(f"lstm{layer}.w_ih", rng.uniform(-bound, bound, (in_dim, 4 * cfg.hidden_dim)))
            param(f"lstm{layer}.w_hh", rng.uniform(-bound, bound, (cfg.hidden_dim, 4 * cfg.hidden_dim)))
            param(f"lstm{layer}.b", np.zeros(4 * cfg.hidden_dim))
        for i in range(cfg.n_adain_layers):
            param(f"head{i}.gain.w", rng.normal(0.0, cfg.head_weight_std, (cfg.hidden_dim, cfg.d_model)))
            param(f"head{i}.gain.b", np.ones(cfg.d_model))
            param(f"head{i}.bias.w", rng.normal(0.0, cfg.head_weight_std, (cfg.hidden_dim, cfg.d_model)))
            param(f"head{i}.bias.b", np.zeros(cfg.d_model))

    def clone(self):
        """Deep copy with frozen-in parameter values (for inference caches)."""
        other = TextEncoder.__new__(TextEncoder)
        other.config = self.config
        other.vocab = self.vocab
        other.dtype = self.dtype
        other.encode_calls = 0
        other.params = {
            name: Tensor(t.data.copy(), requires_grad=True)
            for name, t in self.params.items()
        }
        return other

    def _lstm_stack(self, token_matrix, lengths):
        """Run the LSTM over a padded (K, L_max) index matrix.

        Keywords shorter than L_max carry PAD tokens; their hidden and cell
        states freeze at their own final step via masking, so the returned
        (K, H) matrix holds each keyword's terminal top-layer state.
        """
        cfg = self.config
        k, l_max = token_matrix.shape
        min_len = int(lengths.min())

        # one pair of (K, H) masks per time step past the shortest keyword
        masks = {}
        for t in range(min_len, l_max):
            active = (t < lengths).astype(self.dtype)[:, None]
            m = np.repeat(active, cfg.hidden_dim, axis=1)
            masks[t] = (Tensor(m), Tensor(1.0 - m))

        xs = [ad.gather(self.params["embed"], token_matrix[:, t]) for t in range(l_max)]
        for layer in range(cfg.num_layers):
            w_ih = self.params[f"lstm{layer}.w_ih"]
            w_hh = self.params[f"lstm{layer}.w_hh"]
            b = self.params[f"lstm{layer}.b"]
            h = Tensor(np.zeros((k, cfg.hidden_dim), dtype=self.dtype))
            c = Tensor(np.zeros((k, cfg.hidden_dim), dtype=self.dtype))
            outs = []
            for t, x in enumerate(xs):
                gates = ad.matmul(x, w_ih) + ad.matmul(h, w_hh) + b
                hd = cfg.hidden_dim
                i_g = ad.sigmoid(ad.slice_axis(gates, 1, 0, hd))
                f_g = ad.sigmoid(ad.slice_axis(gates, 1, hd, 2 * hd))
                g_g = ad.tanh(ad.slice_axis(gates, 1, 2 * hd, 3 * hd))
                o_g = ad.sigmoid(ad.slice_axis(gates, 1, 3 * hd, 4 * hd))
                c_new = f_g * c + i_g * g_g
                h_new = o_g * ad.tanh(c_new)
                if t in masks:
                    keep, freeze = masks[t]
                    c = c_new * keep + c * freeze
                    h = h_new * keep + h * freeze
                else:
                    c, h = c_new, h_new
                outs.append(h)
            xs = outs
        return xs[-1]

    def encode_batch(self, keywords) -> BatchEncoding:
        """Encode distinct keywords once each, padded to a common length.

        Keywords are deduplicated and sorted. Gradients flow to the
        parameters when a tape is active.
        """
        distinct = sorted(set(keywords))
        if not distinct:
            raise EmptyKeyword("no keywords to encode")
        tokens = [tokenize(kw, self.vocab) for kw in distinct]
        self.encode_calls += len(distinct)

        lengths = np.array([t.size for t in tokens], dtype=np.int64)
        l_max = int(lengths.max())
        mat = np.full((len(distinct), l_max), self.vocab.pad, dtype=np.int64)
        for i, t in enumerate(tokens):
            mat[i, : t.size] = t
        h_final = self._lstm_stack(mat, lengths)

        gains, biases = [], []
        for i in range(self.config.n_adain_layers):
            gains.append(ad.matmul(h_final, self.params[f"head{i}.gain.w"])
                         + self.params[f"head{i}.gain.b"])
            biases.append(ad.matmul(h_final, self.params[f"head{i}.bias.w"])
                          + self.params[f"head{i}.bias.b"])
        return BatchEncoding(distinct, gains, biases, h_final)

    def encode_keyword(self, keyword) -> tuple[KeywordNormParams, np.ndarray]:
        """Detached (normalization parameters, embedding) for one keyword."""
        with ad.no_grad():
            enc = self.encode_batch([keyword])
        return enc.norm_params(keyword), enc.embedding(keyword)
