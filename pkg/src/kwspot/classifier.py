"""Keyword-conditioned audio classifier.

Conv stem (two kernel-3 1-D convolutions, strides 1 and 2, GELU) ->
sinusoidal positional encoding -> adaptive transformer blocks in which the
usual pre-norm layer norms are replaced by instance normalization whose
gain/bias come from the text encoder -> elementwise max over time ->
linear head -> sigmoid.

Batches are processed packed: examples are sliced to their valid lengths
and concatenated along time, so padding never enters any computation and
per-example outputs are independent of batch composition. Row-wise ops
(projections, MLP, stem) run on the packed matrix; attention and instance
statistics run per example on slices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeMismatch, WindowLargerThanUtterance, ZeroValidLength
from .frontend import HOP_MS, WINDOW_MS, MelSpectrogram
from .text_encoder import KeywordNormParams


@dataclass
class ClassifierConfig:
    d_model: int = 64
    n_heads: int = 4
    n_adaptive_blocks: int = 2
    mlp_expansion: int = 4
    adain_eps: float = 1e-5
    freeze_encoder: bool = False
    n_mels: int = 80

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_adaptive_blocks < 1:
            raise ValueError("need at least one adaptive block")

    @property
    def n_adain_layers(self):
        return 2 * self.n_adaptive_blocks

    @classmethod
    def desk(cls, **overrides):
        return cls(**{"d_model": 64, "n_heads": 4, **overrides})

    @classmethod
    def tiny(cls, **overrides):
        """Whisper-tiny-width preset."""
        return cls(**{"d_model": 384, "n_heads": 6, **overrides})

    @classmethod
    def toy(cls, **overrides):
        """Small enough for finite-difference gradient checks."""
        return cls(**{"d_model": 8, "n_heads": 2, "n_mels": 4, **overrides})

    def to_json(self):
        return self.__dict__.copy()

    @classmethod
    def from_json(cls, d):
        return cls(**d)


@dataclass
class PaddedBatchFeatures:
    """B x T_max x n_mels features with per-example valid lengths."""

    features: np.ndarray
    valid_lens: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.valid_lens = np.asarray(self.valid_lens, dtype=np.int64)
        if self.features.ndim != 3:
            raise ShapeMismatch(f"expected B x T x F features, got {self.features.shape}")
        if self.valid_lens.shape[0] != self.features.shape[0]:
            raise ShapeMismatch("one valid length per example required")
        if self.valid_lens.size and (self.valid_lens.min() < 1
                                     or self.valid_lens.max() > self.features.shape[1]):
            raise ZeroValidLength("valid lengths must be in [1, T_max]")

    @classmethod
    def from_list(cls, features_list):
        lens = np.array([f.shape[0] for f in features_list], dtype=np.int64)
        t_max = int(lens.max())
        out = np.zeros((len(features_list), t_max, features_list[0].shape[1]), dtype=np.float32)
        for i, f in enumerate(features_list):
            out[i, : f.shape[0]] = f
        return cls(features=out, valid_lens=lens)

    def example(self, i):
        return self.features[i, : self.valid_lens[i]]


# -- packed-sequence helpers -------------------------------------------------


class _Segments:
    """Row layout of a packed (sum T_i, d) matrix."""

    def __init__(self, lengths):
        self.lengths = list(lengths)
        self.bounds = np.cumsum([0] + self.lengths)
        self.total = int(self.bounds[-1])
        self.rowmap = np.repeat(np.arange(len(self.lengths)), self.lengths)

    def __len__(self):
        return len(self.lengths)

    def span(self, e):
        return int(self.bounds[e]), int(self.bounds[e + 1])


def _downsampled(n):
    return (n + 1) // 2


def _stride2_rows(segments):
    """Packed row indices for a kernel-3 stride-2 conv; -1 marks zero pad."""
    left, center, right = [], [], []
    for e, n in enumerate(segments.lengths):
        start = segments.bounds[e]
        centers = start + np.arange(0, n, 2)
        l = centers - 1
        r = centers + 1
        l[l < start] = -1
        r[r >= start + n] = -1
        left.append(l)
        center.append(centers)
        right.append(r)
    return np.concatenate(left), np.concatenate(center), np.concatenate(right)


def _im2col_input(features_list, dtype):
    """Kernel-3 same-pad unfold of constant inputs, packed across examples."""
    cols = []
    for f in features_list:
        f = np.asarray(f, dtype=dtype)
        padded = np.vstack([np.zeros((1, f.shape[1]), dtype=dtype), f,
                            np.zeros((1, f.shape[1]), dtype=dtype)])
        t = f.shape[0]
        cols.append(np.hstack([padded[0:t], padded[1:t + 1], padded[2:t + 2]]))
    return np.vstack(cols)


def sinusoidal_encoding(length, d_model, dtype=np.float32):
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, idx / d_model)
    pe = np.zeros((length, d_model), dtype=np.float64)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles[:, : d_model // 2])
    return pe.astype(dtype)


# -- adaptive instance normalization ------------------------------------------


def adain(z, valid_len, gain, bias, eps=1e-5):
    """Normalize per channel over valid frames, then rescale.

    For each channel c: out[t, c] = gain[c] * (z[t, c] - mu_c) / sigma_c
    + bias[c], where mu_c and the biased variance are computed over the
    first ``valid_len`` rows only; sigma_c = sqrt(var_c + eps). Padded rows
    come out zero. Accepts Tensors or arrays; returns a Tensor.
    """
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z))
    gain = gain if isinstance(gain, Tensor) else Tensor(np.asarray(gain))
    bias = bias if isinstance(bias, Tensor) else Tensor(np.asarray(bias))
    t_total, d = z.shape
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(f"gain/bias must be ({d},), got {gain.shape}/{bias.shape}")
    if valid_len < 1:
        raise ZeroValidLength("need at least one valid frame")
    if valid_len > t_total:
        raise ShapeMismatch(f"valid_len {valid_len} exceeds {t_total} rows")

    zv = ad.slice_axis(z, 0, 0, valid_len) if valid_len < t_total else z
    mu = ad.mean(zv, axis=0)
    sigma = ad.sqrt(ad.variance(zv, axis=0) + eps)
    out = (zv - mu) / sigma * gain + bias
    if valid_len < t_total:
        pad = Tensor(np.zeros((t_total - valid_len, d), dtype=z.data.dtype))
        out = ad.concat([out, pad], axis=0)
    return out


def _adain_packed(z, segments, gain_rows, bias_rows, eps):
    """Instance norm on a packed matrix; per-example stats, row-wise affine."""
    mus, sigmas = [], []
    for e in range(len(segments)):
        lo, hi = segments.span(e)
        zv = ad.slice_axis(z, 0, lo, hi)
        mus.append(ad.mean(zv, axis=0))
        sigmas.append(ad.sqrt(ad.variance(zv, axis=0) + eps))
    mu = ad.gather(ad.stack_rows(mus), segments.rowmap)
    sigma = ad.gather(ad.stack_rows(sigmas), segments.rowmap)
    gain = ad.gather(gain_rows, segments.rowmap)
    bias = ad.gather(bias_rows, segments.rowmap)
    return (z - mu) / sigma * gain + bias


# -- the classifier -----------------------------------------------------------


class AudioClassifier:
    """f(x; theta, theta_v): all parameters shared across keywords."""

    def __init__(self, config: ClassifierConfig, seed=0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.stem_calls = 0
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.Generator(np.random.Philox(seed)))

    def _init_params(self, rng):
        cfg = self.config
        dt = self.dtype

        def param(name, arr):
            self.params[name] = Tensor(arr.astype(dt), requires_grad=True)

        def linear(name, fan_in, fan_out):
            param(f"{name}.w", rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out)))
            param(f"{name}.b", np.zeros(fan_out))

        linear("stem.conv1", 3 * cfg.n_mels, cfg.d_model)
        linear("stem.conv2", 3 * cfg.d_model, cfg.d_model)
        for i in range(cfg.n_adaptive_blocks):
            for proj in ("wq", "wk", "wv", "wo"):
                linear(f"block{i}.attn.{proj}", cfg.d_model, cfg.d_model)
            linear(f"block{i}.mlp.fc1", cfg.d_model, cfg.mlp_expansion * cfg.d_model)
            linear(f"block{i}.mlp.fc2", cfg.mlp_expansion * cfg.d_model, cfg.d_model)
        param("head.w", rng.normal(0.0, 0.02, (cfg.d_model, 1)))
        param("head.b", np.zeros(1))

    def clone(self):
        other = AudioClassifier.__new__(AudioClassifier)
        other.config = self.config
        other.dtype = self.dtype
        other.stem_calls = 0
        other.params = {
            name: Tensor(t.data.copy(), requires_grad=True)
            for name, t in self.params.items()
        }
        return other

    def stem_param_names(self):
        return [n for n in self.params if n.startswith("stem.")]

    # -- forward pieces ------------------------------------------------------

    def encode_utterances(self, features_list):
        """Keyword-independent prefix: stem + positional encoding.

        Returns (packed (sum T'_i, d) tensor, segments of downsampled
        lengths). Counts one stem call per invocation.
        """
        if any(f.shape[0] < 1 for f in features_list):
            raise ZeroValidLength("empty utterance")
        if any(f.shape[1] != self.config.n_mels for f in features_list):
            raise ShapeMismatch(f"feature dim must be {self.config.n_mels}")
        self.stem_calls += 1

        segs_in = _Segments([f.shape[0] for f in features_list])
        x = Tensor(_im2col_input(features_list, self.dtype))
        h = ad.gelu(ad.matmul(x, self.params["stem.conv1.w"]) + self.params["stem.conv1.b"])

        # stride-2 kernel-3 conv via gathers into the packed matrix
        zero_row = Tensor(np.zeros((1, self.config.d_model), dtype=self.dtype))
        h_z = ad.concat([h, zero_row], axis=0)
        left, center, right = (np.where(ix < 0, segs_in.total, ix)
                               for ix in _stride2_rows(segs_in))
        cols = ad.concat([ad.gather(h_z, left), ad.gather(h_z, center),
                          ad.gather(h_z, right)], axis=1)
        h2 = ad.gelu(ad.matmul(cols, self.params["stem.conv2.w"]) + self.params["stem.conv2.b"])

        segs = _Segments([_downsampled(n) for n in segs_in.lengths])
        pe = np.vstack([sinusoidal_encoding(n, self.config.d_model, self.dtype)
                        for n in segs.lengths])
        return h2 + Tensor(pe), segs

    def _attention(self, z, segments, block):
        cfg = self.config
        dh = cfg.d_model // cfg.n_heads
        q = ad.matmul(z, self.params[f"block{block}.attn.wq.w"]) + self.params[f"block{block}.attn.wq.b"]
        k = ad.matmul(z, self.params[f"block{block}.attn.wk.w"]) + self.params[f"block{block}.attn.wk.b"]
        v = ad.matmul(z, self.params[f"block{block}.attn.wv.w"]) + self.params[f"block{block}.attn.wv.b"]
        scale = 1.0 / np.sqrt(dh)

        ctx_chunks = []
        for e in range(len(segments)):
            lo, hi = segments.span(e)
            qe = ad.slice_axis(q, 0, lo, hi)
            ke = ad.slice_axis(k, 0, lo, hi)
            ve = ad.slice_axis(v, 0, lo, hi)
            heads = []
            for hh in range(cfg.n_heads):
                c0, c1 = hh * dh, (hh + 1) * dh
                qh = ad.slice_axis(qe, 1, c0, c1)
                kh = ad.slice_axis(ke, 1, c0, c1)
                vh = ad.slice_axis(ve, 1, c0, c1)
                scores = ad.matmul(qh, ad.transpose(kh)) * scale
                attn = ad.softmax(scores, axis=1)
                heads.append(ad.matmul(attn, vh))
            ctx_chunks.append(ad.concat(heads, axis=1))
        ctx = ctx_chunks[0] if len(ctx_chunks) == 1 else ad.concat(ctx_chunks, axis=0)
        return ad.matmul(ctx, self.params[f"block{block}.attn.wo.w"]) + self.params[f"block{block}.attn.wo.b"]

    def _mlp(self, z, block):
        h = ad.gelu(ad.matmul(z, self.params[f"block{block}.mlp.fc1.w"])
                    + self.params[f"block{block}.mlp.fc1.b"])
        return ad.matmul(h, self.params[f"block{block}.mlp.fc2.w"]) + self.params[f"block{block}.mlp.fc2.b"]

    def adaptive_blocks_and_head(self, packed, segments, gain_rows, bias_rows):
        """Keyword-conditioned suffix on a stem-encoded packed batch.

        ``gain_rows[l]`` / ``bias_rows[l]`` are (B, d_model) tensors, one
        row per example, for adaptive layer l (two per block). Returns a
        (B,) probability tensor.
        """
        cfg = self.config
        if len(gain_rows) != cfg.n_adain_layers or len(bias_rows) != cfg.n_adain_layers:
            raise ShapeMismatch(f"expected {cfg.n_adain_layers} gain/bias pairs")
        z = packed
        for i in range(cfg.n_adaptive_blocks):
            a = _adain_packed(z, segments, gain_rows[2 * i], bias_rows[2 * i], cfg.adain_eps)
            z = z + self._attention(a, segments, i)
            a = _adain_packed(z, segments, gain_rows[2 * i + 1], bias_rows[2 * i + 1], cfg.adain_eps)
            z = z + self._mlp(a, i)

        pooled = []
        for e in range(len(segments)):
            lo, hi = segments.span(e)
            pooled.append(ad.max_pool(ad.slice_axis(z, 0, lo, hi), axis=0))
        stacked = ad.stack_rows(pooled)
        logits = ad.matmul(stacked, self.params["head.w"]) + self.params["head.b"]
        return ad.reshape(ad.sigmoid(logits), (len(segments),))

    def forward_graph(self, features_list, gain_rows, bias_rows):
        """Differentiable forward on a list of unpadded (T_i, n_mels) arrays."""
        packed, segments = self.encode_utterances(features_list)
        return self.adaptive_blocks_and_head(packed, segments, gain_rows, bias_rows)

    # -- public inference surfaces -------------------------------------------

    def forward(self, batch: PaddedBatchFeatures, norm_params) -> np.ndarray:
        """Per-example keyword probabilities; one KeywordNormParams each."""
        if isinstance(norm_params, KeywordNormParams):
            norm_params = [norm_params] * batch.features.shape[0]
        if len(norm_params) != batch.features.shape[0]:
            raise ShapeMismatch("one theta_v per batch element required")
        features_list = [batch.example(i) for i in range(batch.features.shape[0])]
        with ad.no_grad():
            gain_rows, bias_rows = stack_norm_params(norm_params, self.dtype)
            probs = self.forward_graph(features_list, gain_rows, bias_rows)
        return probs.data.astype(np.float64)

    def adaptive_block(self, z, valid_len, block, gains_biases):
        """One standalone pre-norm block on a single (T, d) input.

        ``gains_biases`` is (gain1, bias1, gain2, bias2). Padded rows pass
        through untouched by attention/MLP contributions (they stay equal
        to the input's padded rows plus zero).
        """
        g1, b1, g2, b2 = gains_biases
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z))
        t_total = z.shape[0]
        zv = ad.slice_axis(z, 0, 0, valid_len) if valid_len < t_total else z
        segs = _Segments([valid_len])
        a = adain(zv, valid_len, g1, b1, self.config.adain_eps)
        zv = zv + self._attention(a, segs, block)
        a = adain(zv, valid_len, g2, b2, self.config.adain_eps)
        zv = zv + self._mlp(a, block)
        if valid_len < t_total:
            tail = ad.slice_axis(z, 0, valid_len, t_total)
            zv = ad.concat([zv, tail], axis=0)
        return zv

    def scan(self, mel, norm_params: KeywordNormParams, window_frames, stride_frames):
        """Sliding-window keyword probabilities over one utterance.

        Returns a list of (t_start_s, t_end_s, probability). A trailing
        partial window is scored if it spans at least half a window.
        Timestamps derive from the 10 ms hop; each window's end is the end
        of its last frame's 25 ms analysis span.
        """
        frames = mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel)
        t = frames.shape[0]
        if window_frames > t:
            raise WindowLargerThanUtterance(f"window {window_frames} > utterance {t}")
        if _downsampled(window_frames) < 4:
            raise ZeroValidLength(f"window of {window_frames} frames is too short")
        if stride_frames < 1:
            raise ValueError("stride must be >= 1")

        starts = list(range(0, t - window_frames + 1, stride_frames))
        if starts[-1] + window_frames < t:
            # frames remain past the last full window: score the partial
            # tail if it spans at least half a window
            tail = starts[-1] + stride_frames
            if (t - tail) * 2 >= window_frames:
                starts.append(tail)

        results = []
        for s in starts:
            chunk = frames[s: min(s + window_frames, t)]
            prob = float(self.forward(PaddedBatchFeatures.from_list([chunk]), [norm_params])[0])
            t_start = s * HOP_MS / 1000.0
            t_end = ((s + chunk.shape[0] - 1) * HOP_MS + WINDOW_MS) / 1000.0
            results.append((t_start, t_end, prob))
        return results


def stack_norm_params(norm_params_list, dtype=np.float32):
    """Stack per-example KeywordNormParams into per-layer (B, d) tensors."""
    n_layers = len(norm_params_list[0].gains)
    gain_rows, bias_rows = [], []
    for layer in range(n_layers):
        gain_rows.append(Tensor(np.stack([np.asarray(p.gains[layer], dtype=dtype)
                                          for p in norm_params_list])))
        bias_rows.append(Tensor(np.stack([np.asarray(p.biases[layer], dtype=dtype)
                                          for p in norm_params_list])))
    return gain_rows, bias_rows
