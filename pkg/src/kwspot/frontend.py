"""Log-Mel audio frontend.

Raw 16 kHz mono audio becomes an 80-channel log-magnitude Mel spectrogram
with 25 ms Hann windows and 10 ms hops, followed by per-utterance
standardization. No resampling: anything other than 16 kHz is rejected.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AudioTooLong,
    InvalidBandEdges,
    NonFiniteInput,
    ParseError,
    TooShort,
    WrongSampleRate,
)

SAMPLE_RATE = 16000
WINDOW_MS = 25
HOP_MS = 10
N_FFT = 400           # 25 ms at 16 kHz, no zero padding
HOP = 160             # 10 ms
N_MELS = 80
F_MIN = 0.0
F_MAX = 8000.0
LOG_FLOOR = 1e-10
MAX_SAMPLES = 480_000  # 30 s

_MELF_MAGIC = b"MELF"


@dataclass
class AudioBuffer:
    """Mono audio in [-1, 1] at exactly 16 kHz."""

    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.samples)):
            raise NonFiniteInput("audio contains NaN/Inf samples")
        if self.samples.size > MAX_SAMPLES:
            raise AudioTooLong(
                f"{self.samples.size} samples exceeds the 30 s limit ({MAX_SAMPLES})"
            )

    @property
    def duration_s(self):
        return self.samples.size / self.sample_rate_hz


@dataclass
class MelSpectrogram:
    """T x n_mels matrix of log-magnitude Mel energies."""

    frames: np.ndarray
    window_ms: int = WINDOW_MS
    hop_ms: int = HOP_MS
    n_mels: int = N_MELS

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[1] != self.n_mels:
            raise ParseError(f"expected T x {self.n_mels} frames, got {self.frames.shape}")

    @property
    def num_frames(self):
        return self.frames.shape[0]


def hz_to_mel(f):
    """HTK Mel scale: mel(f) = 2595 * log10(1 + f / 700)."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_fft=N_FFT, n_mels=N_MELS, f_min=F_MIN, f_max=F_MAX,
                   sample_rate=SAMPLE_RATE):
    """Triangular filters, linear in Mel, over rFFT bins.

    Returns an (n_mels, n_fft // 2 + 1) matrix. Band edges are n_mels + 2
    points uniformly spaced in Mel between f_min and f_max; filter m rises
    from edge m to its center at edge m+1 and falls to edge m+2.
    """
    if not (0 <= f_min < f_max <= sample_rate / 2):
        raise InvalidBandEdges(f"need 0 <= f_min < f_max <= {sample_rate / 2}, "
                               f"got ({f_min}, {f_max})")
    n_bins = n_fft // 2 + 1
    bin_mels = hz_to_mel(np.arange(n_bins) * (sample_rate / n_fft))
    edges = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2)

    lower = edges[:-2, None]
    center = edges[1:-1, None]
    upper = edges[2:, None]
    rising = (bin_mels[None, :] - lower) / (center - lower)
    falling = (upper - bin_mels[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def filter_center_frequencies(n_mels=N_MELS, f_min=F_MIN, f_max=F_MAX):
    """Center frequency (Hz) of each triangular filter."""
    edges = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2)
    return mel_to_hz(edges[1:-1])


_hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(N_FFT) / N_FFT)  # periodic
_filterbank = mel_filterbank()


def compute_log_mel(audio: AudioBuffer, standardize=True) -> MelSpectrogram:
    """Full frontend pipeline for one utterance.

    Hann window, 400-point FFT per frame, power spectrum, 80 triangular Mel
    filters over 0-8000 Hz, log10 with a 1e-10 floor, then (optionally)
    standardization by the global mean/std of the utterance's cells.
    """
    if audio.sample_rate_hz != SAMPLE_RATE:
        raise WrongSampleRate(f"expected {SAMPLE_RATE} Hz, got {audio.sample_rate_hz}")
    n = audio.samples.size
    if n < N_FFT:
        raise TooShort(f"need at least {N_FFT} samples, got {n}")

    frames = np.lib.stride_tricks.sliding_window_view(audio.samples, N_FFT)[::HOP]
    spec = np.fft.rfft(frames * _hann, axis=1)
    power = spec.real**2 + spec.imag**2
    mel = power @ _filterbank.T
    log_mel = np.log10(np.maximum(mel, LOG_FLOOR))

    if standardize:
        std = log_mel.std()
        log_mel = (log_mel - log_mel.mean()) / max(std, LOG_FLOOR)
    return MelSpectrogram(frames=log_mel.astype(np.float32))


def num_frames(n_samples):
    """Frame-count law: T = floor((N - 400) / 160) + 1."""
    if n_samples < N_FFT:
        raise TooShort(f"need at least {N_FFT} samples, got {n_samples}")
    return (n_samples - N_FFT) // HOP + 1


def read_wav(path) -> AudioBuffer:
    """Read a 16-bit PCM mono WAV file."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise ParseError(f"{path}: expected mono audio, got {w.getnchannels()} channels")
        if w.getsampwidth() != 2:
            raise ParseError(f"{path}: expected 16-bit PCM, got {8 * w.getsampwidth()}-bit")
        rate = w.getframerate()
        if rate != SAMPLE_RATE:
            raise WrongSampleRate(f"{path}: expected {SAMPLE_RATE} Hz, got {rate}")
        raw = w.readframes(w.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioBuffer(samples=samples, sample_rate_hz=rate)


def write_wav(path, audio: AudioBuffer):
    data = np.clip(audio.samples, -1.0, 1.0)
    pcm = (data * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(audio.sample_rate_hz)
        w.writeframes(pcm.tobytes())


def save_melf(path, mel: MelSpectrogram | np.ndarray):
    """Cache a spectrogram: magic 'MELF', u32 T, u32 n_mels, float32 rows (LE)."""
    frames = mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    frames = frames.astype("<f4")
    with open(path, "wb") as f:
        f.write(_MELF_MAGIC)
        f.write(struct.pack("<II", frames.shape[0], frames.shape[1]))
        f.write(frames.tobytes(order="C"))


def load_melf(path) -> MelSpectrogram:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MELF_MAGIC:
            raise ParseError(f"{path}: bad magic {magic!r}, expected {_MELF_MAGIC!r}")
        t, n_mels = struct.unpack("<II", f.read(8))
        payload = f.read(4 * t * n_mels)
    if len(payload) != 4 * t * n_mels:
        raise ParseError(f"{path}: truncated payload")
    frames = np.frombuffer(payload, dtype="<f4").reshape(t, n_mels)
    return MelSpectrogram(frames=frames.copy(), n_mels=n_mels)
