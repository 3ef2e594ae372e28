"""Open-vocabulary keyword spotting with keyword-conditioned instance norm."""

import os as _os

# The model's matrices are small; BLAS thread fan-out costs more than it
# saves. Effective only when kwspot is imported before numpy initializes.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

from . import autodiff, errors
from .frontend import AudioBuffer, MelSpectrogram, compute_log_mel, mel_filterbank
from .text_encoder import CharVocab, TextEncoder, TextEncoderConfig
from .classifier import AudioClassifier, ClassifierConfig, adain
from .metrics import auc, eer, f1
from .data import SynthSpec, load_manifest, synthesize_utterance
from .training import TrainConfig, bce_loss, fit
from .inference import KeywordRegistry

__all__ = [
    "AudioBuffer",
    "AudioClassifier",
    "CharVocab",
    "ClassifierConfig",
    "KeywordRegistry",
    "MelSpectrogram",
    "SynthSpec",
    "TextEncoder",
    "TextEncoderConfig",
    "TrainConfig",
    "adain",
    "auc",
    "autodiff",
    "bce_loss",
    "compute_log_mel",
    "eer",
    "errors",
    "f1",
    "fit",
    "load_manifest",
    "mel_filterbank",
    "synthesize_utterance",
]
