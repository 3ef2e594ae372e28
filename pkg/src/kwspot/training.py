"""Training loop: paired positive/negative batches, BCE loss, dual
learning rates for the text encoder and the classifier, checkpointing.

The text-encoder update follows the chain rule through the generated
normalization parameters; reverse mode realizes it directly, and
``phi_gradient_two_stage`` reproduces it as an explicit Jacobian
contraction for verification.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .classifier import AudioClassifier, ClassifierConfig
from .data import AssembledBatch, assemble_batch
from .errors import NonFiniteLoss, ParseError
from .negatives import DEFAULT_MIXTURE, SimilarCharMap, normalize_mixture
from .text_encoder import CharVocab, TextEncoder, TextEncoderConfig

CHECKPOINT_MAGIC = b"KWCK"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    text_lr: float = 1e-4        # alpha
    classifier_lr: float = 1e-4  # eta
    batch_size: int = 144
    epochs: int = 25
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    mixture: dict = field(default_factory=lambda: dict(DEFAULT_MIXTURE))
    grad_clip_norm: float = 1.0
    n_subs: int = 1
    sub_mode: str = "similar"
    alphabet: str = "abcdefghijklmnopqrstuvwxyz"

    def __post_init__(self):
        if self.text_lr < 0 or self.classifier_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if self.batch_size % 2 != 0:
            raise ValueError("batch size must be even (equal pos/neg halves)")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        self.mixture = normalize_mixture(self.mixture)

    @classmethod
    def desk(cls, **overrides):
        """Laptop-scale defaults: small batches, few epochs, faster LR."""
        base = {"batch_size": 32, "epochs": 10, "text_lr": 3e-3,
                "classifier_lr": 3e-3}
        base.update(overrides)
        return cls(**base)

    def to_json(self):
        d = self.__dict__.copy()
        d["mixture"] = {k.value: v for k, v in self.mixture.items()}
        return d

    @classmethod
    def from_json(cls, d):
        return cls(**d)


@dataclass
class LossRecord:
    step: int
    loss: float
    pos_acc: float
    neg_acc: float


def bce_loss(probs, labels):
    """Mean binary cross-entropy; probabilities clamped away from {0, 1}."""
    if not isinstance(probs, Tensor):
        probs = Tensor(np.asarray(probs))
    y = np.asarray(labels, dtype=probs.data.dtype)
    p = ad.clip(probs, 1e-7, 1.0 - 1e-7)
    pos_term = ad.mul(ad.log(p), Tensor(y))
    neg_term = ad.mul(ad.log(ad.sub(1.0, p)), Tensor(1.0 - y))
    return ad.mul(ad.mean(ad.add(pos_term, neg_term)), -1.0)


# -- optimizers ----------------------------------------------------------------


class Sgd:
    name = "sgd"

    def __init__(self, params, lr_for, **_):
        self.params = params
        self.lr_for = lr_for
        self.t = 0

    def step(self, grads):
        self.t += 1
        for name, g in grads.items():
            p = self.params[name]
            p.data -= np.asarray(self.lr_for[name] * g, dtype=p.data.dtype)

    def state_tensors(self):
        return {}

    def load_state(self, t, tensors):
        self.t = t


class Adam:
    name = "adam"

    def __init__(self, params, lr_for, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr_for = lr_for
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, g in grads.items():
            p = self.params[name]
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data -= np.asarray(self.lr_for[name] * update, dtype=p.data.dtype)

    def state_tensors(self):
        out = {}
        for n in self.m:
            out[f"m/{n}"] = self.m[n]
            out[f"v/{n}"] = self.v[n]
        return out

    def load_state(self, t, tensors):
        self.t = t
        for n in self.m:
            self.m[n] = tensors[f"m/{n}"].astype(self.m[n].dtype).reshape(self.m[n].shape)
            self.v[n] = tensors[f"v/{n}"].astype(self.v[n].dtype).reshape(self.v[n].shape)


def build_optimizer(encoder, classifier, config: TrainConfig):
    """One optimizer over both models; per-parameter learning rates."""
    params, lr_for = {}, {}
    for n, p in encoder.params.items():
        params[f"phi/{n}"] = p
        lr_for[f"phi/{n}"] = config.text_lr
    frozen = set(classifier.stem_param_names()) if classifier.config.freeze_encoder else set()
    for n, p in classifier.params.items():
        if n in frozen:
            continue
        params[f"theta/{n}"] = p
        lr_for[f"theta/{n}"] = config.classifier_lr
    cls = Adam if config.optimizer == "adam" else Sgd
    return cls(params, lr_for, beta1=config.beta1, beta2=config.beta2,
               eps=config.adam_eps)


def clip_gradients(grads, max_norm):
    if max_norm is None or max_norm <= 0:
        return grads
    total = 0.0
    for g in grads.values():
        total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        grads = {n: g * scale for n, g in grads.items()}
    return grads


# -- the step and the loop -------------------------------------------------------


def train_step(batch: AssembledBatch, encoder: TextEncoder,
               classifier: AudioClassifier, optimizer, config: TrainConfig,
               step=0) -> LossRecord:
    """One update: encode distinct keywords once, one forward, one backward."""
    distinct = sorted(set(batch.keywords))
    enc = encoder.encode_batch(distinct)
    rows = np.array([enc.row[kw] for kw in batch.keywords], dtype=np.int64)
    gain_rows = [ad.gather(g, rows) for g in enc.gains]
    bias_rows = [ad.gather(b, rows) for b in enc.biases]

    features_list = [batch.features.example(i) for i in range(batch.size)]
    probs = classifier.forward_graph(features_list, gain_rows, bias_rows)
    loss = bce_loss(probs, batch.labels)
    loss_val = float(loss.data)
    if not np.isfinite(loss_val):
        err = NonFiniteLoss(f"non-finite loss at step {step}")
        err.batch_summary = {
            "step": step,
            "keywords": batch.keywords,
            "labels": batch.labels.tolist(),
            "strategies": [s.value if s else None for s in batch.strategies],
        }
        raise err

    for p in optimizer.params.values():
        p.zero_grad()
    loss.backward()
    grads = {}
    for name, p in optimizer.params.items():
        if p.grad is not None:
            grads[name] = p.grad
    grads = clip_gradients(grads, config.grad_clip_norm)
    optimizer.step(grads)

    preds = probs.data >= 0.5
    pos = batch.labels == 1
    return LossRecord(
        step=step,
        loss=loss_val,
        pos_acc=float(np.mean(preds[pos])),
        neg_acc=float(np.mean(~preds[~pos])),
    )


def write_loss_csv(path, records):
    with open(path, "w", encoding="utf-8") as f:
        f.write("step,loss,pos_acc,neg_acc\n")
        for r in records:
            f.write(f"{r.step},{r.loss:.8f},{r.pos_acc:.6f},{r.neg_acc:.6f}\n")


def fit(corpus, config: TrainConfig, classifier_config: ClassifierConfig,
        out_dir=None, text_config=None, vocab=None, resume_from=None,
        epoch_checkpoints=True):
    """Run the full loop; returns (final Checkpoint, list of LossRecords).

    Shuffles per epoch with the seeded master generator, checkpoints at
    every epoch end, and writes ``loss.csv`` when ``out_dir`` is given.
    Resuming restores parameters, optimizer state and the generator state,
    so a resumed run reproduces an uninterrupted one.
    """
    import os

    if resume_from is not None:
        ckpt = resume_from if isinstance(resume_from, Checkpoint) else Checkpoint.load(resume_from)
        encoder, classifier = ckpt.build_models()
        config = ckpt.train_config
        optimizer = build_optimizer(encoder, classifier, config)
        optimizer.load_state(ckpt.opt_step, ckpt.opt_tensors)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(config.seed)))
        rng.bit_generator.state = ckpt.rng_state
        start_epoch, step = ckpt.epoch, ckpt.step
        vocab = encoder.vocab
    else:
        if vocab is None:
            vocab = CharVocab()
        if text_config is None:
            text_config = TextEncoderConfig(
                n_adain_layers=classifier_config.n_adain_layers,
                d_model=classifier_config.d_model)
        encoder = TextEncoder(text_config, vocab, seed=config.seed)
        classifier = AudioClassifier(classifier_config, seed=config.seed + 1)
        optimizer = build_optimizer(encoder, classifier, config)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(config.seed)))
        start_epoch, step = 0, 0

    from .data import corpus_vocabulary

    half = config.batch_size // 2
    if len(corpus) < half:
        raise ParseError(f"corpus of {len(corpus)} utterances cannot fill a "
                         f"batch of {config.batch_size}")
    mining_vocab = corpus_vocabulary(corpus)
    char_map = SimilarCharMap()
    steps_per_epoch = len(corpus) // half
    records = []

    for epoch in range(start_epoch, config.epochs):
        perm = rng.permutation(len(corpus))
        for b in range(steps_per_epoch):
            chosen = [corpus[i] for i in perm[b * half: (b + 1) * half]]
            batch = assemble_batch(chosen, mining_vocab, encoder, config, rng,
                                   char_map=char_map)
            records.append(train_step(batch, encoder, classifier, optimizer,
                                      config, step=step))
            step += 1
        if out_dir is not None and epoch_checkpoints:
            snapshot = Checkpoint.capture(encoder, classifier, config, optimizer,
                                          rng, step=step, epoch=epoch + 1)
            snapshot.save(os.path.join(out_dir, f"checkpoint_epoch{epoch + 1}.ckpt"))

    final = Checkpoint.capture(encoder, classifier, config, optimizer, rng,
                               step=step, epoch=config.epochs)
    if out_dir is not None:
        final.save(os.path.join(out_dir, "checkpoint.ckpt"))
        write_loss_csv(os.path.join(out_dir, "loss.csv"), records)
    return final, records


# -- checkpoint container ---------------------------------------------------------


def _jsonify_rng_state(state):
    def conv(x):
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        if isinstance(x, np.ndarray):
            return {"__ndarray__": x.tolist(), "dtype": str(x.dtype)}
        if isinstance(x, np.integer):
            return int(x)
        return x

    return conv(state)


def _unjsonify_rng_state(state):
    def conv(x):
        if isinstance(x, dict):
            if "__ndarray__" in x:
                return np.array(x["__ndarray__"], dtype=x["dtype"])
            return {k: conv(v) for k, v in x.items()}
        return x

    return conv(state)


class Checkpoint:
    """Self-contained training snapshot.

    On disk: magic 'KWCK', u32 version, u64 header length, a JSON header
    (configs, vocabulary, rng state, tensor manifest with shapes/offsets),
    then concatenated little-endian float32 tensor payloads.
    """

    def __init__(self, classifier_config, text_config, train_config, vocab,
                 theta, phi, opt_tensors, opt_step, rng_state, step, epoch):
        self.classifier_config = classifier_config
        self.text_config = text_config
        self.train_config = train_config
        self.vocab = vocab
        self.theta = theta
        self.phi = phi
        self.opt_tensors = opt_tensors
        self.opt_step = opt_step
        self.rng_state = rng_state
        self.step = step
        self.epoch = epoch

    @classmethod
    def capture(cls, encoder, classifier, train_config, optimizer=None,
                rng=None, step=0, epoch=0):
        return cls(
            classifier_config=classifier.config,
            text_config=encoder.config,
            train_config=train_config,
            vocab=encoder.vocab,
            theta={n: p.data.copy() for n, p in classifier.params.items()},
            phi={n: p.data.copy() for n, p in encoder.params.items()},
            opt_tensors=(optimizer.state_tensors() if optimizer else {}),
            opt_step=(optimizer.t if optimizer else 0),
            rng_state=(rng.bit_generator.state if rng is not None else None),
            step=step,
            epoch=epoch,
        )

    def build_models(self):
        encoder = TextEncoder(self.text_config, self.vocab, seed=0)
        for n, p in encoder.params.items():
            p.data = self.phi[n].astype(p.data.dtype).reshape(p.data.shape).copy()
        classifier = AudioClassifier(self.classifier_config, seed=0)
        for n, p in classifier.params.items():
            p.data = self.theta[n].astype(p.data.dtype).reshape(p.data.shape).copy()
        return encoder, classifier

    def save(self, path):
        tensors = {}
        for n, a in self.theta.items():
            tensors[f"theta/{n}"] = a
        for n, a in self.phi.items():
            tensors[f"phi/{n}"] = a
        for n, a in self.opt_tensors.items():
            tensors[f"opt/{n}"] = a

        manifest, payloads = [], []
        offset = 0
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
            payloads.append(arr.tobytes())
            offset += arr.nbytes

        header = {
            "format_version": CHECKPOINT_VERSION,
            "classifier_config": self.classifier_config.to_json(),
            "text_config": self.text_config.to_json(),
            "train_config": self.train_config.to_json(),
            "vocab": self.vocab.to_json(),
            "opt_step": self.opt_step,
            "rng_state": _jsonify_rng_state(self.rng_state),
            "step": self.step,
            "epoch": self.epoch,
            "tensors": manifest,
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
            f.write(blob)
            for p in payloads:
                f.write(p)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != CHECKPOINT_MAGIC:
                raise ParseError(f"{path}: bad checkpoint magic {magic!r}")
            version, header_len = struct.unpack("<IQ", f.read(12))
            if version != CHECKPOINT_VERSION:
                raise ParseError(f"{path}: unsupported checkpoint version {version}")
            header = json.loads(f.read(header_len).decode("utf-8"))
            payload = f.read()

        tensors = {}
        for item in header["tensors"]:
            shape = tuple(item["shape"])
            count = int(np.prod(shape)) if shape else 1
            start = item["offset"]
            arr = np.frombuffer(payload, dtype="<f4", count=count,
                                offset=start).reshape(shape)
            tensors[item["name"]] = arr.copy()

        theta = {n[len("theta/"):]: a for n, a in tensors.items() if n.startswith("theta/")}
        phi = {n[len("phi/"):]: a for n, a in tensors.items() if n.startswith("phi/")}
        opt = {n[len("opt/"):]: a for n, a in tensors.items() if n.startswith("opt/")}
        return cls(
            classifier_config=ClassifierConfig.from_json(header["classifier_config"]),
            text_config=TextEncoderConfig.from_json(header["text_config"]),
            train_config=TrainConfig.from_json(header["train_config"]),
            vocab=CharVocab.from_json(header["vocab"]),
            theta=theta,
            phi=phi,
            opt_tensors=opt,
            opt_step=header["opt_step"],
            rng_state=_unjsonify_rng_state(header["rng_state"]),
            step=header["step"],
            epoch=header["epoch"],
        )


# -- chain-rule verification -------------------------------------------------------


def phi_gradient_end_to_end(encoder, keyword, loss_from_theta):
    """d(loss)/d(phi) by plain reverse mode through the generated parameters.

    ``loss_from_theta(gains, biases)`` consumes per-layer (1, d) tensors
    and returns a scalar loss tensor.
    """
    for p in encoder.params.values():
        p.zero_grad()
    enc = encoder.encode_batch([keyword])
    loss = loss_from_theta(enc.gains, enc.biases)
    loss.backward()
    return {n: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
            for n, p in encoder.params.items()}


def phi_gradient_two_stage(encoder, keyword, loss_from_theta):
    """d(loss)/d(phi) as an explicit two-stage contraction.

    Stage one treats the generated parameters as leaves and computes the
    loss gradient with respect to them; stage two forms each Jacobian row
    of the parameter generator by seeding one-hot backward passes, and
    accumulates the weighted sum. Mathematically identical to the
    end-to-end path, with independent bookkeeping.
    """
    enc = encoder.encode_batch([keyword])
    leaf_gains = [Tensor(g.data.copy(), requires_grad=True) for g in enc.gains]
    leaf_biases = [Tensor(b.data.copy(), requires_grad=True) for b in enc.biases]
    loss = loss_from_theta(leaf_gains, leaf_biases)
    loss.backward()
    seed_weights = ([t.grad for t in leaf_gains], [t.grad for t in leaf_biases])

    total = {n: np.zeros_like(p.data) for n, p in encoder.params.items()}
    for outputs, weights in zip((enc.gains, enc.biases), seed_weights):
        for out, w in zip(outputs, weights):
            if w is None:
                continue
            d = out.shape[1]
            for c in range(d):
                for p in encoder.params.values():
                    p.zero_grad()
                seed = np.zeros_like(out.data)
                seed[0, c] = 1.0
                out.backward(seed)
                scale = float(w[0, c])
                if scale == 0.0:
                    continue
                for n, p in encoder.params.items():
                    if p.grad is not None:
                        total[n] += scale * p.grad
    return total
