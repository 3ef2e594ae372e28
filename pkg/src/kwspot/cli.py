"""Command-line entry point: synth, train, eval, predict, scan, mine.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every command takes --seed and writes its artifacts under --out-dir with
fixed names, echoing the effective configuration to resolved-config.json.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .classifier import ClassifierConfig
from .data import (
    SYNTHETIC_PREFIX,
    SynthSpec,
    SyntheticGenerator,
    corpus_vocabulary,
    load_corpus,
    load_manifest,
)
from .errors import KwspotError, NonFiniteLoss
from .evaluation import evaluate
from .frontend import load_melf, read_wav, save_melf, compute_log_mel
from .inference import KeywordRegistry
from .negatives import (
    EVAL_MIXTURE,
    NegativeStrategy,
    SimilarCharMap,
    make_training_pair,
    normalize_mixture,
)
from .training import Checkpoint, TrainConfig, fit, write_loss_csv

log = logging.getLogger("kwspot")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(EXIT_USAGE)


def _parse_mixture(text):
    """'random=0.25,charsub=0.25,...' -> {NegativeStrategy: weight}."""
    mix = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise UsageError(f"bad mixture component {part!r}, expected name=weight")
        name, _, weight = part.partition("=")
        try:
            strategy = NegativeStrategy(name.strip())
        except ValueError:
            raise UsageError(f"unknown negative strategy {name.strip()!r}") from None
        try:
            mix[strategy] = float(weight)
        except ValueError:
            raise UsageError(f"bad weight {weight!r} for strategy {name!r}") from None
    if not mix:
        raise UsageError("empty strategy mixture")
    return mix


def _load_config_file(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}") from None


def _ensure_out_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _write_resolved_config(out_dir, sections):
    with open(os.path.join(out_dir, "resolved-config.json"), "w", encoding="utf-8") as f:
        json.dump(sections, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_input_features(path):
    if path.endswith(".melf"):
        return load_melf(path).frames
    if path.endswith(".wav"):
        return compute_log_mel(read_wav(path)).frames
    raise UsageError(f"unsupported input {path!r}: expected .wav or .melf")


def _manifest_generator(manifest_path):
    """SyntheticGenerator from a synth_spec.json beside the manifest, if any."""
    side = os.path.join(os.path.dirname(os.path.abspath(manifest_path)),
                        "synth_spec.json")
    if os.path.exists(side):
        with open(side, encoding="utf-8") as f:
            return SyntheticGenerator(SynthSpec.from_json(json.load(f)))
    return None


# -- synth -------------------------------------------------------------------


def make_word_list(rng, n_words, alphabet, min_len=4, max_len=8):
    """Distinct random words for the synthetic vocabulary."""
    words = []
    seen = set()
    letters = list(alphabet)
    while len(words) < n_words:
        length = int(rng.integers(min_len, max_len + 1))
        w = "".join(letters[int(i)] for i in rng.integers(0, len(letters), length))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def _synth_split(gen, rng, vocab_words, n_utts, id_base, prefix, out_dir,
                 words_min, words_max):
    entries, spans_out = [], []
    feat_dir = os.path.join(out_dir, "features")
    os.makedirs(feat_dir, exist_ok=True)
    for i in range(n_utts):
        k = int(rng.integers(words_min, words_max + 1))
        words = [vocab_words[int(j)]
                 for j in rng.choice(len(vocab_words), size=k, replace=False)]
        features, spans = gen.synthesize(words, utterance_id=id_base + i)
        rel = f"features/{prefix}_{i:05d}.melf"
        save_melf(os.path.join(out_dir, rel), features)
        entries.append({"audio": rel, "transcript": words, "lang": "syn"})
        spans_out.append([{"word": s.word, "start_frame": s.start_frame,
                           "end_frame": s.end_frame} for s in spans])
    manifest_path = os.path.join(out_dir, f"{prefix}_manifest.jsonl")
    with open(manifest_path, "w", encoding="utf-8") as f:
        for e in entries:
            f.write(json.dumps(e, sort_keys=True) + "\n")
    return spans_out


def cmd_synth(args):
    out_dir = _ensure_out_dir(args.out_dir)
    cfg = _load_config_file(args.config).get("synth", {})
    if args.seed is not None:
        cfg["seed"] = args.seed
    spec = SynthSpec.from_json({**SynthSpec().to_json(), **cfg})
    gen = SyntheticGenerator(spec)

    words_min, words_max = args.words_per_utt
    rng = np.random.Generator(np.random.Philox(
        np.random.SeedSequence([spec.seed, 7001])))
    vocab_words = make_word_list(rng, args.vocab_size, spec.alphabet,
                                 min_len=args.word_len[0], max_len=args.word_len[1])

    spans = {
        "train": _synth_split(gen, rng, vocab_words, args.n_train, 0,
                              "train", out_dir, words_min, words_max),
        "eval": _synth_split(gen, rng, vocab_words, args.n_eval, 1_000_000,
                             "eval", out_dir, words_min, words_max),
    }
    with open(os.path.join(out_dir, "spans.json"), "w", encoding="utf-8") as f:
        json.dump(spans, f, sort_keys=True)
        f.write("\n")
    with open(os.path.join(out_dir, "vocab.json"), "w", encoding="utf-8") as f:
        json.dump(vocab_words, f)
        f.write("\n")
    with open(os.path.join(out_dir, "synth_spec.json"), "w", encoding="utf-8") as f:
        json.dump(spec.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")
    _write_resolved_config(out_dir, {
        "synth": spec.to_json(),
        "n_train": args.n_train, "n_eval": args.n_eval,
        "vocab_size": args.vocab_size,
        "words_per_utt": list(args.words_per_utt),
        "word_len": list(args.word_len),
    })
    log.info("wrote %d train / %d eval utterances to %s",
             args.n_train, args.n_eval, out_dir)
    return EXIT_OK


# -- train -------------------------------------------------------------------


def _train_config_from_args(args, file_cfg):
    base = (TrainConfig.desk().to_json() if args.preset == "desk"
            else TrainConfig().to_json())
    base.update(file_cfg.get("train", {}))
    if args.seed is not None:
        base["seed"] = args.seed
    if args.epochs is not None:
        base["epochs"] = args.epochs
    if args.batch_size is not None:
        base["batch_size"] = args.batch_size
    if args.lr is not None:
        base["text_lr"] = base["classifier_lr"] = args.lr
    if args.text_lr is not None:
        base["text_lr"] = args.text_lr
    if args.classifier_lr is not None:
        base["classifier_lr"] = args.classifier_lr
    if args.optimizer is not None:
        base["optimizer"] = args.optimizer
    if args.mixture is not None:
        base["mixture"] = {k.value: v for k, v in _parse_mixture(args.mixture).items()}
    return TrainConfig.from_json(base)


def _classifier_config_from_args(args, file_cfg):
    base = ClassifierConfig.desk().to_json()
    base.update(file_cfg.get("classifier", {}))
    if args.d_model is not None:
        base["d_model"] = args.d_model
    if getattr(args, "freeze_encoder", False):
        base["freeze_encoder"] = True
    return ClassifierConfig.from_json(base)


def cmd_train(args):
    if not os.path.exists(args.manifest):
        raise KwspotError(f"manifest not found: {args.manifest}")
    out_dir = _ensure_out_dir(args.out_dir)
    file_cfg = _load_config_file(args.config)
    train_cfg = _train_config_from_args(args, file_cfg)
    clf_cfg = _classifier_config_from_args(args, file_cfg)

    corpus = load_corpus(args.manifest, generator=_manifest_generator(args.manifest))
    log.info("loaded %d utterances from %s", len(corpus), args.manifest)
    _write_resolved_config(out_dir, {"train": train_cfg.to_json(),
                                     "classifier": clf_cfg.to_json()})

    try:
        checkpoint, records = fit(corpus, train_cfg, clf_cfg, out_dir=out_dir,
                                  resume_from=args.resume)
    except NonFiniteLoss as e:
        dump = os.path.join(out_dir, "diagnostic_dump.json")
        with open(dump, "w", encoding="utf-8") as f:
            json.dump(getattr(e, "batch_summary", {"error": str(e)}), f, indent=2)
        log.error("training aborted: %s (batch dumped to %s)", e, dump)
        return EXIT_NUMERIC

    from .plotting import save_loss_curve

    if records:
        save_loss_curve(records, os.path.join(out_dir, "loss_curve.png"))
    log.info("checkpoint: %s (%d steps)", os.path.join(out_dir, "checkpoint.ckpt"),
             checkpoint.step)
    return EXIT_OK


# -- eval --------------------------------------------------------------------


def cmd_eval(args):
    if not os.path.exists(args.checkpoint):
        raise KwspotError(f"checkpoint not found: {args.checkpoint}")
    if not os.path.exists(args.manifest):
        raise KwspotError(f"manifest not found: {args.manifest}")
    out_dir = _ensure_out_dir(args.out_dir)
    mixture = (_parse_mixture(args.neg_mix) if args.neg_mix is not None
               else dict(EVAL_MIXTURE))

    checkpoint = Checkpoint.load(args.checkpoint)
    encoder, classifier = checkpoint.build_models()
    corpus = load_corpus(args.manifest, generator=_manifest_generator(args.manifest))
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(args.seed or 0)))

    report, items, scores = evaluate(encoder, classifier, corpus, mixture, rng,
                                     pairs_per_utterance=args.pairs_per_utterance,
                                     threshold=args.threshold)
    _write_resolved_config(out_dir, {
        "checkpoint": os.path.abspath(args.checkpoint),
        "neg_mix": {k.value: v for k, v in normalize_mixture(mixture).items()},
        "pairs_per_utterance": args.pairs_per_utterance,
        "threshold": args.threshold,
        "seed": args.seed or 0,
    })
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")

    from .plotting import save_roc_curve

    labels = np.array([it.label for it in items])
    save_roc_curve(scores, labels, os.path.join(out_dir, "roc.png"), report)
    log.info("eval: f1=%.4f auc=%.4f eer=%.4f (%d pos / %d neg)",
             report["f1"], report["auc"], report["eer"],
             report["n_pos"], report["n_neg"])
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


# -- scan --------------------------------------------------------------------


def cmd_scan(args):
    if not os.path.exists(args.checkpoint):
        raise KwspotError(f"checkpoint not found: {args.checkpoint}")
    out_dir = _ensure_out_dir(args.out_dir)
    checkpoint = Checkpoint.load(args.checkpoint)
    encoder, classifier = checkpoint.build_models()
    features = _load_input_features(args.input)

    norm_params, _ = encoder.encode_keyword(args.keyword)
    rows = classifier.scan(features, norm_params, args.window, args.stride)

    csv_path = os.path.join(out_dir, "scan.csv")
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write("t_start_s,t_end_s,probability\n")
        for t0, t1, p in rows:
            f.write(f"{t0:.6f},{t1:.6f},{p:.6f}\n")

    from .plotting import save_scan_trace

    save_scan_trace(rows, os.path.join(out_dir, "scan.png"), args.keyword)
    _write_resolved_config(out_dir, {
        "checkpoint": os.path.abspath(args.checkpoint),
        "input": os.path.abspath(args.input),
        "keyword": args.keyword, "window": args.window, "stride": args.stride,
    })
    best = max(rows, key=lambda r: r[2])
    log.info("scan: %d windows, peak p=%.4f at [%.2fs, %.2fs]",
             len(rows), best[2], best[0], best[1])
    return EXIT_OK


# -- mine --------------------------------------------------------------------


def cmd_mine(args):
    if not os.path.exists(args.manifest):
        raise KwspotError(f"manifest not found: {args.manifest}")
    out_dir = _ensure_out_dir(args.out_dir)
    mixture = normalize_mixture(_parse_mixture(args.mixture)
                                if args.mixture is not None else dict(EVAL_MIXTURE))

    entries = load_manifest(args.manifest, check_files=False)
    vocab = sorted({w for e in entries for w in e.transcript if len(w) >= 3})
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(args.seed or 0)))
    char_map = SimilarCharMap()

    needs_nk = NegativeStrategy.NEAREST_KEYWORD in mixture
    encoder = None
    if needs_nk:
        if args.checkpoint:
            encoder, _ = Checkpoint.load(args.checkpoint).build_models()
        else:
            raise UsageError("the nk strategy needs --checkpoint for its "
                             "text embeddings")

    from .data import CorpusExample, assemble_batch

    triples = []
    eligible = [e for e in entries if any(len(w) >= 3 for w in e.transcript)]
    if not eligible:
        raise KwspotError("no manifest entry has an eligible keyword")
    dummy = np.zeros((4, 1), dtype=np.float32)
    while len(triples) < args.n:
        group_sz = min(args.batch_size // 2, len(eligible), args.n - len(triples))
        chosen = [eligible[int(i)] for i in rng.choice(len(eligible),
                                                       size=group_sz, replace=False)]
        if needs_nk:
            cfg_like = TrainConfig.desk(mixture={k.value: v for k, v in mixture.items()},
                                        seed=args.seed or 0)
            batch = assemble_batch(
                [CorpusExample(features=dummy, transcript=e.transcript) for e in chosen],
                vocab, encoder, cfg_like, rng, char_map=char_map)
            half = batch.size // 2
            for i in range(half):
                triples.append({"positive": batch.keywords[i],
                                "negative": batch.keywords[half + i],
                                "strategy": batch.strategies[half + i].value})
        else:
            for e in chosen:
                pair = make_training_pair(dummy, e.transcript, vocab, mixture,
                                          rng, char_map=char_map)
                triples.append({"positive": pair.positive,
                                "negative": pair.negative,
                                "strategy": pair.strategy.value})
    triples = triples[: args.n]

    out_path = os.path.join(out_dir, "negatives.jsonl")
    with open(out_path, "w", encoding="utf-8") as f:
        for t in triples:
            f.write(json.dumps(t, sort_keys=True) + "\n")
    _write_resolved_config(out_dir, {
        "mixture": {k.value: v for k, v in mixture.items()},
        "n": args.n, "seed": args.seed or 0,
    })
    log.info("wrote %d (positive, negative, strategy) triples to %s",
             len(triples), out_path)
    return EXIT_OK


# -- predict -----------------------------------------------------------------


def cmd_predict(args):
    if not os.path.exists(args.checkpoint):
        raise KwspotError(f"checkpoint not found: {args.checkpoint}")
    if not os.path.exists(args.keywords_file):
        raise KwspotError(f"keywords file not found: {args.keywords_file}")
    checkpoint = Checkpoint.load(args.checkpoint)
    encoder, classifier = checkpoint.build_models()
    with open(args.keywords_file, encoding="utf-8") as f:
        keywords = [line.strip() for line in f if line.strip()]
    if not keywords:
        raise KwspotError(f"{args.keywords_file} contains no keywords")

    features = _load_input_features(args.input)
    registry = KeywordRegistry(encoder, classifier)
    registry.register_all(keywords)
    result = registry.score_all(features)

    payload = json.dumps(result, indent=2, sort_keys=True)
    print(payload)
    if args.out_dir:
        out_dir = _ensure_out_dir(args.out_dir)
        with open(os.path.join(out_dir, "predictions.json"), "w", encoding="utf-8") as f:
            f.write(payload + "\n")
        _write_resolved_config(out_dir, {
            "checkpoint": os.path.abspath(args.checkpoint),
            "input": os.path.abspath(args.input),
            "keywords": keywords,
        })
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def _int_pair(text):
    try:
        a, b = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'min,max', got {text!r}") from None
    return a, b


def build_parser():
    parser = _Parser(prog="kwspot",
                     description="Open-vocabulary keyword spotting toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="materialize a synthetic corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-train", type=int, default=500)
    p.add_argument("--n-eval", type=int, default=200)
    p.add_argument("--vocab-size", type=int, default=60)
    p.add_argument("--words-per-utt", type=_int_pair, default=(3, 6))
    p.add_argument("--word-len", type=_int_pair, default=(4, 8))
    p.add_argument("--config", help="JSON config file (synth section)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", help="JSON config file (train/classifier sections)")
    p.add_argument("--preset", choices=["desk", "paper"], default="desk")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="sets both learning rates")
    p.add_argument("--text-lr", type=float)
    p.add_argument("--classifier-lr", type=float)
    p.add_argument("--optimizer", choices=["adam", "sgd"])
    p.add_argument("--mixture", help="e.g. random=0.25,charsub=0.25,concat=0.25,nk=0.25")
    p.add_argument("--d-model", type=int)
    p.add_argument("--freeze-encoder", action="store_true")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a manifest against mixed negatives")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--neg-mix", help="e.g. random=1,charsub=1,concat=1")
    p.add_argument("--pairs-per-utterance", type=int, default=1)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("scan", help="sliding-window probability trace")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help=".wav or .melf")
    p.add_argument("--keyword", required=True)
    p.add_argument("--window", type=int, default=60, help="window in 10 ms frames")
    p.add_argument("--stride", type=int, default=15)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("mine", help="dump (positive, negative, strategy) triples")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--mixture", help="default random/charsub/concat equally")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--checkpoint", help="needed when the mixture includes nk")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("predict", help="score registered keywords on one input")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--keywords-file", required=True)
    p.add_argument("--input", required=True, help=".wav or .melf")
    p.add_argument("--out-dir")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        log.error("%s", e)
        return EXIT_USAGE
    except NonFiniteLoss as e:
        log.error("numerical failure: %s", e)
        return EXIT_NUMERIC
    except KwspotError as e:
        log.error("%s", e)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
