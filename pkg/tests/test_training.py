import math
import os

import numpy as np
import pytest

from kwspot import autodiff as ad
from kwspot.autodiff import Tensor
from kwspot.classifier import AudioClassifier, ClassifierConfig, PaddedBatchFeatures
from kwspot.data import CorpusExample, SynthSpec, SyntheticGenerator, assemble_batch, corpus_vocabulary
from kwspot.errors import NonFiniteLoss
from kwspot.text_encoder import CharVocab, TextEncoder, TextEncoderConfig
from kwspot.training import (
    Adam,
    Checkpoint,
    LossRecord,
    TrainConfig,
    bce_loss,
    build_optimizer,
    clip_gradients,
    fit,
    phi_gradient_end_to_end,
    phi_gradient_two_stage,
    train_step,
    write_loss_csv,
)

TOY_TEXT = TextEncoderConfig(embed_dim=6, hidden_dim=10, num_layers=2,
                             n_adain_layers=4, d_model=8)
TOY_CLF = ClassifierConfig.toy(n_mels=8)


def toy_models(seed=0, dtype=np.float32):
    vocab = CharVocab("abcdefghijklmnopqrstuvwxyz")
    encoder = TextEncoder(TOY_TEXT, vocab, seed=seed, dtype=dtype)
    classifier = AudioClassifier(TOY_CLF, seed=seed + 1, dtype=dtype)
    return encoder, classifier


def toy_corpus(n=8, seed=0, feature_dim=8):
    gen = SyntheticGenerator(SynthSpec(seed=seed, feature_dim=feature_dim,
                                       alphabet="abcdefghij"))
    g = np.random.Generator(np.random.Philox(seed + 100))
    words = ["abc", "bead", "cafe", "dig", "each", "fig", "gab", "hid",
             "jig", "ace"]
    out = []
    for i in range(n):
        picks = [words[int(j)] for j in g.choice(len(words), size=3, replace=False)]
        feats, _ = gen.synthesize(picks, utterance_id=i)
        out.append(CorpusExample(features=feats, transcript=picks))
    return out


class TestBceLoss:
    def test_half_gives_ln2(self):
        for label in (0, 1):
            loss = bce_loss(Tensor(np.array([0.5])), np.array([label]))
            assert float(loss.data) == pytest.approx(math.log(2), abs=1e-6)

    def test_perfect_prediction_near_zero(self):
        loss = bce_loss(Tensor(np.array([1.0, 0.0])), np.array([1, 0]))
        assert 0 <= float(loss.data) < 1e-6

    def test_point_nine(self):
        loss = bce_loss(Tensor(np.array([0.9])), np.array([1]))
        assert float(loss.data) == pytest.approx(-math.log(0.9), abs=1e-6)

    def test_batch_mean(self):
        loss = bce_loss(Tensor(np.array([0.5, 0.5, 0.9, 0.9])),
                        np.array([1, 0, 1, 1]))
        expected = (2 * math.log(2) + 2 * -math.log(0.9)) / 4
        assert float(loss.data) == pytest.approx(expected, abs=1e-6)

    def test_gradient(self):
        p = Tensor(np.array([0.3, 0.8]), requires_grad=True)
        err = ad.grad_check(lambda: bce_loss(p, np.array([1, 0])), [p])
        assert err < 1e-7


class TestTrainStep:
    def _run_step(self, text_lr, classifier_lr, seed=0):
        encoder, classifier = toy_models(seed)
        corpus = toy_corpus(4, seed)
        config = TrainConfig.desk(batch_size=8, text_lr=text_lr,
                                  classifier_lr=classifier_lr, seed=seed)
        optimizer = build_optimizer(encoder, classifier, config)
        rng = np.random.Generator(np.random.Philox(seed))
        batch = assemble_batch(corpus, corpus_vocabulary(corpus), encoder,
                               config, rng)
        record = train_step(batch, encoder, classifier, optimizer, config)
        return encoder, classifier, record

    def test_zero_text_lr_freezes_phi(self):
        ref_enc, _ = toy_models(0)
        encoder, classifier, _ = self._run_step(text_lr=0.0, classifier_lr=1e-3)
        for n in encoder.params:
            assert np.array_equal(encoder.params[n].data, ref_enc.params[n].data), n
        ref_clf = AudioClassifier(TOY_CLF, seed=1)
        changed = any(not np.array_equal(classifier.params[n].data,
                                         ref_clf.params[n].data)
                      for n in classifier.params)
        assert changed

    def test_zero_classifier_lr_freezes_theta(self):
        encoder, classifier, _ = self._run_step(text_lr=1e-3, classifier_lr=0.0)
        ref_clf = AudioClassifier(TOY_CLF, seed=1)
        for n in classifier.params:
            assert np.array_equal(classifier.params[n].data, ref_clf.params[n].data), n
        ref_enc, _ = toy_models(0)
        changed = any(not np.array_equal(encoder.params[n].data,
                                         ref_enc.params[n].data)
                      for n in encoder.params)
        assert changed

    def test_loss_record_fields(self):
        _, _, record = self._run_step(1e-3, 1e-3)
        assert record.loss > 0 and np.isfinite(record.loss)
        assert 0 <= record.pos_acc <= 1 and 0 <= record.neg_acc <= 1

    def test_freeze_encoder_skips_stem(self):
        encoder = TextEncoder(TOY_TEXT, CharVocab("abcdefghij"), seed=0)
        classifier = AudioClassifier(ClassifierConfig.toy(n_mels=8, freeze_encoder=True),
                                     seed=1)
        config = TrainConfig.desk(batch_size=8, seed=0)
        optimizer = build_optimizer(encoder, classifier, config)
        assert not any(k.startswith("theta/stem.") for k in optimizer.params)
        assert any(k.startswith("theta/block0.") for k in optimizer.params)


class TestDeterminism:
    def _loss_stream(self, seed, steps=100):
        corpus = toy_corpus(8, 7)
        config = TrainConfig.desk(batch_size=8, seed=seed,
                                  epochs=(steps // 2))
        ckpt, records = fit(corpus, config, TOY_CLF, text_config=TOY_TEXT,
                            vocab=CharVocab("abcdefghij"))
        return [(r.step, r.loss, r.pos_acc, r.neg_acc) for r in records]

    def test_identical_seeds_identical_streams(self):
        a = self._loss_stream(3)
        b = self._loss_stream(3)
        assert len(a) >= 100
        assert a == b

    def test_different_seeds_differ(self):
        assert self._loss_stream(3) != self._loss_stream(4)


class TestFit:
    def test_zero_epochs_returns_initialization(self):
        corpus = toy_corpus(8)
        config = TrainConfig.desk(batch_size=8, epochs=0, seed=5)
        ckpt, records = fit(corpus, config, TOY_CLF, text_config=TOY_TEXT,
                            vocab=CharVocab("abcdefghij"))
        assert records == []
        fresh = TextEncoder(TOY_TEXT, CharVocab("abcdefghij"), seed=5)
        for n, arr in ckpt.phi.items():
            assert np.array_equal(arr, fresh.params[n].data)

    def test_writes_csv_and_checkpoints(self, tmp_path):
        corpus = toy_corpus(8)
        config = TrainConfig.desk(batch_size=8, epochs=2, seed=5)
        fit(corpus, config, TOY_CLF, out_dir=str(tmp_path),
            text_config=TOY_TEXT, vocab=CharVocab("abcdefghij"))
        assert (tmp_path / "loss.csv").exists()
        assert (tmp_path / "checkpoint.ckpt").exists()
        assert (tmp_path / "checkpoint_epoch1.ckpt").exists()
        assert (tmp_path / "checkpoint_epoch2.ckpt").exists()
        header = (tmp_path / "loss.csv").read_text().splitlines()[0]
        assert header == "step,loss,pos_acc,neg_acc"

    def test_loss_decreases_on_synthetic_task(self):
        corpus = toy_corpus(24, seed=9)
        config = TrainConfig.desk(batch_size=8, epochs=50, seed=1)  # 300 steps
        _, records = fit(corpus, config, TOY_CLF, text_config=TOY_TEXT,
                         vocab=CharVocab("abcdefghij"))
        losses = [r.loss for r in records]
        assert len(losses) >= 300
        early = float(np.median(losses[0:100]))
        late = float(np.median(losses[200:300]))
        assert late < early

    def test_resume_reproduces_uninterrupted_run(self, tmp_path):
        corpus = toy_corpus(8, seed=2)
        vocab = CharVocab("abcdefghij")

        config_full = TrainConfig.desk(batch_size=8, epochs=4, seed=6)
        _, records_full = fit(corpus, config_full, TOY_CLF,
                              text_config=TOY_TEXT, vocab=vocab)

        config_half = TrainConfig.desk(batch_size=8, epochs=2, seed=6)
        out = str(tmp_path)
        fit(corpus, config_half, TOY_CLF, out_dir=out, text_config=TOY_TEXT,
            vocab=vocab)
        resumed = Checkpoint.load(os.path.join(out, "checkpoint.ckpt"))
        resumed.train_config.epochs = 4
        _, records_resumed = fit(corpus, None, None, resume_from=resumed)

        tail_full = [(r.step, r.loss) for r in records_full[len(records_full) // 2:]]
        tail_resumed = [(r.step, r.loss) for r in records_resumed]
        assert tail_resumed == tail_full


class TestCheckpoint:
    def test_round_trip_bit_identical_forward(self, tmp_path):
        corpus = toy_corpus(8, seed=3)
        config = TrainConfig.desk(batch_size=8, epochs=1, seed=8)
        ckpt, _ = fit(corpus, config, TOY_CLF, text_config=TOY_TEXT,
                      vocab=CharVocab("abcdefghij"))
        path = tmp_path / "model.ckpt"
        ckpt.save(path)
        loaded = Checkpoint.load(path)

        enc_a, clf_a = ckpt.build_models()
        enc_b, clf_b = loaded.build_models()
        rng = np.random.default_rng(0)
        for probe in range(32):
            feats = rng.standard_normal((int(rng.integers(4, 20)), 8)).astype(np.float32)
            kw = "".join("abcdefghij"[i] for i in rng.integers(0, 10, 4))
            pa, _ = enc_a.encode_keyword(kw)
            pb, _ = enc_b.encode_keyword(kw)
            for ga, gb in zip(pa.gains, pb.gains):
                assert np.array_equal(ga, gb)
            batch = PaddedBatchFeatures.from_list([feats])
            out_a = clf_a.forward(batch, [pa])
            out_b = clf_b.forward(batch, [pb])
            assert np.array_equal(out_a, out_b)

    def test_round_trip_preserves_configs_and_state(self, tmp_path):
        corpus = toy_corpus(8, seed=4)
        config = TrainConfig.desk(batch_size=8, epochs=1, seed=9)
        ckpt, _ = fit(corpus, config, TOY_CLF, text_config=TOY_TEXT,
                      vocab=CharVocab("abcdefghij"))
        path = tmp_path / "model.ckpt"
        ckpt.save(path)
        loaded = Checkpoint.load(path)
        assert loaded.train_config.to_json() == ckpt.train_config.to_json()
        assert loaded.classifier_config == ckpt.classifier_config
        assert loaded.text_config == ckpt.text_config
        assert loaded.vocab == ckpt.vocab
        assert loaded.step == ckpt.step and loaded.epoch == ckpt.epoch
        from kwspot.training import _jsonify_rng_state

        assert _jsonify_rng_state(loaded.rng_state) == _jsonify_rng_state(ckpt.rng_state)
        assert loaded.opt_step == ckpt.opt_step
        for n, arr in ckpt.opt_tensors.items():
            assert np.array_equal(loaded.opt_tensors[n], arr)

    def test_bad_magic(self, tmp_path):
        from kwspot.errors import ParseError

        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"XXXX" + b"\x00" * 32)
        with pytest.raises(ParseError):
            Checkpoint.load(path)


class TestChainRuleFactorization:
    def test_two_stage_matches_end_to_end(self):
        # the update rule's explicit (Jacobian^T . grad) contraction against
        # plain reverse mode, in float64
        encoder, classifier = toy_models(seed=11, dtype=np.float64)
        rng = np.random.default_rng(12)
        feats = [rng.standard_normal((5, 8))]
        label = np.array([1])

        def loss_from_theta(gains, biases):
            probs = classifier.forward_graph(feats, gains, biases)
            return bce_loss(probs, label)

        g_e2e = phi_gradient_end_to_end(encoder, "cafe", loss_from_theta)
        g_two = phi_gradient_two_stage(encoder, "cafe", loss_from_theta)
        for name in g_e2e:
            num = np.abs(g_e2e[name] - g_two[name]).max()
            den = max(1e-12, np.abs(g_e2e[name]).max())
            assert num / den < 1e-6, name

    def test_training_applies_the_same_gradient(self):
        # one SGD step with eta=0 must move phi by exactly -alpha * grad
        encoder, classifier = toy_models(seed=13, dtype=np.float64)
        corpus = toy_corpus(2, seed=13)
        config = TrainConfig.desk(batch_size=4, optimizer="sgd", text_lr=1.0,
                                  classifier_lr=0.0, grad_clip_norm=0.0,
                                  seed=13, mixture={"random": 1.0})
        phi_before = {n: p.data.copy() for n, p in encoder.params.items()}
        rng = np.random.Generator(np.random.Philox(13))
        batch = assemble_batch(corpus, corpus_vocabulary(corpus), encoder,
                               config, rng)
        optimizer = build_optimizer(encoder, classifier, config)
        train_step(batch, encoder, classifier, optimizer, config)

        # recompute the same gradient with the two-stage contraction
        encoder2, classifier2 = toy_models(seed=13, dtype=np.float64)
        distinct = sorted(set(batch.keywords))
        feats = [batch.features.example(i) for i in range(batch.size)]

        total = {n: np.zeros_like(p.data) for n, p in encoder2.params.items()}
        for kw in distinct:
            rows = [i for i, k in enumerate(batch.keywords) if k == kw]

            def loss_for_kw(gains, biases, rows=rows):
                gain_rows = [ad.concat([g] * len(rows), axis=0) for g in gains]
                bias_rows = [ad.concat([b] * len(rows), axis=0) for b in biases]
                probs = classifier2.forward_graph([feats[i] for i in rows],
                                                  gain_rows, bias_rows)
                return ad.mul(bce_loss(probs, batch.labels[rows]),
                              len(rows) / batch.size)

            g = phi_gradient_two_stage(encoder2, kw, loss_for_kw)
            for n in total:
                total[n] += g[n]

        for n, p in encoder.params.items():
            applied = phi_before[n] - p.data  # alpha = 1
            num = np.abs(applied - total[n]).max()
            den = max(1e-12, np.abs(total[n]).max())
            assert num / den < 1e-6, n


class TestGradClip:
    def test_clip_caps_global_norm(self):
        grads = {"a": np.array([3.0, 4.0]), "b": np.array([0.0])}
        clipped = clip_gradients(grads, 1.0)
        total = sum(float(np.dot(g, g)) for g in clipped.values())
        assert total == pytest.approx(1.0)

    def test_small_gradients_untouched(self):
        grads = {"a": np.array([0.1, 0.1])}
        clipped = clip_gradients(grads, 1.0)
        assert np.array_equal(clipped["a"], grads["a"])


class TestLossCsv:
    def test_format(self, tmp_path):
        records = [LossRecord(0, 0.69314718, 0.5, 0.5),
                   LossRecord(1, 0.65000001, 0.75, 0.625)]
        path = tmp_path / "loss.csv"
        write_loss_csv(path, records)
        lines = path.read_text().splitlines()
        assert lines[0] == "step,loss,pos_acc,neg_acc"
        assert lines[1] == "0,0.69314718,0.500000,0.500000"
