"""Training loop behavior: learning, early stopping, determinism,
checkpoint round-trips, divergence handling."""

import json

import numpy as np
import pytest

from openintent import corpus as cp
from openintent import encoder as enc
from openintent.corpus import encode_batch
from openintent.trainer import (IncompatibleTableError, TrainConfig,
                                TrainingDiverged, extract_features, train)

from conftest import make_embedding_file, make_keyword_corpus


def train_accuracy(params, corpus, table):
    ids = corpus.split_indices("train")
    batch, lengths = encode_batch(corpus, table, ids)
    feats = enc.forward(params, batch, lengths, table)
    scores = enc.class_scores(params, feats)
    labels = np.array([corpus.classes.index(corpus.utterances[i].label)
                       for i in ids])
    return float((scores.argmax(axis=1) == labels).mean())


def small_cfg(**kw):
    base = dict(batch_size=8, max_epochs=50, patience=50, seed=3,
                hidden_size=8)
    base.update(kw)
    return TrainConfig(**base)


def make_selfval_corpus():
    """Separable 2-class toy whose validation split mirrors its training
    utterances, so best-validation parameters track training fit."""
    base = make_keyword_corpus({
        "alarm": ("wake", "alarm", "morning", "clock"),
        "music": ("play", "song", "track", "band"),
    }, n_train=24, n_val=0, n_test=4, seed=3)
    mirrored = tuple(
        cp.Utterance(u.tokens, u.label, "validation")
        for u in base.utterances if u.split == "train")
    return cp.Corpus(base.utterances + mirrored, base.classes, base.max_len)


class TestLearning:
    @pytest.mark.parametrize("mode", ["softmax", "lmcl", "sigmoid"])
    def test_separable_toy_corpus_reaches_99(self, tmp_path, mode):
        corpus = make_selfval_corpus()
        words = {t for u in corpus.utterances for t in u.tokens}
        path = make_embedding_file(tmp_path / "v.txt", words, dim=8, seed=11)
        table = cp.build_embeddings(corpus, path, 8)
        params, report = train(corpus, table, small_cfg(loss_mode=mode))
        assert train_accuracy(params, corpus, table) >= 0.99
        assert report.epochs_run <= 50

    def test_loss_curve_decreases(self, toy_corpus, toy_table):
        _, report = train(toy_corpus, toy_table, small_cfg())
        curve = report.loss_curve
        assert np.mean(curve[:5]) > np.mean(curve[-5:])

    def test_deterministic_given_seed(self, toy_corpus, toy_table):
        cfg = small_cfg(max_epochs=8)
        _, r1 = train(toy_corpus, toy_table, cfg)
        _, r2 = train(toy_corpus, toy_table, cfg)
        assert r1.loss_curve == r2.loss_curve
        assert r1.val_curve == r2.val_curve

    def test_different_seeds_differ(self, toy_corpus, toy_table):
        _, r1 = train(toy_corpus, toy_table, small_cfg(max_epochs=5, seed=1))
        _, r2 = train(toy_corpus, toy_table, small_cfg(max_epochs=5, seed=2))
        assert r1.loss_curve != r2.loss_curve


class TestEarlyStopping:
    def test_patience_exhaustion_stops_early(self, toy_corpus, toy_table):
        params, report = train(toy_corpus, toy_table,
                               small_cfg(max_epochs=200, patience=5))
        assert report.epochs_run < 200
        assert report.best_epoch <= report.epochs_run - 5
        assert report.best_validation_accuracy == max(report.val_curve)

    def test_best_epoch_never_after_stop(self, toy_corpus, toy_table):
        _, report = train(toy_corpus, toy_table,
                          small_cfg(max_epochs=30, patience=4))
        assert report.best_epoch <= report.epochs_run

    def test_returned_params_are_best_epoch_params(self, toy_corpus,
                                                   toy_table):
        # retraining with max_epochs == best_epoch reproduces the returned
        # parameters exactly (same shuffling stream)
        params, report = train(toy_corpus, toy_table,
                               small_cfg(max_epochs=25, patience=6))
        replay, _ = train(toy_corpus, toy_table,
                          small_cfg(max_epochs=report.best_epoch,
                                    patience=10 ** 6))
        for (n1, a), (n2, b) in zip(params.tensors(), replay.tensors()):
            np.testing.assert_array_equal(a, b, err_msg=n1)


class TestTrainLog:
    def test_jsonl_log_one_record_per_epoch(self, toy_corpus, toy_table,
                                            tmp_path):
        log = tmp_path / "log.jsonl"
        _, report = train(toy_corpus, toy_table, small_cfg(max_epochs=6),
                          log_path=log)
        records = [json.loads(line) for line in log.read_text().splitlines()]
        assert len(records) == report.epochs_run
        assert records[0].keys() == {"epoch", "train_loss", "val_acc"}
        assert [r["train_loss"] for r in records] == report.loss_curve


class TestExtractFeatures:
    def test_lmcl_rows_unit_norm(self, toy_corpus, toy_table):
        params, _ = train(toy_corpus, toy_table,
                          small_cfg(loss_mode="lmcl", max_epochs=5))
        feats = extract_features(params, toy_corpus, "test", toy_table)
        norms = np.linalg.norm(feats.rows, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-9)

    def test_softmax_rows_left_raw(self, toy_corpus, toy_table):
        params, _ = train(toy_corpus, toy_table,
                          small_cfg(loss_mode="softmax", max_epochs=5))
        feats = extract_features(params, toy_corpus, "test", toy_table)
        norms = np.linalg.norm(feats.rows, axis=1)
        assert not np.allclose(norms, 1.0, atol=1e-3)

    def test_empty_split_gives_empty_matrix(self, toy_corpus, toy_table):
        params, _ = train(toy_corpus, toy_table, small_cfg(max_epochs=2))
        sub = toy_corpus.subset(toy_corpus.classes,
                                splits=("train", "validation"))
        feats = extract_features(params, sub, "test", toy_table)
        assert feats.rows.shape == (0, params.feature_size)
        assert feats.row_ids == ()

    def test_same_split_twice_identical(self, toy_corpus, toy_table):
        params, _ = train(toy_corpus, toy_table, small_cfg(max_epochs=3))
        f1 = extract_features(params, toy_corpus, "test", toy_table)
        f2 = extract_features(params, toy_corpus, "test", toy_table)
        np.testing.assert_array_equal(f1.rows, f2.rows)

    def test_rows_follow_corpus_order(self, toy_corpus, toy_table):
        params, _ = train(toy_corpus, toy_table, small_cfg(max_epochs=2))
        feats = extract_features(params, toy_corpus, "validation", toy_table)
        assert list(feats.row_ids) == toy_corpus.split_indices("validation")

    def test_vocab_hash_mismatch_rejected(self, toy_corpus, toy_table,
                                          tmp_path):
        params, _ = train(toy_corpus, toy_table, small_cfg(max_epochs=2))
        words = {t for u in toy_corpus.utterances for t in u.tokens}
        other_path = make_embedding_file(tmp_path / "other.txt", words,
                                         dim=8, seed=999)
        other = cp.build_embeddings(toy_corpus, other_path, 8)
        with pytest.raises(IncompatibleTableError):
            extract_features(params, toy_corpus, "test", other)

    def test_checkpoint_round_trip_bit_identical(self, toy_corpus, toy_table,
                                                 tmp_path):
        params, _ = train(toy_corpus, toy_table,
                          small_cfg(loss_mode="lmcl", max_epochs=4))
        direct = extract_features(params, toy_corpus, "test", toy_table)
        path = tmp_path / "ckpt.npz"
        enc.save_checkpoint(params, path)
        loaded, _ = enc.load_checkpoint(path)
        roundtrip = extract_features(loaded, toy_corpus, "test", toy_table)
        np.testing.assert_array_equal(direct.rows, roundtrip.rows)


class TestDivergence:
    def test_nonfinite_activation_aborts_with_diagnostic(self, toy_corpus,
                                                         toy_table):
        vectors = toy_table.vectors.copy()
        vectors[2] = np.inf  # first real word in the vocabulary
        broken = cp.EmbeddingTable(toy_table.vocab, vectors)
        with pytest.raises(TrainingDiverged) as err:
            train(toy_corpus, broken, small_cfg(max_epochs=3))
        assert err.value.epoch == 1
        assert isinstance(err.value.params, enc.EncoderParams)


class TestTrainableEmbeddings:
    def test_embedding_rows_move(self, toy_corpus, toy_table):
        params, _ = train(toy_corpus, toy_table,
                          small_cfg(max_epochs=3, train_embeddings=True))
        assert params.embedding_vectors is not None
        used = toy_table.index(toy_corpus.utterances[0].tokens[0])
        assert not np.array_equal(params.embedding_vectors[used],
                                  toy_table.vectors[used])
        # frozen table object itself must be untouched
        assert not toy_table.vectors.flags.writeable
