"""Mini-batch training of the encoder under any of the three heads.

Adam with gradient clipping, per-epoch reshuffling from a (seed, epoch)
stream, validation-accuracy early stopping, and checkpointing of the best
epoch.  A fixed seed reproduces the run exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from .corpus import Corpus, EmbeddingTable, encode_batch
from .losses import LmclConfig, lmcl, sigmoid_bce, softmax_ce


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the last finite parameters."""

    def __init__(self, message: str, params: enc.EncoderParams, epoch: int):
        super().__init__(message)
        self.params = params
        self.epoch = epoch


class IncompatibleTableError(ValueError):
    """Checkpoint was trained against a different embedding table."""


@dataclass
class TrainConfig:
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 10
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    seed: int = 0
    loss_mode: str = "softmax"          # softmax | lmcl | sigmoid
    hidden_size: int = 64
    lmcl: LmclConfig = field(default_factory=LmclConfig)
    train_embeddings: bool = False

    def __post_init__(self):
        if self.loss_mode not in enc.MODES:
            raise ValueError(f"unknown loss mode {self.loss_mode!r}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")


@dataclass
class TrainReport:
    epochs_run: int
    best_epoch: int
    best_validation_accuracy: float
    loss_curve: list[float]
    val_curve: list[float]
    checkpoint_path: str | None = None


class Adam:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.step_count = 0
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def step(self, params: enc.EncoderParams, grads: enc.EncoderGrads) -> None:
        cfg = self.cfg
        self.step_count += 1
        b1c = 1.0 - cfg.beta1 ** self.step_count
        b2c = 1.0 - cfg.beta2 ** self.step_count
        for (name, p), (gname, g) in zip(params.tensors(), grads.tensors()):
            assert name == gname, f"tensor order mismatch: {name} vs {gname}"
            if name not in self.moments:
                self.moments[name] = (np.zeros_like(p), np.zeros_like(p))
            m, v = self.moments[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p -= cfg.learning_rate * (m / b1c) / (np.sqrt(v / b2c) + cfg.adam_eps)


def _clip_gradients(grads: enc.EncoderGrads, max_norm: float) -> None:
    total = np.sqrt(sum(float((g * g).sum()) for _, g in grads.tensors()))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for _, g in grads.tensors():
            g *= scale


def _loss_for_mode(mode: str, scores: np.ndarray, labels: np.ndarray,
                   lmcl_cfg: LmclConfig):
    if mode == "lmcl":
        return lmcl(scores, labels, lmcl_cfg)
    if mode == "sigmoid":
        return sigmoid_bce(scores, labels)
    return softmax_ce(scores, labels)


def _class_index(corpus: Corpus) -> dict[str, int]:
    return {c: i for i, c in enumerate(corpus.classes)}


def _split_labels(corpus: Corpus, ids: list[int],
                  index: dict[str, int]) -> np.ndarray:
    return np.array([index[corpus.utterances[i].label] for i in ids],
                    dtype=np.int64)


def _accuracy(params: enc.EncoderParams, corpus: Corpus, table: EmbeddingTable,
              ids: list[int], labels: np.ndarray, batch_size: int) -> float:
    if not ids:
        return 0.0
    correct = 0
    for start in range(0, len(ids), batch_size):
        chunk = ids[start:start + batch_size]
        batch, lengths = encode_batch(corpus, table, chunk)
        feats = enc.forward(params, batch, lengths, table)
        scores = enc.class_scores(params, feats)
        correct += int((scores.argmax(axis=1)
                        == labels[start:start + len(chunk)]).sum())
    return correct / len(ids)


def train(corpus: Corpus, table: EmbeddingTable, cfg: TrainConfig,
          log_path=None) -> tuple[enc.EncoderParams, TrainReport]:
    """Train on the corpus train split; returns the best-validation parameters.

    The corpus must already be restricted to the known classes; its class set
    defines the label indexing.
    """
    train_ids = corpus.split_indices("train")
    val_ids = corpus.split_indices("validation")
    if not train_ids:
        raise ValueError("training split is empty")
    index = _class_index(corpus)
    train_labels_all = _split_labels(corpus, train_ids, index)
    val_labels = _split_labels(corpus, val_ids, index)

    rng = np.random.default_rng(cfg.seed)
    params = enc.init_encoder(rng, table.dim, cfg.hidden_size,
                              len(corpus.classes), mode=cfg.loss_mode,
                              vocab_hash=table.content_hash())
    if cfg.train_embeddings:
        params.embedding_vectors = table.vectors.copy()
    optimizer = Adam(cfg)

    best_params = params.copy()
    best_acc = -1.0
    best_epoch = 0
    bad_checks = 0
    loss_curve: list[float] = []
    val_curve: list[float] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None

    try:
        epochs_run = 0
        for epoch in range(1, cfg.max_epochs + 1):
            epochs_run = epoch
            order = np.random.default_rng([cfg.seed, epoch]).permutation(
                len(train_ids))
            epoch_loss = 0.0
            for start in range(0, len(order), cfg.batch_size):
                chosen = order[start:start + cfg.batch_size]
                ids = [train_ids[i] for i in chosen]
                labels = train_labels_all[chosen]
                batch, lengths = encode_batch(corpus, table, ids)
                try:
                    feats, cache = enc.forward_with_cache(params, batch,
                                                          lengths, table)
                except enc.NumericError as err:
                    raise TrainingDiverged(
                        f"epoch {epoch}: {err}", best_params, epoch) from err
                scores = enc.class_scores(params, feats)
                out = _loss_for_mode(cfg.loss_mode, scores, labels, cfg.lmcl)
                if not np.isfinite(out.value):
                    raise TrainingDiverged(
                        f"epoch {epoch}: non-finite loss {out.value}",
                        best_params, epoch)
                d_feats, d_w, d_b = enc.class_scores_backward(
                    params, feats, out.score_gradients)
                grads = enc.backward_from_cache(
                    params, cache, d_feats,
                    train_embeddings=cfg.train_embeddings,
                    vocab_size=len(table.vocab))
                grads.head_weights = d_w
                if d_b is not None:
                    grads.head_bias = d_b
                _clip_gradients(grads, cfg.clip_norm)
                optimizer.step(params, grads)
                epoch_loss += out.value * len(ids)
            epoch_loss /= len(train_ids)
            loss_curve.append(epoch_loss)

            val_acc = _accuracy(params, corpus, table, val_ids, val_labels,
                                cfg.batch_size)
            val_curve.append(val_acc)
            if log_fh:
                log_fh.write(json.dumps({"epoch": epoch,
                                         "train_loss": epoch_loss,
                                         "val_acc": val_acc}) + "\n")
                log_fh.flush()

            if val_acc > best_acc:
                best_acc = val_acc
                best_epoch = epoch
                best_params = params.copy()
                bad_checks = 0
            else:
                bad_checks += 1
                if bad_checks >= cfg.patience:
                    break
    finally:
        if log_fh:
            log_fh.close()

    report = TrainReport(
        epochs_run=epochs_run,
        best_epoch=best_epoch,
        best_validation_accuracy=max(best_acc, 0.0),
        loss_curve=loss_curve,
        val_curve=val_curve,
    )
    return best_params, report


def features_from_batch(params: enc.EncoderParams, batch: np.ndarray,
                        lengths: np.ndarray,
                        table: EmbeddingTable) -> np.ndarray:
    """Encode one padded batch; margin-loss features come back L2-normalized."""
    rows = enc.forward(params, batch, lengths, table).rows
    if params.mode == "lmcl" and rows.size:
        rows = rows / np.sqrt((rows * rows).sum(axis=1, keepdims=True)
                              + enc.NORM_EPS)
    return rows


def extract_features(params: enc.EncoderParams, corpus: Corpus, split: str,
                     table: EmbeddingTable,
                     batch_size: int = 256) -> enc.FeatureMatrix:
    """Features for every utterance of a split, in corpus order.

    Rows are L2-normalized when the parameters were trained under the margin
    loss; raw otherwise.  Refuses tables other than the training one.
    """
    if params.vocab_hash and params.vocab_hash != table.content_hash():
        raise IncompatibleTableError(
            "embedding table does not match the checkpoint's vocabulary hash")
    ids = corpus.split_indices(split)
    chunks = []
    for start in range(0, len(ids), batch_size):
        chunk = ids[start:start + batch_size]
        batch, lengths = encode_batch(corpus, table, chunk)
        chunks.append(features_from_batch(params, batch, lengths, table))
    rows = (np.vstack(chunks) if chunks
            else np.zeros((0, params.feature_size)))
    return enc.FeatureMatrix(rows, tuple(ids))
