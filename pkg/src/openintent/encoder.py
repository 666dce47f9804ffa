"""Bidirectional LSTM sentence encoder with explicit reverse-mode gradients.

The sentence representation concatenates the forward direction's output at the
last real token with the backward direction's output at the first token, so
padding positions never contribute.  Everything runs in double precision and
is deterministic for a fixed seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import EmbeddingTable

CHECKPOINT_VERSION = 1
NORM_EPS = 1e-12  # guard under the L2 norms in cosine scoring

MODES = ("softmax", "lmcl", "sigmoid")


class NumericError(FloatingPointError):
    """Non-finite activation; carries the offending batch row and time step."""

    def __init__(self, message: str, batch_row: int, time_step: int):
        super().__init__(message)
        self.batch_row = batch_row
        self.time_step = time_step


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint file."""


@dataclass
class LstmCellParams:
    """One direction's recurrence weights; gate rows stacked as i, f, g, o."""
    w_input: np.ndarray   # 4h x m
    w_hidden: np.ndarray  # 4h x h
    bias: np.ndarray      # 4h

    @property
    def hidden_size(self) -> int:
        return self.w_hidden.shape[1]

    def copy(self) -> "LstmCellParams":
        return LstmCellParams(self.w_input.copy(), self.w_hidden.copy(),
                              self.bias.copy())

    def zeros_like(self) -> "LstmCellParams":
        return LstmCellParams(np.zeros_like(self.w_input),
                              np.zeros_like(self.w_hidden),
                              np.zeros_like(self.bias))


@dataclass
class EncoderParams:
    forward_cell: LstmCellParams
    backward_cell: LstmCellParams
    head_weights: np.ndarray            # d x C, d = 2h
    head_bias: np.ndarray | None        # C; absent in lmcl mode
    mode: str = "softmax"
    vocab_hash: str = ""
    embedding_vectors: np.ndarray | None = None  # set when embeddings were trained

    @property
    def hidden_size(self) -> int:
        return self.forward_cell.hidden_size

    @property
    def feature_size(self) -> int:
        return 2 * self.hidden_size

    @property
    def num_classes(self) -> int:
        return self.head_weights.shape[1]

    def tensors(self):
        yield "forward.w_input", self.forward_cell.w_input
        yield "forward.w_hidden", self.forward_cell.w_hidden
        yield "forward.bias", self.forward_cell.bias
        yield "backward.w_input", self.backward_cell.w_input
        yield "backward.w_hidden", self.backward_cell.w_hidden
        yield "backward.bias", self.backward_cell.bias
        yield "head.weights", self.head_weights
        if self.head_bias is not None:
            yield "head.bias", self.head_bias
        if self.embedding_vectors is not None:
            yield "embedding.vectors", self.embedding_vectors

    def copy(self) -> "EncoderParams":
        return replace(
            self,
            forward_cell=self.forward_cell.copy(),
            backward_cell=self.backward_cell.copy(),
            head_weights=self.head_weights.copy(),
            head_bias=None if self.head_bias is None else self.head_bias.copy(),
            embedding_vectors=(None if self.embedding_vectors is None
                               else self.embedding_vectors.copy()),
        )


@dataclass
class EncoderGrads:
    forward_cell: LstmCellParams
    backward_cell: LstmCellParams
    head_weights: np.ndarray
    head_bias: np.ndarray | None
    embedding_vectors: np.ndarray | None = None

    def tensors(self):
        yield "forward.w_input", self.forward_cell.w_input
        yield "forward.w_hidden", self.forward_cell.w_hidden
        yield "forward.bias", self.forward_cell.bias
        yield "backward.w_input", self.backward_cell.w_input
        yield "backward.w_hidden", self.backward_cell.w_hidden
        yield "backward.bias", self.backward_cell.bias
        yield "head.weights", self.head_weights
        if self.head_bias is not None:
            yield "head.bias", self.head_bias
        if self.embedding_vectors is not None:
            yield "embedding.vectors", self.embedding_vectors


@dataclass(frozen=True)
class FeatureMatrix:
    rows: np.ndarray              # n x d
    row_ids: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.rows.size and not np.isfinite(self.rows).all():
            raise ValueError("feature matrix contains non-finite values")


def _orthogonal(rng: np.random.Generator, size: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((size, size)))
    return q * np.sign(np.diag(r))


def init_cell(rng: np.random.Generator, emb_dim: int, hidden: int) -> LstmCellParams:
    limit = np.sqrt(6.0 / (emb_dim + hidden))
    w_input = rng.uniform(-limit, limit, size=(4 * hidden, emb_dim))
    w_hidden = np.vstack([_orthogonal(rng, hidden) for _ in range(4)])
    bias = np.zeros(4 * hidden)
    bias[hidden:2 * hidden] = 1.0  # forget gate opens at init
    return LstmCellParams(w_input, w_hidden, bias)


def init_encoder(rng: np.random.Generator, emb_dim: int, hidden: int,
                 n_classes: int, mode: str = "softmax",
                 vocab_hash: str = "") -> EncoderParams:
    if mode not in MODES:
        raise ValueError(f"unknown head mode {mode!r}")
    d = 2 * hidden
    limit = np.sqrt(6.0 / (d + n_classes))
    head_w = rng.uniform(-limit, limit, size=(d, n_classes))
    head_b = None if mode == "lmcl" else np.zeros(n_classes)
    return EncoderParams(
        forward_cell=init_cell(rng, emb_dim, hidden),
        backward_cell=init_cell(rng, emb_dim, hidden),
        head_weights=head_w,
        head_bias=head_b,
        mode=mode,
        vocab_hash=vocab_hash,
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _run_direction(cell: LstmCellParams, emb: np.ndarray, mask: np.ndarray,
                   reverse: bool, keep_cache: bool):
    """Run one LSTM direction over a padded batch.

    emb is batch x L x m, mask is batch x L (1.0 on real tokens).  Masked
    steps carry state through unchanged, so the returned final state is the
    output at the last real token (forward) or first token (reverse).
    """
    B, L, _ = emb.shape
    h = cell.hidden_size
    hs = np.zeros((B, h))
    cs = np.zeros((B, h))
    order = range(L - 1, -1, -1) if reverse else range(L)
    cache = [] if keep_cache else None

    for t in order:
        v = emb[:, t, :]
        m = mask[:, t:t + 1]
        with np.errstate(over="ignore", invalid="ignore"):
            a = v @ cell.w_input.T + hs @ cell.w_hidden.T + cell.bias
            gi = _sigmoid(a[:, :h])
            gf = _sigmoid(a[:, h:2 * h])
            gg = np.tanh(a[:, 2 * h:3 * h])
            go = _sigmoid(a[:, 3 * h:])
            c_new = gf * cs + gi * gg
            tanh_c = np.tanh(c_new)
            h_new = go * tanh_c
        if not (np.isfinite(h_new).all() and np.isfinite(c_new).all()):
            rows, _ = np.nonzero(~(np.isfinite(h_new) & np.isfinite(c_new)))
            raise NumericError(
                f"non-finite activation at batch row {rows[0]}, time step {t}",
                batch_row=int(rows[0]), time_step=int(t))
        if keep_cache:
            cache.append((t, m, hs, cs, gi, gf, gg, go, tanh_c))
        cs = m * c_new + (1.0 - m) * cs
        hs = m * h_new + (1.0 - m) * hs
    return hs, cache


def _direction_backward(cell: LstmCellParams, emb: np.ndarray, cache: list,
                        d_final: np.ndarray):
    """Backpropagate one direction from its final hidden state."""
    h = cell.hidden_size
    grads = cell.zeros_like()
    d_emb = np.zeros_like(emb)
    dh = d_final.copy()
    dc = np.zeros_like(d_final)

    for t, m, h_prev, c_prev, gi, gf, gg, go, tanh_c in reversed(cache):
        dh_step = m * dh
        dc_step = m * dc
        dh_pass = (1.0 - m) * dh
        dc_pass = (1.0 - m) * dc

        d_go = dh_step * tanh_c
        dc_new = dc_step + dh_step * go * (1.0 - tanh_c ** 2)
        d_gf = dc_new * c_prev
        d_gi = dc_new * gg
        d_gg = dc_new * gi
        dc = dc_new * gf + dc_pass

        da = np.hstack([
            d_gi * gi * (1.0 - gi),
            d_gf * gf * (1.0 - gf),
            d_gg * (1.0 - gg ** 2),
            d_go * go * (1.0 - go),
        ])
        grads.w_input += da.T @ emb[:, t, :]
        grads.w_hidden += da.T @ h_prev
        grads.bias += da.sum(axis=0)
        d_emb[:, t, :] = da @ cell.w_input
        dh = da @ cell.w_hidden + dh_pass
    return grads, d_emb


def _embed(params: EncoderParams, batch: np.ndarray,
           table: EmbeddingTable) -> tuple[np.ndarray, np.ndarray]:
    vectors = (params.embedding_vectors if params.embedding_vectors is not None
               else table.vectors)
    emb = vectors[batch]                       # B x L x m
    L = batch.shape[1]
    return emb, L


def _length_mask(lengths: np.ndarray, L: int) -> np.ndarray:
    return (np.arange(L)[None, :] < lengths[:, None]).astype(np.float64)


def forward(params: EncoderParams, batch: np.ndarray, lengths: np.ndarray,
            table: EmbeddingTable,
            row_ids: tuple[int, ...] | None = None) -> FeatureMatrix:
    """Sentence features for a padded index batch (rows are [fwd_last; bwd_first])."""
    if batch.shape[0] != lengths.shape[0]:
        raise ValueError("batch and length vector disagree on batch size")
    if batch.size and lengths.min() < 1:
        raise ValueError("all sequences must have length >= 1")
    if batch.shape[0] == 0:
        rows = np.zeros((0, params.feature_size))
        return FeatureMatrix(rows, row_ids or ())
    emb, L = _embed(params, batch, table)
    mask = _length_mask(lengths, L)
    h_fwd, _ = _run_direction(params.forward_cell, emb, mask, reverse=False,
                              keep_cache=False)
    h_bwd, _ = _run_direction(params.backward_cell, emb, mask, reverse=True,
                              keep_cache=False)
    rows = np.hstack([h_fwd, h_bwd])
    return FeatureMatrix(rows, row_ids if row_ids is not None
                         else tuple(range(batch.shape[0])))


def forward_with_cache(params: EncoderParams, batch: np.ndarray,
                       lengths: np.ndarray, table: EmbeddingTable):
    """forward() variant keeping per-step activations for backward()."""
    emb, L = _embed(params, batch, table)
    mask = _length_mask(lengths, L)
    h_fwd, cache_f = _run_direction(params.forward_cell, emb, mask,
                                    reverse=False, keep_cache=True)
    h_bwd, cache_b = _run_direction(params.backward_cell, emb, mask,
                                    reverse=True, keep_cache=True)
    rows = np.hstack([h_fwd, h_bwd])
    cache = {"emb": emb, "batch": batch, "fwd": cache_f, "bwd": cache_b}
    return FeatureMatrix(rows), cache


def backward_from_cache(params: EncoderParams, cache: dict,
                        d_features: np.ndarray,
                        train_embeddings: bool = False,
                        vocab_size: int | None = None) -> EncoderGrads:
    h = params.hidden_size
    emb = cache["emb"]
    g_fwd, demb_f = _direction_backward(params.forward_cell, emb,
                                        cache["fwd"], d_features[:, :h])
    g_bwd, demb_b = _direction_backward(params.backward_cell, emb,
                                        cache["bwd"], d_features[:, h:])
    grads = EncoderGrads(
        forward_cell=g_fwd,
        backward_cell=g_bwd,
        head_weights=np.zeros_like(params.head_weights),
        head_bias=(None if params.head_bias is None
                   else np.zeros_like(params.head_bias)),
    )
    if train_embeddings:
        if vocab_size is None:
            raise ValueError("vocab_size required for embedding gradients")
        d_vectors = np.zeros((vocab_size, emb.shape[2]))
        np.add.at(d_vectors, cache["batch"], demb_f + demb_b)
        grads.embedding_vectors = d_vectors
    return grads


def backward(params: EncoderParams, batch: np.ndarray, lengths: np.ndarray,
             table: EmbeddingTable, d_features: np.ndarray,
             train_embeddings: bool = False) -> EncoderGrads:
    """Gradients of a scalar loss w.r.t. all encoder parameters, given the
    loss gradient w.r.t. the feature matrix of the paired forward call."""
    feats, cache = forward_with_cache(params, batch, lengths, table)
    if d_features.shape != feats.rows.shape:
        raise ValueError(f"upstream gradient shape {d_features.shape} does not "
                         f"match features {feats.rows.shape}")
    return backward_from_cache(params, cache, d_features,
                               train_embeddings=train_embeddings,
                               vocab_size=len(table.vocab))


def _guarded_norm(x: np.ndarray, axis: int) -> np.ndarray:
    return np.sqrt((x * x).sum(axis=axis, keepdims=True) + NORM_EPS)


def class_scores(params: EncoderParams, feats: FeatureMatrix,
                 mode: str | None = None) -> np.ndarray:
    """Class scores per feature row: raw logits (softmax/sigmoid head) or
    cosines of the L2-normalized features against normalized class weights."""
    mode = params.mode if mode is None else mode
    if mode not in MODES:
        raise ValueError(f"unknown head mode {mode!r}")
    x = feats.rows
    if mode == "lmcl":
        xn = x / _guarded_norm(x, axis=1)
        wn = params.head_weights / _guarded_norm(params.head_weights, axis=0)
        return xn @ wn
    scores = x @ params.head_weights
    if params.head_bias is not None:
        scores = scores + params.head_bias
    return scores


def class_scores_backward(params: EncoderParams, feats: FeatureMatrix,
                          d_scores: np.ndarray, mode: str | None = None):
    """Chain d(loss)/d(scores) back to (d_features, d_head_weights, d_head_bias)."""
    mode = params.mode if mode is None else mode
    x = feats.rows
    W = params.head_weights
    if mode == "lmcl":
        nx = _guarded_norm(x, axis=1)
        nw = _guarded_norm(W, axis=0)
        xn = x / nx
        wn = W / nw
        cos = xn @ wn
        weighted = d_scores * cos
        d_x = (d_scores @ wn.T - weighted.sum(axis=1, keepdims=True) * xn) / nx
        d_w = (xn.T @ d_scores - wn * weighted.sum(axis=0, keepdims=True)) / nw
        return d_x, d_w, None
    d_x = d_scores @ W.T
    d_w = x.T @ d_scores
    d_b = None if params.head_bias is None else d_scores.sum(axis=0)
    return d_x, d_w, d_b


def save_checkpoint(params: EncoderParams, path, meta: dict | None = None) -> None:
    """Self-describing archive of all parameter tensors plus run metadata."""
    arrays = {name.replace(".", "__"): arr for name, arr in params.tensors()}
    doc = {
        "version": CHECKPOINT_VERSION,
        "mode": params.mode,
        "vocab_hash": params.vocab_hash,
        "hidden_size": params.hidden_size,
        "embedding_dim": params.forward_cell.w_input.shape[1],
        "num_classes": params.num_classes,
        "has_head_bias": params.head_bias is not None,
        "has_embedding_vectors": params.embedding_vectors is not None,
    }
    if meta:
        doc.update(meta)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(
            json.dumps(doc, sort_keys=True).encode("utf-8"), dtype=np.uint8),
            **arrays)


def load_checkpoint(path) -> tuple[EncoderParams, dict]:
    try:
        with np.load(path) as data:
            meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(
                    f"unsupported checkpoint version {meta.get('version')!r}")
            get = lambda name: np.array(data[name.replace(".", "__")])
            params = EncoderParams(
                forward_cell=LstmCellParams(get("forward.w_input"),
                                            get("forward.w_hidden"),
                                            get("forward.bias")),
                backward_cell=LstmCellParams(get("backward.w_input"),
                                             get("backward.w_hidden"),
                                             get("backward.bias")),
                head_weights=get("head.weights"),
                head_bias=get("head.bias") if meta["has_head_bias"] else None,
                mode=meta["mode"],
                vocab_hash=meta["vocab_hash"],
                embedding_vectors=(get("embedding.vectors")
                                   if meta["has_embedding_vectors"] else None),
            )
    except CheckpointError:
        raise
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return params, meta
