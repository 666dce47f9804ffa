"""Second-stage decision rules that map a test utterance to a known class or
the unknown label.

The density route fits a local-outlier-factor model on training features and
scores queries in novelty mode (the query is never its own neighbor).  The
maximum-softmax-probability rule and the per-class sigmoid-threshold rule are
the baselines it is compared against.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

UNKNOWN = -1                # predicted-class sentinel for rejections
REACH_EPS = 1e-12           # floor on reachability distances (duplicate guard)
DETECTOR_VERSION = 1
_CHUNK_ELEMENTS = 4_000_000  # cap on chunk_rows * n * d scratch elements


class DegenerateDensityError(ValueError):
    """Reference set has no spatial extent; densities are undefined."""


@dataclass(frozen=True)
class DetectionConfig:
    lof_k: int = 20
    lof_threshold: float = 1.5
    msp_threshold: float = 0.5
    doc_risk_factor: float = 3.0
    metric: str = "euclidean"

    def __post_init__(self):
        if self.lof_k < 1:
            raise ValueError("lof_k must be positive")
        if self.lof_threshold <= 0 or self.msp_threshold <= 0:
            raise ValueError("thresholds must be positive")
        if self.metric != "euclidean":
            raise ValueError(f"unsupported metric {self.metric!r}")

    def to_dict(self) -> dict:
        return {"lof_k": self.lof_k, "lof_threshold": self.lof_threshold,
                "msp_threshold": self.msp_threshold,
                "doc_risk_factor": self.doc_risk_factor, "metric": self.metric}


@dataclass(frozen=True)
class Decision:
    predicted: int            # class index, or UNKNOWN
    score: float              # method-specific decision score
    class_scores: np.ndarray  # retained for audit

    @property
    def is_unknown(self) -> bool:
        return self.predicted == UNKNOWN


def _chunk_rows(n_cols: int, dim: int) -> int:
    return max(1, _CHUNK_ELEMENTS // max(1, n_cols * dim))


def _distances(block: np.ndarray, reference: np.ndarray) -> np.ndarray:
    # explicit differences: no cancellation for near-duplicate points
    diff = block[:, None, :] - reference[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


@dataclass(frozen=True)
class FittedLof:
    reference: np.ndarray  # n x d training features
    k: int
    kdist: np.ndarray      # n, distance to the k-th nearest other point
    lrd: np.ndarray        # n, local reachability densities

    def reference_scores(self) -> np.ndarray:
        """Outlier factor of each reference point against the others."""
        n, d = self.reference.shape
        scores = np.empty(n)
        step = _chunk_rows(n, d)
        for start in range(0, n, step):
            block = self.reference[start:start + step]
            dist = _distances(block, self.reference)
            rows = np.arange(start, start + block.shape[0])
            dist[np.arange(block.shape[0]), rows] = np.inf
            mask = dist <= self.kdist[rows][:, None]
            counts = mask.sum(axis=1)
            mean_neighbor_lrd = np.where(mask, self.lrd[None, :],
                                         0.0).sum(axis=1) / counts
            scores[rows] = mean_neighbor_lrd / self.lrd[rows]
        return scores


def lof_fit(reference: np.ndarray, k: int) -> FittedLof:
    """Precompute k-distances and local reachability densities.

    The k-distance excludes the point itself; the neighborhood includes every
    point within that distance, so ties make it larger than k.
    """
    reference = np.asarray(reference, dtype=np.float64)
    if reference.ndim != 2:
        raise ValueError("reference must be a 2-d feature matrix")
    n, d = reference.shape
    if not np.isfinite(reference).all():
        raise ValueError("reference features contain non-finite values")
    if k >= n:
        raise ValueError(f"lof_k={k} requires more than {k} reference points, "
                         f"got {n}")
    if (reference == reference[0]).all():
        raise DegenerateDensityError(
            "all reference points coincide; local density is undefined")

    kdist = np.empty(n)
    step = _chunk_rows(n, d)
    for start in range(0, n, step):
        block = reference[start:start + step]
        dist = _distances(block, reference)
        rows = np.arange(start, start + block.shape[0])
        dist[np.arange(block.shape[0]), rows] = np.inf
        kdist[rows] = np.partition(dist, k - 1, axis=1)[:, k - 1]

    lrd = np.empty(n)
    for start in range(0, n, step):
        block = reference[start:start + step]
        dist = _distances(block, reference)
        rows = np.arange(start, start + block.shape[0])
        dist[np.arange(block.shape[0]), rows] = np.inf
        mask = dist <= kdist[rows][:, None]
        reach = np.maximum(np.maximum(kdist[None, :], dist), REACH_EPS)
        counts = mask.sum(axis=1)
        lrd[rows] = counts / np.where(mask, reach, 0.0).sum(axis=1)
    return FittedLof(reference=reference, k=k, kdist=kdist, lrd=lrd)


def lof_score_batch(model: FittedLof, queries: np.ndarray) -> np.ndarray:
    """Novelty scores: neighborhoods are drawn from the reference set only."""
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[1] != model.reference.shape[1]:
        raise ValueError("query dimension does not match reference features")
    if queries.size and not np.isfinite(queries).all():
        raise ValueError("query features contain non-finite values")
    n, d = model.reference.shape
    scores = np.empty(queries.shape[0])
    step = _chunk_rows(n, d)
    for start in range(0, queries.shape[0], step):
        block = queries[start:start + step]
        dist = _distances(block, model.reference)
        kdist_q = np.partition(dist, model.k - 1, axis=1)[:, model.k - 1]
        mask = dist <= kdist_q[:, None]
        reach = np.maximum(np.maximum(model.kdist[None, :], dist), REACH_EPS)
        counts = mask.sum(axis=1)
        lrd_q = counts / np.where(mask, reach, 0.0).sum(axis=1)
        mean_neighbor_lrd = (mask * model.lrd[None, :]).sum(axis=1) / counts
        scores[start:start + block.shape[0]] = mean_neighbor_lrd / lrd_q
    return scores


def lof_score(model: FittedLof, query: np.ndarray) -> float:
    return float(lof_score_batch(model, np.asarray(query)[None, :])[0])


def decide_lof(model: FittedLof, classifier_scores: np.ndarray,
               query: np.ndarray, cfg: DetectionConfig) -> Decision:
    """Reject when the query's outlier factor exceeds the threshold, otherwise
    pick the best-scoring known class."""
    score = lof_score(model, query)
    if score > cfg.lof_threshold:
        return Decision(UNKNOWN, score, np.asarray(classifier_scores))
    return Decision(int(np.argmax(classifier_scores)), score,
                    np.asarray(classifier_scores))


def decide_msp(probabilities: np.ndarray, cfg: DetectionConfig) -> Decision:
    """Reject when the maximum softmax probability falls below the threshold."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    if abs(probabilities.sum() - 1.0) > 1e-6:
        raise ValueError("softmax probabilities must sum to 1")
    top = float(probabilities.max())
    if top < cfg.msp_threshold:
        return Decision(UNKNOWN, top, probabilities)
    return Decision(int(np.argmax(probabilities)), top, probabilities)


def doc_fit(train_probabilities: np.ndarray, labels: np.ndarray,
            risk_factor: float) -> np.ndarray:
    """Per-class rejection thresholds from the spread of true-class scores.

    For each class, the deviations 1 - p of its own training examples are
    mirrored about zero and treated as a Gaussian sample; the threshold is
    1 - risk_factor * sigma, floored at 0.5.  Classes with fewer than two
    examples fall back to 0.5.
    """
    train_probabilities = np.asarray(train_probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = train_probabilities.shape[1]
    thresholds = np.full(n_classes, 0.5)
    for j in range(n_classes):
        own = train_probabilities[labels == j, j]
        if own.size < 2:
            continue
        deviations = 1.0 - own
        sigma = np.sqrt(np.mean(deviations ** 2))  # mirrored sample has mean 0
        thresholds[j] = max(0.5, 1.0 - risk_factor * sigma)
    return thresholds


def decide_doc(probabilities: np.ndarray, thresholds: np.ndarray) -> Decision:
    """Reject only when every class fails its own threshold; otherwise pick the
    best class among those that pass."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    passing = probabilities >= thresholds
    if not passing.any():
        return Decision(UNKNOWN, float(probabilities.max()), probabilities)
    restricted = np.where(passing, probabilities, -np.inf)
    best = int(np.argmax(restricted))
    return Decision(best, float(probabilities[best]), probabilities)


def save_lof(model: FittedLof, cfg: DetectionConfig, path) -> None:
    meta = {"version": DETECTOR_VERSION, "k": model.k, "config": cfg.to_dict()}
    with open(path, "wb") as fh:
        np.savez(fh,
                 __meta__=np.frombuffer(json.dumps(meta).encode("utf-8"),
                                        dtype=np.uint8),
                 reference=model.reference, kdist=model.kdist, lrd=model.lrd)


def load_lof(path) -> tuple[FittedLof, DetectionConfig]:
    try:
        with np.load(path) as data:
            meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
            if meta.get("version") != DETECTOR_VERSION:
                raise ValueError(f"unsupported detector version "
                                 f"{meta.get('version')!r}")
            model = FittedLof(reference=np.array(data["reference"]),
                              k=int(meta["k"]),
                              kdist=np.array(data["kdist"]),
                              lrd=np.array(data["lrd"]))
            cfg = DetectionConfig(**meta["config"])
    except (KeyError, OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read detector file {path}: {exc}") from exc
    return model, cfg
