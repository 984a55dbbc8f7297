"""Cosine-query evaluation of encodings and the shared average-precision metric.

Each tool-labeled test frame queries all other test frames by cosine
similarity of their latent vectors; average precision of the responses
against the targets' labels summarizes how well tool frames cluster.  The
metric helpers here are shared by the mixture and future-prediction
evaluators.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .artifacts import Encodings
from .errors import DataError, ShapeError


@dataclass(frozen=True)
class PrCurve:
    thresholds: np.ndarray
    precisions: np.ndarray
    recalls: np.ndarray
    ap: float


@dataclass(frozen=True)
class DirectEvalResult:
    query_indices: np.ndarray   # frame index of each query
    query_aps: np.ndarray       # per-query AP, same order
    mean_ap: float              # mean of per-query APs
    pooled_ap: float            # single AP over all pooled responses
    headline: float             # the aggregation chosen by the caller
    pooled_scores: np.ndarray = None   # all query-target responses, query order
    pooled_labels: np.ndarray = None   # target labels aligned with the scores


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """a.b / (|a||b|); zero vectors have no direction and are rejected."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"cosine: incompatible shapes {a.shape}, {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DataError("cosine: zero-norm input vector")
    return float(a @ b / (na * nb))


def average_precision(scores, labels) -> float:
    """AP with stable tie handling: ties keep their original order.

    Sort by score descending; AP is the mean of precision@k over the ranks k
    that hold a positive, equivalently sum of (recall increase x precision).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ShapeError(
            f"average_precision: incompatible shapes {scores.shape}, {labels.shape}")
    if not np.isfinite(scores).all():
        raise DataError("average_precision: non-finite scores")
    if not labels.any():
        raise DataError("average_precision: no positive labels; AP undefined")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision[hits].mean())


def _unit_rows(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1)
    if (norms == 0.0).any():
        raise DataError("cosine: zero-norm input vector")
    return vectors / norms[:, None]


def evaluate_direct(encodings: Encodings, labels, use_mean: bool = False,
                    aggregate: str = "mean") -> DirectEvalResult:
    """Per-query cosine APs over the encoded frames.

    Every tool-labeled frame is a query against all other frames; targets
    are scored by cosine of the latent vectors (sampled z by default, the
    posterior mean behind ``use_mean``).  ``aggregate`` picks the headline:
    "mean" averages per-query APs, "pooled" computes one AP over all
    responses together.
    """
    labels = np.asarray(labels).astype(bool)
    n = len(encodings)
    if labels.shape != (n,):
        raise ShapeError(
            f"evaluate_direct: {n} encodings but labels shape {labels.shape}")
    if n < 2:
        raise DataError("evaluate_direct: need at least 2 frames")
    if not labels.any():
        raise DataError("evaluate_direct: no tool-labeled query frames")
    if aggregate not in ("mean", "pooled"):
        raise DataError(f"evaluate_direct: unknown aggregate {aggregate!r}")

    vectors = encodings.means if use_mean else encodings.samples
    unit = _unit_rows(np.asarray(vectors, dtype=np.float64))
    sims = unit @ unit.T

    query_positions = np.flatnonzero(labels)
    aps = np.zeros(len(query_positions))
    pooled_scores = []
    pooled_labels = []
    keep = np.ones(n, dtype=bool)
    for k, qi in enumerate(query_positions):
        keep[qi] = False
        aps[k] = average_precision(sims[qi][keep], labels[keep])
        pooled_scores.append(sims[qi][keep])
        pooled_labels.append(labels[keep])
        keep[qi] = True
    mean_ap = float(aps.mean())
    pooled_scores = np.concatenate(pooled_scores)
    pooled_labels = np.concatenate(pooled_labels)
    pooled_ap = average_precision(pooled_scores, pooled_labels)
    headline = mean_ap if aggregate == "mean" else pooled_ap
    return DirectEvalResult(query_indices=encodings.indices[query_positions],
                            query_aps=aps, mean_ap=mean_ap,
                            pooled_ap=pooled_ap, headline=headline,
                            pooled_scores=pooled_scores,
                            pooled_labels=pooled_labels)


def pr_curve(scores, labels) -> PrCurve:
    """One (threshold, precision, recall) row per distinct score."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    ap = average_precision(scores, labels)
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    hits = labels[order]
    cum_tp = np.cumsum(hits)
    ranks = np.arange(1, len(hits) + 1)
    total_pos = int(labels.sum())
    # last occurrence of each distinct score = the full >= threshold set
    is_last = np.ones(len(sorted_scores), dtype=bool)
    is_last[:-1] = sorted_scores[1:] != sorted_scores[:-1]
    idx = np.flatnonzero(is_last)
    return PrCurve(thresholds=sorted_scores[idx],
                   precisions=cum_tp[idx] / ranks[idx],
                   recalls=cum_tp[idx] / total_pos,
                   ap=ap)


def emit_pr_curve(scores, labels, path: str, config_hash: str = "") -> PrCurve:
    """Write the PR curve CSV; the AP rides in a footer comment."""
    curve = pr_curve(scores, labels)
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        fh.write("threshold,precision,recall\n")
        for t, p, r in zip(curve.thresholds, curve.precisions, curve.recalls):
            fh.write(f"{float(t)!r},{float(p)!r},{float(r)!r}\n")
        fh.write(f"# ap={float(curve.ap)!r}\n")
    return curve


def emit_per_query_csv(result: DirectEvalResult, path: str,
                       config_hash: str = "") -> None:
    """Per-query AP table: query_index,ap."""
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        fh.write("query_index,ap\n")
        for qi, ap in zip(result.query_indices, result.query_aps):
            fh.write(f"{int(qi)},{float(ap)!r}\n")
