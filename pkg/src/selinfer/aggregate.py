"""Consistency-weighted aggregation of the refined and path predictions."""

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ParameterError

WEIGHT_FLOOR = 1e-300


@dataclass(frozen=True)
class AggregationResult:
    mean_prediction: float
    weights: np.ndarray
    final: float
    lambda_used: float


def aggregate(predictions, lam=5.0):
    """Weight each prediction by ``exp(-lam * |P_i - mean|)`` and average."""
    p = np.asarray(predictions, dtype=np.float64).ravel()
    if p.size == 0:
        raise DataError("cannot aggregate an empty prediction set")
    if not np.all(np.isfinite(p)):
        raise DataError("prediction set contains non-finite values")
    if lam < 0:
        raise ParameterError("lambda must be non-negative")
    if p.size == 1:
        return AggregationResult(float(p[0]), np.ones(1), float(p[0]), float(lam))
    mean = p.mean()
    w = np.maximum(np.exp(-lam * np.abs(p - mean)), WEIGHT_FLOOR)
    final = float((w * p).sum() / w.sum())
    # guard the convex-combination bound against rounding
    final = min(max(final, float(p.min())), float(p.max()))
    return AggregationResult(float(mean), w, final, float(lam))


def aggregate_padded(preds, counts, lam):
    """Row-wise aggregation of a (B, M) array where row ``b`` uses its first ``counts[b]`` entries.

    Rows with a single entry return it unchanged. Returns ``(final, weights)``
    with weights zero in the padding.
    """
    preds = np.asarray(preds, dtype=np.float64)
    counts = np.asarray(counts)
    valid = np.arange(preds.shape[1])[None, :] < counts[:, None]
    x = np.where(valid, preds, 0.0)
    mean = x.sum(axis=1) / counts
    w = np.where(valid, np.maximum(np.exp(-lam * np.abs(x - mean[:, None])), WEIGHT_FLOOR), 0.0)
    final = (w * x).sum(axis=1) / w.sum(axis=1)
    lo = np.where(valid, preds, np.inf).min(axis=1)
    hi = np.where(valid, preds, -np.inf).max(axis=1)
    final = np.minimum(np.maximum(final, lo), hi)
    single = counts == 1
    final[single] = preds[single, 0]
    return final, w
