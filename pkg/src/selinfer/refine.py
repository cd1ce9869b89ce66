"""Stage 1 filtering: composite reliability/attribution scores and per-field thresholds.

Attributions are max-normalized per instance before mixing with the [0, 1]
frequency score, in calibration and at inference alike, so thresholds and
scores share one scale.
"""

from dataclasses import dataclass

import numpy as np

from .data import as_corpus
from .errors import DataError, ParameterError
from .model import sigmoid


@dataclass(frozen=True)
class CompositeScores:
    w: np.ndarray  # NaN for absent fields
    attr_norm: np.ndarray


@dataclass(frozen=True)
class RefinedInstance:
    kept: np.ndarray
    refined_logit: float
    refined_prob: float


def normalize_attributions(attr, present):
    attr = np.where(present, np.asarray(attr, dtype=np.float64), 0.0)
    peak = attr.max(axis=-1, keepdims=True)
    safe = np.where(peak > 0, peak, 1.0)
    return np.where(peak > 0, attr / safe, 0.0)


def composite_scores(attr, freqs, beta, present=None):
    """``w = beta * freq + (1 - beta) * attr_norm`` on present fields."""
    if not 0.0 <= beta <= 1.0:
        raise ParameterError(f"beta must lie in [0, 1], got {beta!r}")
    attr = np.asarray(attr, dtype=np.float64)
    freqs = np.asarray(freqs, dtype=np.float64)
    if attr.shape != freqs.shape:
        raise DataError("attributions and frequencies are not aligned")
    if present is None:
        present = np.ones(attr.shape, dtype=bool)
    present = np.asarray(present, dtype=bool)
    attr_norm = normalize_attributions(attr, present)
    w = np.where(present, beta * freqs + (1.0 - beta) * attr_norm, np.nan)
    return CompositeScores(w, attr_norm)


def filter_fields(w, thresholds, present):
    """Keep present fields with ``w >= tau``; never return an empty set.

    Returns ``(kept, safeguarded)``. When nothing survives, the present field
    with the largest score (lowest index on ties) is kept and ``safeguarded``
    is true.
    """
    w = np.asarray(w, dtype=np.float64)
    present = np.asarray(present, dtype=bool)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        kept = present & (w >= thresholds)
    empty = ~kept.any(axis=-1) & present.any(axis=-1)
    if np.any(empty):
        best = np.argmax(np.where(present, w, -np.inf), axis=-1)
        if kept.ndim == 1:
            kept = kept.copy()
            kept[best] = True
        else:
            rows = np.nonzero(empty)[0]
            kept[rows, best[rows]] = True
    return kept, empty if empty.ndim else bool(empty)


def refined_prediction(model, x, kept):
    c = as_corpus(x)
    kept = np.asarray(kept, dtype=bool).reshape(c.present.shape)
    if not kept.any():
        raise DataError("refined prediction needs at least one kept field")
    logit = float(model.logits(c.tokens, c.present & kept)[0])
    return RefinedInstance(kept[0], logit, sigmoid(logit))
