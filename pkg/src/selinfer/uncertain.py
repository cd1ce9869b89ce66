"""Dual-signal uncertainty and the per-instance path budget.

All functions accept scalars or arrays with a leading batch axis.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ParameterError


@dataclass(frozen=True)
class UncertaintyScore:
    s_model: float
    s_freq: float
    u: float
    k: int


def model_confidence(logit, gamma):
    """Decisiveness of the logit: ``min(|logit| / gamma, 1)``."""
    if not gamma > 0:
        raise ParameterError(f"gamma must be positive, got {gamma!r}")
    out = np.minimum(np.abs(logit) / gamma, 1.0)
    return float(out) if np.ndim(out) == 0 else out


def freq_confidence(attr, freqs, present):
    """Attribution-weighted mean of per-field normalized frequencies.

    Falls back to the plain mean over present fields when every attribution
    is zero.
    """
    attr = np.asarray(attr, dtype=np.float64)
    freqs = np.asarray(freqs, dtype=np.float64)
    present = np.asarray(present, dtype=bool)
    n_present = present.sum(axis=-1)
    if np.any(n_present == 0):
        raise DataError("frequency confidence needs at least one present field")
    a = np.where(present, attr, 0.0)
    f = np.where(present, freqs, 0.0)
    total = a.sum(axis=-1)
    weighted = (a * f).sum(axis=-1)
    safe = np.where(total > 0, total, 1.0)
    out = np.where(total > 0, weighted / safe, f.sum(axis=-1) / n_present)
    return float(out) if out.ndim == 0 else out


def uncertainty(s_model, s_freq, alpha):
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha!r}")
    s_model = np.asarray(s_model, dtype=np.float64)
    s_freq = np.asarray(s_freq, dtype=np.float64)
    for name, v in (("s_model", s_model), ("s_freq", s_freq)):
        if np.any(~(v >= 0.0) | ~(v <= 1.0)):
            raise ParameterError(f"{name} must lie in [0, 1]")
    out = np.clip(1.0 - (alpha * s_model + (1.0 - alpha) * s_freq), 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def path_budget(u, k_max):
    """``floor(k_max * u)``; reaching ``k_max`` needs ``u == 1`` exactly."""
    if k_max < 0:
        raise ParameterError("k_max must be non-negative")
    k = np.clip(np.floor(k_max * np.asarray(u, dtype=np.float64)), 0, k_max).astype(np.int64)
    return int(k) if k.ndim == 0 else k


def score(logit, attr, freqs, present, gamma, alpha, k_max):
    """All four uncertainty quantities for one instance."""
    s_model = model_confidence(logit, gamma)
    s_freq = freq_confidence(attr, freqs, present)
    u = uncertainty(s_model, s_freq, alpha)
    return UncertaintyScore(s_model, s_freq, u, path_budget(u, k_max))
