"""Offline calibration: logit normalizer, per-field thresholds and the profile file."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from fractions import Fraction

import numpy as np

from .data import as_corpus
from .errors import CoverageError, DataError, DegenerateCalibrationError, FormatError, ParameterError
from .hashing import digest64
from .refine import composite_scores

FORMAT_VERSION = 1
GAMMA_QUANTILE = 0.95
CHUNK = 8192


def nearest_rank_index(q, n):
    """0-based index of the nearest-rank ``q`` quantile among ``n`` sorted values.

    ``q`` is read through its shortest decimal repr so that, e.g., 0.07 of
    100 selects the 7th order statistic rather than the 8th.
    """
    if n < 1:
        raise DataError("quantile of an empty sample")
    k = math.ceil(Fraction(repr(float(q))) * n)
    return min(max(k, 1), n) - 1


def nearest_rank(values, q):
    values = np.sort(np.asarray(values, dtype=np.float64).ravel())
    return float(values[nearest_rank_index(q, values.size)])


def hyperparams_hash(alpha, beta, rho, k_max, t_steps, lam, eta):
    canon = json.dumps([float(alpha), float(beta), float(rho), int(k_max), int(t_steps), float(lam), int(eta)])
    return digest64(canon.encode("ascii"))


@dataclass
class CalibrationProfile:
    gamma: float
    field_thresholds: list
    rho: float
    eta: int
    sample_size: int
    hyperparams_hash: str
    created_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    beta: float = 0.4
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if not self.gamma > 0:
            raise DegenerateCalibrationError(f"gamma must be positive, got {self.gamma!r}")
        self.field_thresholds = [float(t) for t in self.field_thresholds]

    @property
    def num_fields(self):
        return len(self.field_thresholds)

    def thresholds(self):
        return np.asarray(self.field_thresholds, dtype=np.float64)

    def restamp(self, alpha, k_max, t_steps, lam):
        """Same thresholds, hash updated for inference-only hyperparameters.

        Only valid because alpha, K_max, T and lambda do not enter threshold
        computation; beta, rho and eta do and are kept.
        """
        h = hyperparams_hash(alpha, self.beta, self.rho, k_max, t_steps, lam, self.eta)
        return CalibrationProfile(self.gamma, list(self.field_thresholds), self.rho, self.eta,
                                  self.sample_size, h, self.created_at, self.beta, self.format_version)


def compute_gamma(model, validation):
    """Nearest-rank 95th percentile of |logit| over the validation set."""
    c = as_corpus(validation)
    if len(c) == 0:
        raise DataError("validation set is empty")
    logits = np.concatenate([model.logits(c.tokens[i:i + CHUNK], c.present[i:i + CHUNK])
                             for i in range(0, len(c), CHUNK)])
    return gamma_from_logits(logits)


def gamma_from_logits(logits):
    gamma = nearest_rank(np.abs(logits), GAMMA_QUANTILE)
    if gamma == 0.0:
        raise DegenerateCalibrationError("95th percentile of |logit| is zero; gamma undefined")
    return gamma


def sample_scores(model, sketch, sample, beta):
    """Composite scores for every instance of ``sample``; NaN where a field is absent."""
    c = as_corpus(sample)
    out = np.empty(c.tokens.shape)
    for i in range(0, len(c), CHUNK):
        tok, pres = c.tokens[i:i + CHUNK], c.present[i:i + CHUNK]
        _, attr = model.attributions(tok, pres)
        freqs = sketch.normalized_freqs(tok, pres)
        out[i:i + CHUNK] = composite_scores(attr, freqs, beta, pres).w
    return out


def thresholds_from_scores(scores, rho):
    if not 0.0 < rho < 1.0:
        raise ParameterError(f"rho must lie in (0, 1), got {rho!r}")
    scores = np.asarray(scores, dtype=np.float64)
    taus = []
    for f in range(scores.shape[1]):
        col = scores[:, f]
        col = col[~np.isnan(col)]
        if col.size == 0:
            raise CoverageError(f"field {f} is never present in the calibration sample")
        taus.append(nearest_rank(col, rho))
    return np.asarray(taus)


def compute_field_thresholds(model, sketch, sample, rho, beta):
    if not 0.0 <= beta <= 1.0:
        raise ParameterError(f"beta must lie in [0, 1], got {beta!r}")
    c = as_corpus(sample)
    if len(c) == 0:
        raise DataError("calibration sample is empty")
    return thresholds_from_scores(sample_scores(model, sketch, c, beta), rho)


def calibrate(model, sketch, validation, sample, *, alpha=0.05, beta=0.4, rho=0.2, k_max=8, t_steps=10,
              lam=5.0):
    """Build a complete :class:`CalibrationProfile`."""
    gamma = compute_gamma(model, validation)
    sample = as_corpus(sample)
    taus = compute_field_thresholds(model, sketch, sample, rho, beta)
    return CalibrationProfile(
        gamma=gamma,
        field_thresholds=taus.tolist(),
        rho=rho,
        eta=sketch.eta,
        sample_size=len(sample),
        hyperparams_hash=hyperparams_hash(alpha, beta, rho, k_max, t_steps, lam, sketch.eta),
        beta=beta,
    )


_REQUIRED = ("gamma", "field_thresholds", "rho", "eta", "sample_size", "created_at", "hyperparams_hash",
             "format_version")


def profile_to_json(profile):
    return json.dumps(asdict(profile), indent=2, sort_keys=True) + "\n"


def save_profile(profile, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(profile_to_json(profile))


def profile_from_json(text, expected_hash=None):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"profile is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise FormatError("profile must be a JSON object")
    missing = [k for k in _REQUIRED if k not in doc]
    if missing:
        raise FormatError(f"profile is missing fields: {', '.join(missing)}")
    if doc["format_version"] != FORMAT_VERSION:
        raise FormatError(f"unsupported profile format_version {doc['format_version']!r}")
    try:
        profile = CalibrationProfile(
            gamma=float(doc["gamma"]),
            field_thresholds=[float(t) for t in doc["field_thresholds"]],
            rho=float(doc["rho"]),
            eta=int(doc["eta"]),
            sample_size=int(doc["sample_size"]),
            hyperparams_hash=str(doc["hyperparams_hash"]),
            created_at=str(doc["created_at"]),
            beta=float(doc.get("beta", 0.4)),
            format_version=int(doc["format_version"]),
        )
    except (TypeError, ValueError) as exc:
        raise FormatError(f"malformed profile field: {exc}") from None
    if expected_hash is not None and profile.hyperparams_hash != expected_hash:
        warnings.warn(
            f"profile hyperparams_hash {profile.hyperparams_hash} differs from engine config {expected_hash}",
            ProfileDriftWarning, stacklevel=2)
    return profile


def load_profile(path, expected_hash=None):
    with open(path, "r", encoding="utf-8") as fh:
        return profile_from_json(fh.read(), expected_hash)


class ProfileDriftWarning(UserWarning):
    pass
