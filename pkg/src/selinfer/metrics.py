"""AUC, LogLoss, Spearman, and the uncertainty-calibration report."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .errors import DataError, MetricError

LOW_CUT = 0.3
HIGH_CUT = 0.7
STRATA = ("low", "medium", "high")


def auc(scores, labels):
    """Mann-Whitney AUC with ties counted one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise MetricError("scores and labels differ in length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes")
    ranks = rankdata(scores, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def logloss(scores, labels, eps=1e-12):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape:
        raise MetricError("scores and labels differ in length")
    if scores.size == 0:
        raise MetricError("logloss of an empty batch")
    p = np.clip(scores, eps, 1.0 - eps)
    return float(np.mean(-(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))))


def spearman(x, y):
    """Pearson correlation of average ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise MetricError("spearman needs two equal-length vectors of length >= 2")
    rx = rankdata(x, method="average")
    ry = rankdata(y, method="average")
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if denom == 0:
        raise MetricError("spearman correlation is undefined for a constant vector")
    return float(np.clip((rx * ry).sum() / denom, -1.0, 1.0))


def stratum_of(u):
    """Interval convention: [0, 0.3) low, [0.3, 0.7) medium, [0.7, 1] high."""
    if u < LOW_CUT:
        return "low"
    if u < HIGH_CUT:
        return "medium"
    return "high"


@dataclass
class Stratum:
    name: str
    count: int
    base_auc: Optional[float]
    selective_auc: Optional[float]

    @property
    def delta(self):
        if self.base_auc is None or self.selective_auc is None:
            return None
        return self.selective_auc - self.base_auc


@dataclass
class EvalReport:
    n: int
    auc: float
    logloss: float
    base_auc: float
    base_logloss: float
    spearman_u_vs_sqerr: Optional[float]
    decile_errors: list
    strata: list
    mean_model_calls: float
    k_histogram: list
    spearman_u_vs_true_sqerr: Optional[float] = None
    decile_true_errors: Optional[list] = None
    rank_strata: list = field(default_factory=list)
    mean_u: float = 0.0

    def stratum(self, name, ranked=False):
        for s in (self.rank_strata if ranked else self.strata):
            if s.name == name:
                return s
        raise KeyError(name)

    def to_dict(self):
        d = asdict(self)
        for key in ("strata", "rank_strata"):
            for s, src in zip(d[key], getattr(self, key)):
                s["delta"] = src.delta
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def table(self):
        """Plain-text stratum table: base vs. selective inference AUC."""
        lines = [f"{'Stratum':<28}{'Base':>9}{'Selective':>11}{'Delta':>10}{'Count':>9}"]
        labels = {"low": "Low (u < 0.3)", "medium": "Medium (0.3 <= u < 0.7)", "high": "High (u >= 0.7)"}

        def fmt(v, sign=False):
            if v is None:
                return "n/a"
            return f"{v:+.4f}" if sign else f"{v:.4f}"

        for s in self.strata:
            lines.append(f"{labels[s.name]:<28}{fmt(s.base_auc):>9}{fmt(s.selective_auc):>11}"
                         f"{fmt(s.delta, True):>10}{s.count:>9}")
        lines.append(f"{'Overall':<28}{fmt(self.base_auc):>9}{fmt(self.auc):>11}"
                     f"{fmt(self.auc - self.base_auc, True):>10}{self.n:>9}")
        return "\n".join(lines) + "\n"


def _safe_auc(scores, labels):
    try:
        return auc(scores, labels)
    except MetricError:
        return None


def _safe_spearman(x, y):
    try:
        return spearman(x, y)
    except MetricError:
        return None


def decile_means(u, errors, ids):
    """Mean error per uncertainty decile; ties in u are broken by instance id."""
    order = np.lexsort((ids, u))
    return [float(chunk.mean()) if chunk.size else None
            for chunk in np.array_split(np.asarray(errors)[order], 10)]


def report(traces, labels, truth=None, k_max=8):
    """Assemble an :class:`EvalReport`.

    ``labels`` maps instance id to 0/1; ``truth`` optionally maps instance id
    to the true click probability and enables the ground-truth error mode.
    Squared errors are those of the base model's direct score.
    """
    traces = list(traces)
    if not traces:
        raise DataError("cannot report on an empty trace set")
    ids = np.array([t.instance_id for t in traces], dtype=np.uint64)
    try:
        y = np.array([labels[int(i)] for i in ids], dtype=np.float64)
    except KeyError as exc:
        raise DataError(f"no label for instance {exc.args[0]}") from None
    if np.any((y != 0) & (y != 1)):
        raise DataError("labels must be 0 or 1 for evaluation")
    base = 1.0 / (1.0 + np.exp(-np.array([t.base_logit for t in traces])))
    final = np.array([t.final_prob for t in traces])
    u = np.array([t.u for t in traces])
    k = np.array([t.k for t in traces], dtype=np.int64)
    calls = np.array([t.model_calls for t in traces], dtype=np.float64)

    sq_err = (base - y) ** 2
    true_sq = None
    if truth is not None:
        try:
            p_true = np.array([truth[int(i)] for i in ids])
        except KeyError as exc:
            raise DataError(f"no ground truth for instance {exc.args[0]}") from None
        true_sq = (base - p_true) ** 2

    names = np.array([stratum_of(v) for v in u])
    strata = []
    for name in STRATA:
        m = names == name
        strata.append(Stratum(name, int(m.sum()), _safe_auc(base[m], y[m]), _safe_auc(final[m], y[m])))
    # population strata: bottom 30%, middle 40%, top 30% by u
    order = np.lexsort((ids, u))
    n = len(traces)
    cuts = [0, int(round(0.3 * n)), int(round(0.7 * n)), n]
    rank_strata = []
    for name, lo, hi in zip(STRATA, cuts[:-1], cuts[1:]):
        sel = order[lo:hi]
        rank_strata.append(Stratum(name, int(sel.size), _safe_auc(base[sel], y[sel]), _safe_auc(final[sel], y[sel])))

    hist_len = max(k_max, int(k.max())) + 1
    return EvalReport(
        n=n,
        auc=auc(final, y),
        logloss=logloss(final, y),
        base_auc=auc(base, y),
        base_logloss=logloss(base, y),
        spearman_u_vs_sqerr=_safe_spearman(u, sq_err),
        decile_errors=decile_means(u, sq_err, ids),
        strata=strata,
        mean_model_calls=float(calls.mean()),
        k_histogram=np.bincount(k, minlength=hist_len).tolist(),
        spearman_u_vs_true_sqerr=None if true_sq is None else _safe_spearman(u, true_sq),
        decile_true_errors=None if true_sq is None else decile_means(u, true_sq, ids),
        rank_strata=rank_strata,
        mean_u=float(u.mean()),
    )


def decile_inversions(values):
    """Number of adjacent decreases in a sequence."""
    return sum(1 for a, b in zip(values, values[1:]) if b < a)
