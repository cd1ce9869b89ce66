"""Stage 2: stochastic feature paths over the refined set.

A path starts empty. At each of ``t_steps`` rounds every kept field not yet on
the path is drawn independently with probability ``w_i / sum_j w_j`` over the
remaining candidates, and successes join the path. Randomness comes from the
counter-based generator in :mod:`selinfer.hashing`: the draw for field ``i`` at
round ``t`` is ``uniform(seed, t * N + i)``, so a path is a pure function of
its seed.
"""

from dataclasses import dataclass

import numpy as np

from .data import as_corpus
from .hashing import mix_seed_array, uniform_array
from .model import sigmoid


@dataclass(frozen=True)
class FeaturePath:
    selected: np.ndarray
    prediction: float
    path_index: int
    rng_seed: int
    forced: bool = False


def step_probabilities(w, candidates):
    """Renormalized inclusion probabilities over the current candidates.

    Uniform over candidates when their weights sum to zero.
    """
    w = np.where(candidates, np.nan_to_num(np.asarray(w, dtype=np.float64), nan=0.0), 0.0)
    total = w.sum(axis=-1, keepdims=True)
    count = candidates.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        weighted = w / np.where(total > 0, total, 1.0)
        uniform = np.where(candidates, 1.0 / np.maximum(count, 1), 0.0)
    return np.where(total > 0, weighted, uniform)


def build_paths(kept, w, t_steps, seeds):
    """Vectorised path construction.

    ``kept`` and ``w`` are (P, N), ``seeds`` is (P,) uint64. Returns the
    (P, N) selections and a (P,) flag marking paths rescued by the empty-path
    safeguard.
    """
    kept = np.asarray(kept, dtype=bool)
    w = np.asarray(w, dtype=np.float64)
    seeds = np.asarray(seeds, dtype=np.uint64)
    n_paths, n_fields = kept.shape
    selected = np.zeros_like(kept)
    field_idx = np.arange(n_fields, dtype=np.uint64)
    for t in range(t_steps):
        candidates = kept & ~selected
        if not candidates.any():
            break
        p = step_probabilities(w, candidates)
        draws = uniform_array(seeds[:, None], np.uint64(t * n_fields) + field_idx[None, :])
        selected |= candidates & (draws < p)
    forced = ~selected.any(axis=1) & kept.any(axis=1)
    if forced.any():
        rows = np.nonzero(forced)[0]
        best = np.argmax(np.where(kept[rows], np.nan_to_num(w[rows], nan=-np.inf), -np.inf), axis=1)
        selected[rows, best] = True
    return selected, forced


def build_path(kept, w, t_steps, seed):
    """Single path; returns ``(selected, forced)``."""
    sel, forced = build_paths(np.asarray(kept, dtype=bool)[None, :], np.asarray(w, dtype=np.float64)[None, :],
                              t_steps, np.array([seed], dtype=np.uint64))
    return sel[0], bool(forced[0])


def score_path(model, x, selected):
    c = as_corpus(x)
    return sigmoid(float(model.logits(c.tokens, c.present & np.asarray(selected, dtype=bool))[0]))


def path_seeds(base_seed, instance_id, k):
    return mix_seed_array(base_seed, np.full(k, instance_id, dtype=np.uint64), np.arange(1, k + 1))


def explore(model, x, kept, w, k, t_steps, base_seed, instance_id=None):
    """``k`` scored paths for one instance, ordered by path index 1..k."""
    if k <= 0:
        return []
    c = as_corpus(x)
    if instance_id is None:
        instance_id = int(c.ids[0])
    seeds = path_seeds(base_seed, instance_id, k)
    kept_rows = np.broadcast_to(np.asarray(kept, dtype=bool), (k, c.num_fields))
    w_rows = np.broadcast_to(np.asarray(w, dtype=np.float64), (k, c.num_fields))
    selected, forced = build_paths(kept_rows, w_rows, t_steps, seeds)
    tokens = np.broadcast_to(c.tokens[0], (k, c.num_fields))
    probs = sigmoid(model.logits(tokens, selected & c.present[0]))
    return [FeaturePath(selected[j], float(probs[j]), j + 1, int(seeds[j]), bool(forced[j])) for j in range(k)]
