"""End-to-end selective inference.

Per instance: base pass with input gradients, uncertainty and path budget,
threshold filtering, refined pass, ``k`` exploration paths, and
consistency-weighted aggregation. Instances are processed in fixed-size
chunks in input order; chunk boundaries never depend on the worker count, so
traces are identical for any degree of parallelism.
"""

from __future__ import annotations

import json
import warnings
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from . import uncertain
from .aggregate import aggregate_padded
from .calib import ProfileDriftWarning, hyperparams_hash
from .data import Corpus, as_corpus
from .errors import DataError, FormatError, ParameterError, SchemaError
from .explore import build_paths
from .hashing import mix_seed_array
from .model import sigmoid
from .refine import composite_scores, filter_fields

ABLATIONS = ("full", "no_dual", "no_attr", "single_path", "base_only")
DEFAULT_CHUNK = 1024

FLAG_ALL_FILTERED = "all_filtered_safeguard"
FLAG_EMPTY_PATH = "empty_path_safeguard"
FLAG_DRIFT = "profile_drift"


@dataclass
class EngineConfig:
    k_max: int = 8
    alpha: float = 0.05
    beta: float = 0.4
    rho: float = 0.2
    t_steps: int = 10
    lam: float = 5.0
    base_seed: int = 0
    ablation: str = "full"

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ParameterError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        if self.k_max < 0 or self.t_steps < 1 or self.lam < 0:
            raise ParameterError("k_max >= 0, t_steps >= 1 and lambda >= 0 are required")
        if not (0 <= self.alpha <= 1 and 0 <= self.beta <= 1 and 0 < self.rho < 1):
            raise ParameterError("alpha, beta must lie in [0, 1] and rho in (0, 1)")

    def hyperparams_hash(self, eta):
        return hyperparams_hash(self.alpha, self.beta, self.rho, self.k_max, self.t_steps, self.lam, eta)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class InferenceTrace:
    instance_id: int
    base_logit: float
    attr: list
    s_model: float
    s_freq: float
    u: float
    k: int
    kept: list
    refined_prob: float
    paths: list  # [{"selected": [...], "prediction": p, "seed": s}, ...]
    weights: list
    final_prob: float
    model_calls: int
    flags: list = field(default_factory=list)

    def to_json(self):
        return _dump(self.__dict__)

    @classmethod
    def from_json(cls, line):
        try:
            doc = json.loads(line)
            return cls(**{f.name: doc[f.name] for f in fields(cls)})
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"malformed trace record: {exc}") from None


def _dump(obj):
    # floats at 17 significant digits; everything else via json
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, float):
        return format(obj, ".17g")
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(k)}: {_dump(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_dump(v) for v in obj) + "]"
    return json.dumps(obj)


class Engine:
    """Bundles the immutable inputs of inference."""

    def __init__(self, model, sketch, profile, config=None):
        self.model = model
        self.sketch = sketch
        self.profile = profile
        self.config = config or EngineConfig()
        if not model.frozen:
            raise ParameterError("inference requires a frozen model")
        n = model.num_fields
        if sketch.num_fields != n or profile.num_fields != n:
            raise SchemaError(
                f"field counts disagree: model {n}, sketch {sketch.num_fields}, profile {profile.num_fields}")
        expected = self.config.hyperparams_hash(sketch.eta)
        self.drift = profile.hyperparams_hash != expected
        if self.drift:
            warnings.warn(f"profile hyperparams_hash {profile.hyperparams_hash} differs from engine "
                          f"config {expected}", ProfileDriftWarning, stacklevel=2)
        self._thresholds = profile.thresholds()

    def run_chunk(self, corpus, offset=0):
        """Traces for every instance of ``corpus`` (vectorised)."""
        cfg = self.config
        model = self.model
        tokens, present, ids = corpus.tokens, corpus.present, corpus.ids
        n, n_fields = tokens.shape
        if n == 0:
            return []
        if n_fields != model.num_fields:
            raise SchemaError(f"instances have {n_fields} fields, model expects {model.num_fields}",)
        empty = ~present.any(axis=1)
        if empty.any():
            idx = int(np.nonzero(empty)[0][0])
            err = DataError(f"instance {int(ids[idx])} (index {offset + idx}) has no present fields")
            err.index = offset + idx
            raise err

        logit, attr = model.attributions(tokens, present)
        freqs = self.sketch.normalized_freqs(tokens, present)
        s_model = uncertain.model_confidence(logit, self.profile.gamma)
        s_freq = uncertain.freq_confidence(attr, freqs, present)
        alpha = 1.0 if cfg.ablation == "no_dual" else cfg.alpha
        u = uncertain.uncertainty(s_model, s_freq, alpha)
        k = uncertain.path_budget(u, cfg.k_max)
        flags = [[FLAG_DRIFT] if self.drift else [] for _ in range(n)]

        if cfg.ablation == "base_only":
            base_prob = sigmoid(logit)
            k = np.zeros(n, dtype=np.int64)
            return self._traces(ids, logit, attr, s_model, s_freq, u, k, present, base_prob, [[]] * n,
                                np.ones((n, 1)), base_prob, np.ones(n, dtype=np.int64), flags)

        if cfg.ablation == "single_path":
            k = np.minimum(k, 1)
        scores = composite_scores(attr, freqs, cfg.beta, present)
        kept, safeguarded = filter_fields(scores.w, self._thresholds, present)
        for i in np.nonzero(safeguarded)[0]:
            flags[i].append(FLAG_ALL_FILTERED)
        refined_prob = sigmoid(model.logits(tokens, kept))

        total = int(k.sum())
        preds = np.zeros((n, 1 + int(k.max())))
        preds[:, 0] = refined_prob
        path_records = [[] for _ in range(n)]
        if total:
            owner = np.repeat(np.arange(n), k)
            starts = np.cumsum(k) - k
            path_index = np.arange(total) - np.repeat(starts, k) + 1
            seeds = mix_seed_array(cfg.base_seed, ids[owner], path_index)
            p_kept = kept[owner]
            if cfg.ablation == "no_attr":
                p_w = p_kept.astype(np.float64)
            else:
                p_w = np.nan_to_num(scores.w[owner], nan=0.0)
            selected, forced = build_paths(p_kept, p_w, cfg.t_steps, seeds)
            path_prob = sigmoid(model.logits(tokens[owner], selected))
            preds[owner, path_index] = path_prob
            sel_list = selected.tolist()
            prob_list = path_prob.tolist()
            seed_list = [int(s) for s in seeds]
            for j in range(total):
                path_records[owner[j]].append(
                    {"selected": sel_list[j], "prediction": prob_list[j], "seed": seed_list[j]})
            for i in np.unique(owner[forced]):
                flags[i].append(FLAG_EMPTY_PATH)

        final, weights = aggregate_padded(preds, k + 1, cfg.lam)
        return self._traces(ids, logit, attr, s_model, s_freq, u, k, kept, refined_prob, path_records,
                            weights, final, 2 + k, flags)

    @staticmethod
    def _traces(ids, logit, attr, s_model, s_freq, u, k, kept, refined, paths, weights, final, calls, flags):
        n = len(ids)
        ids_l, logit_l, attr_l = ids.tolist(), logit.tolist(), attr.tolist()
        sm_l, sf_l, u_l, k_l = s_model.tolist(), s_freq.tolist(), u.tolist(), k.tolist()
        kept_l, ref_l, fin_l, calls_l = kept.tolist(), refined.tolist(), final.tolist(), calls.tolist()
        w_l = weights.tolist()
        return [
            InferenceTrace(ids_l[i], logit_l[i], attr_l[i], sm_l[i], sf_l[i], u_l[i], k_l[i], kept_l[i],
                           ref_l[i], paths[i], w_l[i][:k_l[i] + 1], fin_l[i], calls_l[i], flags[i])
            for i in range(n)
        ]

    def infer(self, x):
        c = as_corpus(x)
        if len(c) != 1:
            raise DataError("infer takes a single instance; use infer_batch for corpora")
        return self.run_chunk(c)[0]

    def infer_batch(self, corpus, worker_count=1, chunk_size=DEFAULT_CHUNK):
        """Yield traces in input order.

        ``chunk_size`` fixes the vectorisation boundaries and must be held
        constant when comparing runs; ``worker_count`` does not affect output.
        """
        if worker_count < 1:
            raise ParameterError("worker_count must be at least 1")
        corpus = as_corpus(corpus) if not isinstance(corpus, Corpus) else corpus
        starts = range(0, len(corpus), chunk_size)
        if worker_count == 1:
            for s in starts:
                yield from self.run_chunk(corpus[s:s + chunk_size], s)
            return
        with ThreadPoolExecutor(max_workers=worker_count) as pool:
            pending = deque()
            for s in starts:
                pending.append(pool.submit(self.run_chunk, corpus[s:s + chunk_size], s))
                if len(pending) >= 2 * worker_count:
                    yield from pending.popleft().result()
            while pending:
                yield from pending.popleft().result()


def infer(model, sketch, profile, config, x):
    return Engine(model, sketch, profile, config).infer(x)


def infer_batch(model, sketch, profile, config, corpus, worker_count=1, chunk_size=DEFAULT_CHUNK):
    return Engine(model, sketch, profile, config).infer_batch(corpus, worker_count, chunk_size)


def write_traces(path, traces):
    """Stream traces to a JSON-lines file; returns the record count."""
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in traces:
            fh.write(t.to_json() + "\n")
            count += 1
    return count


def read_traces(path):
    with open(path, "r", encoding="utf-8") as fh:
        return [InferenceTrace.from_json(line) for line in fh if line.strip()]
