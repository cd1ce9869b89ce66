"""Synthetic CTR corpora with power-law value popularity and known click probabilities.

Value popularity within each field follows a truncated Zipf law; an optional
Gaussian copula correlates how deep into the tail an instance's draws fall
across fields (cold users tend to meet niche items). A value's
true effect is drawn independently of its popularity, so rare values matter
as much as common ones but are seen too rarely to learn. The true logit is

    bias + sum_f weight[f, v_f] + sum_{(a, b) in pairs} scale * <z[a, v_a], z[b, v_b]>

Labels are Bernoulli draws of ``sigmoid(true logit)`` flipped with probability
``label_noise``. The stored ground truth is the probability that the
*observed* label is 1, i.e. it already accounts for the flip.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtr

from .data import Corpus, write_truth, write_tsv
from .errors import ConfigError
from .hashing import token_of


@dataclass
class SynthSpec:
    num_fields: int = 20
    vocab_sizes: list = field(default_factory=lambda: [20000])
    zipf_exponent: float = 1.2
    interaction_density: float = 0.1
    label_noise: float = 0.0
    num_train: int = 200_000
    num_test: int = 50_000
    seed: int = 0
    bias: float = -1.0
    value_weight_scale: list = field(default_factory=lambda: [1.0])
    pair_weight_scale: float = 0.5
    latent_dim: int = 4
    missing_rate: float = 0.0
    tail_correlation: float = 0.0

    def __post_init__(self):
        if isinstance(self.vocab_sizes, int):
            self.vocab_sizes = [self.vocab_sizes]
        self.vocab_sizes = [int(v) for v in self.vocab_sizes]
        if len(self.vocab_sizes) == 1:
            self.vocab_sizes = self.vocab_sizes * self.num_fields
        if isinstance(self.value_weight_scale, (int, float)):
            self.value_weight_scale = [self.value_weight_scale]
        self.value_weight_scale = [float(v) for v in self.value_weight_scale]
        if len(self.value_weight_scale) == 1:
            self.value_weight_scale = self.value_weight_scale * self.num_fields
        self.validate()

    def validate(self):
        if self.num_fields < 1:
            raise ConfigError("num_fields must be positive")
        if len(self.vocab_sizes) != self.num_fields:
            raise ConfigError(f"{len(self.vocab_sizes)} vocab sizes given for {self.num_fields} fields")
        if min(self.vocab_sizes) < 1:
            raise ConfigError("every vocab size must be at least 1")
        if len(self.value_weight_scale) != self.num_fields or min(self.value_weight_scale) < 0:
            raise ConfigError("value_weight_scale needs one non-negative scale per field")
        if not self.zipf_exponent > 0:
            raise ConfigError("zipf_exponent must be positive")
        if not 0 <= self.interaction_density <= 1:
            raise ConfigError("interaction_density must lie in [0, 1]")
        if not 0 <= self.label_noise <= 0.5:
            raise ConfigError("label_noise must lie in [0, 0.5]")
        if not 0 <= self.tail_correlation < 1:
            raise ConfigError("tail_correlation must lie in [0, 1)")
        if not 0 <= self.missing_rate < 1:
            raise ConfigError("missing_rate must lie in [0, 1)")
        if self.num_train < 1 or self.num_test < 1:
            raise ConfigError("num_train and num_test must be positive")

    @classmethod
    def from_dict(cls, doc):
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self):
        return asdict(self)


def zipf_pmf(vocab_size, exponent):
    ranks = np.arange(1, vocab_size + 1, dtype=np.float64)
    mass = ranks ** -exponent
    return mass / mass.sum()


@dataclass
class SynthData:
    spec: SynthSpec
    value_ids: np.ndarray  # (n, N) int64, -1 where absent
    labels: np.ndarray
    true_prob: np.ndarray
    true_logit: np.ndarray
    ids: np.ndarray
    n_train: int
    _token_cache: dict = field(default_factory=dict, repr=False)

    @staticmethod
    def raw_value(f, vid):
        return f"f{f}_{vid}"

    def _tokens(self):
        if "tokens" not in self._token_cache:
            toks = np.zeros(self.value_ids.shape, dtype=np.uint64)
            for f in range(self.value_ids.shape[1]):
                col = self.value_ids[:, f]
                uniq, inv = np.unique(col, return_inverse=True)
                lut = np.array([0 if v < 0 else token_of(self.raw_value(f, int(v))) for v in uniq], dtype=np.uint64)
                toks[:, f] = lut[inv]
            self._token_cache["tokens"] = toks
        return self._token_cache["tokens"]

    def _corpus(self, sl):
        return Corpus(self.ids[sl], self._tokens()[sl], self.value_ids[sl] >= 0, self.labels[sl])

    @property
    def train(self):
        return self._corpus(slice(0, self.n_train))

    @property
    def test(self):
        return self._corpus(slice(self.n_train, None))

    def truth(self):
        return dict(zip(self.ids.tolist(), self.true_prob.tolist()))

    def rows(self, sl):
        vids = self.value_ids[sl]
        for row in vids:
            yield ["" if v < 0 else self.raw_value(f, int(v)) for f, v in enumerate(row)]


def generate(spec: SynthSpec) -> SynthData:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n_fields = spec.num_fields
    n = spec.num_train + spec.num_test
    value_ids = np.empty((n, n_fields), dtype=np.int64)
    weights = []
    # gaussian copula: a shared per-instance factor makes tail draws co-occur
    # across fields while each field's marginal stays exactly Zipf
    c = spec.tail_correlation
    shared = rng.standard_normal(n)
    for f, vocab in enumerate(spec.vocab_sizes):
        cdf = np.cumsum(zipf_pmf(vocab, spec.zipf_exponent))
        u = ndtr(c * shared + np.sqrt(1.0 - c * c) * rng.standard_normal(n))
        ranks = np.minimum(np.searchsorted(cdf, u, side="right"), vocab - 1)
        # decouple popularity rank from the emitted value id
        perm = rng.permutation(vocab)
        value_ids[:, f] = perm[ranks]
        # laplace draws put extra mass near zero (aleatoric, near-boundary instances)
        weights.append(rng.laplace(0.0, spec.value_weight_scale[f] / np.sqrt(2.0), size=vocab))

    all_pairs = [(a, b) for a in range(n_fields) for b in range(a + 1, n_fields)]
    n_pairs = int(round(spec.interaction_density * len(all_pairs)))
    chosen = sorted(rng.choice(len(all_pairs), size=n_pairs, replace=False).tolist()) if n_pairs else []
    pairs = [all_pairs[i] for i in chosen]
    latent = {f: rng.normal(0.0, 1.0 / np.sqrt(spec.latent_dim), size=(vocab, spec.latent_dim))
              for f, vocab in enumerate(spec.vocab_sizes) if any(f in p for p in pairs)}

    present = np.ones((n, n_fields), dtype=bool)
    if spec.missing_rate > 0:
        present = rng.random((n, n_fields)) >= spec.missing_rate
        # keep at least one field per instance
        present[~present.any(axis=1), 0] = True

    # absent fields carry no effect
    true_logit = np.full(n, float(spec.bias))
    for f in range(n_fields):
        true_logit += np.where(present[:, f], weights[f][value_ids[:, f]], 0.0)
    for a, b in pairs:
        both = present[:, a] & present[:, b]
        true_logit += np.where(both, spec.pair_weight_scale * np.einsum(
            "ij,ij->i", latent[a][value_ids[:, a]], latent[b][value_ids[:, b]]), 0.0)
    p = 1.0 / (1.0 + np.exp(-true_logit))
    labels = (rng.random(n) < p).astype(np.int8)
    if spec.label_noise > 0:
        flip = rng.random(n) < spec.label_noise
        labels[flip] = 1 - labels[flip]
    true_prob = p * (1.0 - spec.label_noise) + (1.0 - p) * spec.label_noise
    value_ids[~present] = -1
    ids = np.arange(n, dtype=np.uint64)
    return SynthData(spec, value_ids, labels, true_prob, true_logit, ids, spec.num_train)


def write_synth(data: SynthData, out_dir):
    """Write ``train.tsv``, ``test.tsv`` and ``truth.tsv``; returns their paths."""
    os.makedirs(out_dir, exist_ok=True)
    n_fields = data.spec.num_fields
    ntr = data.n_train
    paths = {
        "train": os.path.join(out_dir, "train.tsv"),
        "test": os.path.join(out_dir, "test.tsv"),
        "truth": os.path.join(out_dir, "truth.tsv"),
    }
    write_tsv(paths["train"], data.ids[:ntr].tolist(), data.labels[:ntr].tolist(), data.rows(slice(0, ntr)), n_fields)
    write_tsv(paths["test"], data.ids[ntr:].tolist(), data.labels[ntr:].tolist(), data.rows(slice(ntr, None)), n_fields)
    write_truth(paths["truth"], data.ids.tolist(), data.true_prob.tolist())
    return paths
