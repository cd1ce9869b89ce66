"""Feature vectors, columnar corpora and the TSV corpus format.

TSV layout, one instance per line after a ``#fields:<N>`` header::

    instance_id<TAB>label<TAB>field_0<TAB>...<TAB>field_{N-1}

Labels are ``0``, ``1`` or ``?`` (unlabeled). An empty field column means the
field is absent (MASKED). Raw values are hashed to 64-bit tokens on ingestion.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DataError, FormatError, SchemaError
from .hashing import MASK64, token_of

MASKED = None
UNLABELED = -1


@dataclass(frozen=True)
class FeatureVector:
    """One instance: a token (or MASKED) per field, plus an optional label."""

    fields: tuple
    label: Optional[int] = None
    instance_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(self.fields))
        if self.label not in (None, 0, 1):
            raise DataError(f"label must be 0, 1 or None, got {self.label!r}")
        for tok in self.fields:
            if tok is not None and not 0 <= tok <= MASK64:
                raise SchemaError(f"token {tok!r} outside the unsigned 64-bit range")

    @property
    def num_fields(self):
        return len(self.fields)

    def masked(self, keep):
        """Copy with every field whose ``keep`` flag is false set to MASKED."""
        return FeatureVector(
            tuple(t if k else MASKED for t, k in zip(self.fields, keep)), self.label, self.instance_id
        )


class Corpus:
    """Columnar batch of feature vectors.

    ``tokens`` is (n, N) uint64, ``present`` is (n, N) bool, ``labels`` is
    int8 with -1 for unlabeled, ``ids`` is uint64.
    """

    def __init__(self, ids, tokens, present, labels=None):
        self.tokens = np.ascontiguousarray(tokens, dtype=np.uint64)
        if self.tokens.ndim != 2:
            raise SchemaError("tokens must be a 2-d array")
        n = self.tokens.shape[0]
        self.present = np.ascontiguousarray(present, dtype=bool)
        self.ids = np.ascontiguousarray(ids, dtype=np.uint64)
        if labels is None:
            labels = np.full(n, UNLABELED, dtype=np.int8)
        self.labels = np.ascontiguousarray(labels, dtype=np.int8)
        if self.present.shape != self.tokens.shape or self.ids.shape != (n,) or self.labels.shape != (n,):
            raise SchemaError("corpus arrays have inconsistent shapes")
        # masked slots carry token 0 so equal vectors have equal arrays
        self.tokens[~self.present] = 0

    @classmethod
    def from_vectors(cls, vectors: Sequence[FeatureVector], num_fields=None):
        vectors = list(vectors)
        if num_fields is None:
            if not vectors:
                raise SchemaError("cannot infer the field count of an empty corpus")
            num_fields = vectors[0].num_fields
        n = len(vectors)
        tokens = np.zeros((n, num_fields), dtype=np.uint64)
        present = np.zeros((n, num_fields), dtype=bool)
        labels = np.full(n, UNLABELED, dtype=np.int8)
        ids = np.zeros(n, dtype=np.uint64)
        for r, v in enumerate(vectors):
            if v.num_fields != num_fields:
                raise SchemaError(f"instance {v.instance_id} has {v.num_fields} fields, expected {num_fields}")
            for c, tok in enumerate(v.fields):
                if tok is not None:
                    tokens[r, c] = tok
                    present[r, c] = True
            labels[r] = UNLABELED if v.label is None else v.label
            ids[r] = v.instance_id
        return cls(ids, tokens, present, labels)

    @property
    def num_fields(self):
        return self.tokens.shape[1]

    def __len__(self):
        return self.tokens.shape[0]

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Corpus(self.ids[i], self.tokens[i], self.present[i], self.labels[i])
        if isinstance(i, (np.ndarray, list)):
            return Corpus(self.ids[i], self.tokens[i], self.present[i], self.labels[i])
        fields = tuple(int(t) if p else MASKED for t, p in zip(self.tokens[i], self.present[i]))
        lab = int(self.labels[i])
        return FeatureVector(fields, None if lab == UNLABELED else lab, int(self.ids[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def is_labeled(self):
        return bool(np.all(self.labels >= 0))

    def concat(self, other):
        if other.num_fields != self.num_fields:
            raise SchemaError("cannot concatenate corpora with different field counts")
        return Corpus(
            np.concatenate([self.ids, other.ids]),
            np.concatenate([self.tokens, other.tokens]),
            np.concatenate([self.present, other.present]),
            np.concatenate([self.labels, other.labels]),
        )


def as_corpus(x):
    if isinstance(x, Corpus):
        return x
    if isinstance(x, FeatureVector):
        return Corpus.from_vectors([x])
    return Corpus.from_vectors(list(x))


def _label_text(lab):
    return "?" if lab is None or lab == UNLABELED else str(int(lab))


def write_tsv(path, ids: Iterable[int], labels: Iterable, rows: Iterable[Sequence[str]], num_fields: int):
    """Write raw string rows in the corpus format. ``""`` marks an absent field."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"#fields:{num_fields}\n")
        for iid, lab, row in zip(ids, labels, rows):
            if len(row) != num_fields:
                raise SchemaError(f"row for instance {iid} has {len(row)} fields, expected {num_fields}")
            fh.write(f"{int(iid)}\t{_label_text(lab)}\t" + "\t".join(row) + "\n")


def read_tsv(path) -> Corpus:
    """Parse a TSV corpus into a :class:`Corpus` of hashed tokens."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    memo = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith("#fields:"):
            raise FormatError(f"{path}: missing '#fields:<N>' header")
        try:
            n_fields = int(header[len("#fields:"):])
        except ValueError:
            raise FormatError(f"{path}: bad header {header!r}") from None
        ids, labels, tok_rows, pres_rows = [], [], [], []
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != n_fields + 2:
                raise FormatError(f"{path}:{lineno}: expected {n_fields + 2} columns, got {len(parts)}")
            try:
                ids.append(int(parts[0]))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad instance id {parts[0]!r}") from None
            lab = parts[1]
            if lab == "?":
                labels.append(UNLABELED)
            elif lab in ("0", "1"):
                labels.append(int(lab))
            else:
                raise FormatError(f"{path}:{lineno}: bad label {lab!r}")
            toks = []
            pres = []
            for raw in parts[2:]:
                if raw == "":
                    toks.append(0)
                    pres.append(False)
                else:
                    t = memo.get(raw)
                    if t is None:
                        t = memo[raw] = token_of(raw)
                    toks.append(t)
                    pres.append(True)
            tok_rows.append(toks)
            pres_rows.append(pres)
    n = len(ids)
    tokens = np.array(tok_rows, dtype=np.uint64).reshape(n, n_fields)
    present = np.array(pres_rows, dtype=bool).reshape(n, n_fields)
    return Corpus(np.array(ids, dtype=np.uint64), tokens, present, np.array(labels, dtype=np.int8))


def read_truth(path):
    """Ground-truth table: ``instance_id<TAB>probability`` per line."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected 2 columns")
            iid = int(parts[0])
            if iid in out:
                raise FormatError(f"{path}:{lineno}: duplicate instance id {iid}")
            out[iid] = float(parts[1])
    return out


def write_truth(path, ids, probs):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for iid, p in zip(ids, probs):
            fh.write(f"{int(iid)}\t{float(p):.17g}\n")
