"""Per-field Count-Min frequency sketch.

Each field owns ``depth`` hash rows of ``width`` counters. A value token is
addressed in row ``r`` at ``fmix64(token ^ row_seed[r]) & (width - 1)``; the
point estimate is the minimum over rows, so it never undercounts.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FieldRangeError, FormatError, IncompatibleSketchError, ParameterError
from .hashing import fmix64, fmix64_array, seed_sequence

MAGIC = b"UTSK"
VERSION = 1
_HEADER = struct.Struct("<4sBIIIQQ")

DEFAULT_DEPTH = 4
DEFAULT_WIDTH = 1 << 18
DEFAULT_ETA = 1000


class FrequencySketch:
    def __init__(self, num_fields, depth=DEFAULT_DEPTH, width=DEFAULT_WIDTH, eta=DEFAULT_ETA, seed=0,
                 row_seeds=None, counters=None, total_inserted=0):
        if num_fields < 1 or depth < 1:
            raise ParameterError("num_fields and depth must be positive")
        if width < 1 or width & (width - 1):
            raise ParameterError(f"width must be a power of two, got {width}")
        if eta < 1:
            raise ParameterError(f"eta must be a positive integer, got {eta}")
        self.num_fields = int(num_fields)
        self.depth = int(depth)
        self.width = int(width)
        self.eta = int(eta)
        self.total_inserted = int(total_inserted)
        if row_seeds is None:
            row_seeds = _draw_row_seeds(num_fields, depth, seed)
        self.row_seeds = np.asarray(row_seeds, dtype=np.uint64).reshape(num_fields, depth)
        for f in range(num_fields):
            if len(set(self.row_seeds[f].tolist())) != depth:
                raise ParameterError(f"row seeds of field {f} are not pairwise distinct")
        if counters is None:
            counters = np.zeros((num_fields, depth, width), dtype=np.uint64)
        self.counters = np.asarray(counters, dtype=np.uint64).reshape(num_fields, depth, width)

    def _check_field(self, field):
        if not 0 <= field < self.num_fields:
            raise FieldRangeError(f"field {field} out of range [0, {self.num_fields})")

    def _slots(self, field, tokens):
        # (depth, n) counter positions
        tokens = np.asarray(tokens, dtype=np.uint64).reshape(1, -1)
        mixed = fmix64_array(tokens ^ self.row_seeds[field][:, None])
        return (mixed & np.uint64(self.width - 1)).astype(np.intp)

    def insert(self, field, value):
        """Count one occurrence of ``value`` in ``field``."""
        self._check_field(field)
        for r in range(self.depth):
            self.counters[field, r, fmix64(value ^ int(self.row_seeds[field, r])) & (self.width - 1)] += np.uint64(1)
        self.total_inserted += 1
        return self

    def insert_many(self, field, values):
        self._check_field(field)
        values = np.asarray(values, dtype=np.uint64).ravel()
        if values.size == 0:
            return self
        slots = self._slots(field, values)
        for r in range(self.depth):
            self.counters[field, r] += np.bincount(slots[r], minlength=self.width).astype(np.uint64)
        self.total_inserted += int(values.size)
        return self

    def insert_corpus(self, corpus):
        """Count every present (field, value) of a :class:`~selinfer.data.Corpus`."""
        if corpus.num_fields != self.num_fields:
            raise IncompatibleSketchError(
                f"corpus has {corpus.num_fields} fields, sketch has {self.num_fields}")
        for f in range(self.num_fields):
            self.insert_many(f, corpus.tokens[corpus.present[:, f], f])
        return self

    def estimate(self, field, value):
        self._check_field(field)
        return min(int(self.counters[field, r, fmix64(value ^ int(self.row_seeds[field, r])) & (self.width - 1)])
                   for r in range(self.depth))

    def estimate_many(self, field, values):
        self._check_field(field)
        slots = self._slots(field, values)
        rows = self.counters[field][np.arange(self.depth)[:, None], slots]
        return rows.min(axis=0)

    def normalized_freq(self, field, value):
        return min(self.estimate(field, value), self.eta) / self.eta

    def normalized_freqs(self, tokens, present):
        """(n, N) normalized frequencies; absent fields get 0."""
        tokens = np.asarray(tokens, dtype=np.uint64)
        present = np.asarray(present, dtype=bool)
        if tokens.ndim == 1:
            return self.normalized_freqs(tokens[None, :], present[None, :])[0]
        if tokens.shape[1] != self.num_fields:
            raise IncompatibleSketchError(
                f"instances have {tokens.shape[1]} fields, sketch has {self.num_fields}")
        out = np.zeros(tokens.shape, dtype=np.float64)
        eta = np.uint64(self.eta)
        for f in range(self.num_fields):
            est = self.estimate_many(f, tokens[:, f])
            out[:, f] = np.minimum(est, eta).astype(np.float64) / self.eta
        out[~present] = 0.0
        return out

    def compatible_with(self, other):
        return (self.num_fields == other.num_fields and self.depth == other.depth
                and self.width == other.width and self.eta == other.eta
                and np.array_equal(self.row_seeds, other.row_seeds))

    def copy(self):
        return FrequencySketch(self.num_fields, self.depth, self.width, self.eta,
                               row_seeds=self.row_seeds.copy(), counters=self.counters.copy(),
                               total_inserted=self.total_inserted)

    def empty_like(self):
        return FrequencySketch(self.num_fields, self.depth, self.width, self.eta,
                               row_seeds=self.row_seeds.copy())

    def __eq__(self, other):
        if not isinstance(other, FrequencySketch):
            return NotImplemented
        return (self.compatible_with(other) and self.total_inserted == other.total_inserted
                and np.array_equal(self.counters, other.counters))

    def __repr__(self):
        return (f"FrequencySketch(num_fields={self.num_fields}, depth={self.depth}, "
                f"width={self.width}, eta={self.eta}, total_inserted={self.total_inserted})")


def _draw_row_seeds(num_fields, depth, seed):
    seeds = np.zeros((num_fields, depth), dtype=np.uint64)
    stream = iter(seed_sequence(seed, num_fields * depth * 2))
    for f in range(num_fields):
        row = []
        while len(row) < depth:
            s = next(stream)
            if s not in row:
                row.append(s)
        seeds[f] = row
    return seeds


def merge(base, delta):
    """Counter-wise sum of two sketches that share addressing."""
    if not base.compatible_with(delta):
        raise IncompatibleSketchError(
            "sketches differ in shape, eta or row seeds; merging them would corrupt estimates")
    return FrequencySketch(base.num_fields, base.depth, base.width, base.eta,
                           row_seeds=base.row_seeds.copy(),
                           counters=base.counters + delta.counters,
                           total_inserted=base.total_inserted + delta.total_inserted)


def sketch_bytes(sketch):
    parts = [_HEADER.pack(MAGIC, VERSION, sketch.num_fields, sketch.depth, sketch.width,
                          sketch.eta, sketch.total_inserted)]
    for f in range(sketch.num_fields):
        parts.append(sketch.row_seeds[f].astype("<u8").tobytes())
        parts.append(sketch.counters[f].astype("<u8").tobytes())
    return b"".join(parts)


def save_sketch(sketch, path):
    with open(path, "wb") as fh:
        fh.write(sketch_bytes(sketch))


def sketch_from_bytes(buf):
    if len(buf) < _HEADER.size:
        raise FormatError("sketch file truncated in header")
    magic, version, n, depth, width, eta, total = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad sketch magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported sketch version {version}")
    per_field = 8 * depth * (1 + width)
    if len(buf) != _HEADER.size + n * per_field:
        raise FormatError(f"sketch file has {len(buf)} bytes, expected {_HEADER.size + n * per_field}")
    seeds = np.empty((n, depth), dtype=np.uint64)
    counters = np.empty((n, depth, width), dtype=np.uint64)
    off = _HEADER.size
    for f in range(n):
        seeds[f] = np.frombuffer(buf, dtype="<u8", count=depth, offset=off)
        off += 8 * depth
        counters[f] = np.frombuffer(buf, dtype="<u8", count=depth * width, offset=off).reshape(depth, width)
        off += 8 * depth * width
    try:
        return FrequencySketch(n, depth, width, eta, row_seeds=seeds, counters=counters, total_inserted=total)
    except ParameterError as exc:
        raise FormatError(f"invalid sketch contents: {exc}") from None


def load_sketch(path):
    with open(path, "rb") as fh:
        return sketch_from_bytes(fh.read())
