"""Reference CTR backbone with masked forward passes and input-embedding gradients.

logit = bias + deep(concat(e_1..e_N)) + fm(e_1..e_N)

``deep`` is an MLP with ReLU hidden layers and a scalar readout; with no hidden
layers it is a linear readout, and ``mlp_widths=None`` removes it entirely.
``fm`` is the factorization-machine pairwise term sum_{i<j} <e_i, e_j>.
Absent (MASKED) fields enter as zero vectors. All math is float64.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Corpus, FeatureVector, as_corpus
from .errors import DataError, DivergenceError, FormatError, FrozenModelError, ParameterError, SchemaError
from .hashing import digest64

MAGIC = b"UTMD"
VERSION = 1
_FLAG_FM, _FLAG_DEEP, _FLAG_FROZEN = 1, 2, 4


@dataclass(frozen=True)
class AttributionVector:
    attr: np.ndarray
    logit: float


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


class Backbone:
    def __init__(self, bucket_counts, dim=8, mlp_widths=(64, 32), use_fm=True, seed=0):
        bucket_counts = tuple(int(b) for b in bucket_counts)
        if not bucket_counts or min(bucket_counts) < 1:
            raise ParameterError("every field needs at least one embedding bucket")
        if dim < 1:
            raise ParameterError("embedding dimension must be positive")
        self.bucket_counts = bucket_counts
        self.dim = int(dim)
        self.mlp_widths = None if mlp_widths is None else tuple(int(w) for w in mlp_widths)
        self.use_fm = bool(use_fm)
        self.frozen = False
        self.loss_history = []
        self._offsets = np.concatenate([[0], np.cumsum(bucket_counts)[:-1]]).astype(np.uint64)
        self._buckets = np.asarray(bucket_counts, dtype=np.uint64)
        self._init_params(np.random.default_rng(seed))

    @property
    def num_fields(self):
        return len(self.bucket_counts)

    def _init_params(self, rng):
        def xavier(fan_in, fan_out, shape):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-lim, lim, size=shape)

        rows = sum(self.bucket_counts)
        # per-field glorot limits, as if each field had its own table
        self.emb = np.concatenate([xavier(b, self.dim, (b, self.dim)) for b in self.bucket_counts])
        assert self.emb.shape[0] == rows
        self.bias = np.zeros(1)
        self.layers = []
        self.out_w = None
        self.out_b = None
        if self.mlp_widths is not None:
            fan = self.num_fields * self.dim
            for w in self.mlp_widths:
                self.layers.append([xavier(fan, w, (fan, w)), np.zeros(w)])
                fan = w
            self.out_w = xavier(fan, 1, (fan,))
            self.out_b = np.zeros(1)

    # parameter bookkeeping -------------------------------------------------

    def param_arrays(self):
        """Parameters in their declared (serialization) order."""
        out = [self.bias, self.emb]
        for W, b in self.layers:
            out += [W, b]
        if self.out_w is not None:
            out += [self.out_w, self.out_b]
        return out

    def checksum(self):
        return digest64(b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in self.param_arrays()))

    def copy(self):
        clone = Backbone.__new__(Backbone)
        clone.__dict__.update(self.__dict__)
        clone.emb = self.emb.copy()
        clone.bias = self.bias.copy()
        clone.layers = [[W.copy(), b.copy()] for W, b in self.layers]
        clone.out_w = None if self.out_w is None else self.out_w.copy()
        clone.out_b = None if self.out_b is None else self.out_b.copy()
        clone.loss_history = list(self.loss_history)
        return clone

    def freeze(self):
        self.frozen = True
        for p in self.param_arrays():
            p.flags.writeable = False
        return self

    def field_row(self, field, token):
        """Row of the shared embedding matrix used by ``token`` in ``field``."""
        return int(self._offsets[field]) + int(token) % self.bucket_counts[field]

    # forward / backward ----------------------------------------------------

    def _rows(self, tokens):
        return (self._offsets + tokens % self._buckets).astype(np.intp)

    def embed(self, tokens, present):
        tokens = np.asarray(tokens, dtype=np.uint64)
        present = np.asarray(present, dtype=bool)
        if tokens.ndim != 2 or tokens.shape[1] != self.num_fields:
            raise SchemaError(f"expected (n, {self.num_fields}) tokens, got shape {tokens.shape}")
        E = self.emb[self._rows(tokens)]
        E[~present] = 0.0
        return E

    def _deep_forward(self, h):
        acts = []
        z = h
        for W, b in self.layers:
            a = z @ W + b
            acts.append(a)
            z = np.maximum(a, 0.0)
        return z @ self.out_w + self.out_b[0], acts

    def logits_from_embeddings(self, E):
        E = np.asarray(E, dtype=np.float64)
        n = E.shape[0]
        out = np.full(n, self.bias[0])
        if self.mlp_widths is not None:
            deep, _ = self._deep_forward(E.reshape(n, -1))
            out = out + deep
        if self.use_fm:
            s = E.sum(axis=1)
            out = out + 0.5 * ((s * s).sum(axis=1) - (E * E).sum(axis=(1, 2)))
        return out

    def embedding_gradients(self, E):
        """Logits and d logit / dE for a batch of embedded inputs."""
        n = E.shape[0]
        logit = np.full(n, self.bias[0])
        grad = np.zeros_like(E)
        if self.mlp_widths is not None:
            h = E.reshape(n, -1)
            deep, acts = self._deep_forward(h)
            logit = logit + deep
            g = np.broadcast_to(self.out_w, (n, self.out_w.shape[0]))
            for (W, _), a in zip(reversed(self.layers), reversed(acts)):
                g = (g * (a > 0)) @ W.T
            grad += g.reshape(E.shape)
        if self.use_fm:
            s = E.sum(axis=1)
            logit = logit + 0.5 * ((s * s).sum(axis=1) - (E * E).sum(axis=(1, 2)))
            grad += s[:, None, :] - E
        return logit, grad

    def logits(self, tokens, present):
        return self.logits_from_embeddings(self.embed(tokens, present))

    def attributions(self, tokens, present):
        """Batched base pass: (logits, per-field gradient L2 norms)."""
        present = np.asarray(present, dtype=bool)
        logit, grad = self.embedding_gradients(self.embed(tokens, present))
        attr = np.sqrt((grad * grad).sum(axis=2))
        attr[~present] = 0.0
        return logit, attr

    def bias_logit(self):
        """Logit of an input whose every field is MASKED, read off the parameters."""
        out = float(self.bias[0])
        if self.mlp_widths is not None:
            z = np.zeros(self.num_fields * self.dim)
            for W, b in self.layers:
                z = np.maximum(z @ W + b, 0.0)
            out += float(z @ self.out_w + self.out_b[0])
        return out


def forward(model, x):
    """Logit of one instance (or a 1-d array of logits for a corpus)."""
    c = as_corpus(x)
    out = model.logits(c.tokens, c.present)
    return float(out[0]) if isinstance(x, FeatureVector) else out


def input_gradients(model, x):
    c = as_corpus(x)
    if c.num_fields != model.num_fields:
        raise SchemaError(f"instance has {c.num_fields} fields, model expects {model.num_fields}")
    logit, attr = model.attributions(c.tokens, c.present)
    return AttributionVector(attr[0], float(logit[0]))


# training ------------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 3
    batch_size: int = 1024
    l2: float = 0.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class _Adam:
    shape: tuple
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.m = np.zeros(self.shape)
        self.v = np.zeros(self.shape)


def train(model, corpus: Corpus, config: TrainConfig = None):
    """Mini-batch Adam on binary cross-entropy, then freeze.

    Embedding rows are updated lazily (only rows looked up in the batch), as
    in sparse-embedding trainers. L2 applies to dense weights and to the
    embedding rows touched by the batch.
    """
    config = config or TrainConfig()
    if model.frozen:
        raise FrozenModelError("cannot train a frozen model")
    if corpus.num_fields != model.num_fields:
        raise SchemaError(f"corpus has {corpus.num_fields} fields, model expects {model.num_fields}")
    if not corpus.is_labeled():
        bad = int(corpus.ids[corpus.labels < 0][0])
        raise DataError(f"training instance {bad} is unlabeled")
    n = len(corpus)
    rng = np.random.default_rng(config.seed)
    dense = [p for p in model.param_arrays() if p is not model.emb]
    dense_state = [_Adam(p.shape) for p in dense]
    emb_state = _Adam(model.emb.shape)
    b1, b2, eps, lr = config.beta1, config.beta2, config.eps, config.learning_rate
    labels = corpus.labels.astype(np.float64)
    step = 0
    batch_index = 0
    history = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        losses = np.empty(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            tokens, present, y = corpus.tokens[idx], corpus.present[idx], labels[idx]
            rows = model._rows(tokens)
            E = model.emb[rows]
            E[~present] = 0.0
            logit, dparams, dE = _loss_grads(model, E, y)
            p = sigmoid(logit)
            pc = np.clip(p, 1e-12, 1 - 1e-12)
            batch_losses = -(y * np.log(pc) + (1 - y) * np.log(1 - pc))
            mean_loss = batch_losses.mean()
            if not np.isfinite(mean_loss) or not np.all(np.isfinite(logit)):
                raise DivergenceError(batch_index, float(mean_loss))
            losses[idx] = batch_losses
            step += 1
            batch_index += 1
            c1 = 1 - b1**step
            c2 = 1 - b2**step
            for param, grad, st in zip(dense, dparams, dense_state):
                if config.l2 and param is not model.bias and param.ndim > 1:
                    grad = grad + config.l2 * param
                st.m *= b1
                st.m += (1 - b1) * grad
                st.v *= b2
                st.v += (1 - b2) * grad * grad
                param -= lr * (st.m / c1) / (np.sqrt(st.v / c2) + eps)
            # scatter embedding gradients onto the touched rows
            flat_rows = rows[present]
            touched, inverse = np.unique(flat_rows, return_inverse=True)
            g_rows = np.zeros((touched.size, model.dim))
            flat_grad = dE[present]
            for k in range(model.dim):
                g_rows[:, k] = np.bincount(inverse, weights=flat_grad[:, k], minlength=touched.size)
            if config.l2:
                g_rows += config.l2 * model.emb[touched]
            m = emb_state.m[touched] * b1 + (1 - b1) * g_rows
            v = emb_state.v[touched] * b2 + (1 - b2) * g_rows * g_rows
            emb_state.m[touched] = m
            emb_state.v[touched] = v
            model.emb[touched] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        history.append(float(losses.mean()))
    model.loss_history = history
    for p in model.param_arrays():
        if not np.all(np.isfinite(p)):
            raise DivergenceError(batch_index, float("nan"))
    return model.freeze()


def _loss_grads(model, E, y):
    """Logits, dense-parameter gradients (declared order) and dE of mean BCE."""
    n = E.shape[0]
    logit = np.full(n, model.bias[0])
    acts, zs = [], []
    if model.mlp_widths is not None:
        z = E.reshape(n, -1)
        zs.append(z)
        for W, b in model.layers:
            a = z @ W + b
            acts.append(a)
            z = np.maximum(a, 0.0)
            zs.append(z)
        logit = logit + z @ model.out_w + model.out_b[0]
    if model.use_fm:
        s = E.sum(axis=1)
        logit = logit + 0.5 * ((s * s).sum(axis=1) - (E * E).sum(axis=(1, 2)))
    g_logit = (sigmoid(logit) - y) / n
    grads = [np.array([g_logit.sum()])]
    dE = np.zeros_like(E)
    if model.mlp_widths is not None:
        layer_grads = []
        d_out_w = zs[-1].T @ g_logit
        d_out_b = np.array([g_logit.sum()])
        g = g_logit[:, None] * model.out_w[None, :]
        for li in range(len(model.layers) - 1, -1, -1):
            W, _ = model.layers[li]
            g = g * (acts[li] > 0)
            layer_grads.append((zs[li].T @ g, g.sum(axis=0)))
            g = g @ W.T
        for dW, db in reversed(layer_grads):
            grads += [dW, db]
        grads += [d_out_w, d_out_b]
        dE += g.reshape(E.shape)
    if model.use_fm:
        dE += g_logit[:, None, None] * (s[:, None, :] - E)
    return logit, grads, dE


# serialization -------------------------------------------------------------


def model_bytes(model):
    flags = (_FLAG_FM if model.use_fm else 0) | (_FLAG_DEEP if model.mlp_widths is not None else 0) \
        | (_FLAG_FROZEN if model.frozen else 0)
    widths = model.mlp_widths or ()
    head = struct.pack("<4sBBI", MAGIC, VERSION, flags, model.num_fields)
    head += struct.pack(f"<{model.num_fields}Q", *model.bucket_counts)
    head += struct.pack("<II", model.dim, len(widths))
    head += struct.pack(f"<{len(widths)}I", *widths)
    params = np.concatenate([np.ravel(p) for p in model.param_arrays()]).astype("<f8")
    head += struct.pack("<Q", params.size)
    return head + params.tobytes()


def save_model(model, path):
    with open(path, "wb") as fh:
        fh.write(model_bytes(model))


def model_from_bytes(buf):
    try:
        magic, version, flags, n = struct.unpack_from("<4sBBI", buf, 0)
        if magic != MAGIC:
            raise FormatError(f"bad model magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"unsupported model version {version}")
        off = 10
        buckets = struct.unpack_from(f"<{n}Q", buf, off)
        off += 8 * n
        dim, n_layers = struct.unpack_from("<II", buf, off)
        off += 8
        widths = struct.unpack_from(f"<{n_layers}I", buf, off)
        off += 4 * n_layers
        (n_params,) = struct.unpack_from("<Q", buf, off)
        off += 8
    except struct.error:
        raise FormatError("model file truncated in header") from None
    if len(buf) != off + 8 * n_params:
        raise FormatError(f"model file has {len(buf)} bytes, expected {off + 8 * n_params}")
    model = Backbone(buckets, dim, widths if flags & _FLAG_DEEP else None, bool(flags & _FLAG_FM))
    flat = np.frombuffer(buf, dtype="<f8", count=n_params, offset=off).astype(np.float64)
    expected = sum(p.size for p in model.param_arrays())
    if expected != n_params:
        raise FormatError(f"parameter count {n_params} does not match schema ({expected})")
    pos = 0
    for p in model.param_arrays():
        p[...] = flat[pos:pos + p.size].reshape(p.shape)
        pos += p.size
    if flags & _FLAG_FROZEN:
        model.freeze()
    return model


def load_model(path):
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


def time_passes(model, corpus, repeats=3):
    """Seconds for a forward pass and a forward+input-gradient pass over ``corpus``."""
    fwd = bwd = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        model.logits(corpus.tokens, corpus.present)
        t1 = time.perf_counter()
        model.attributions(corpus.tokens, corpus.present)
        t2 = time.perf_counter()
        fwd = min(fwd, t1 - t0)
        bwd = min(bwd, t2 - t1)
    return {"forward_s": fwd, "forward_backward_s": bwd, "backward_over_forward": (bwd - fwd) / fwd if fwd else None}
