"""Deterministic numeric core: seeded RNG streams, a small MLP velocity model
with hand-written backprop, and Adam.

All tensors are float64 numpy arrays in row-major (C) order. Every public
operation is a pure function of its inputs plus the RNG stream it is handed,
and either returns finite values or raises with a diagnosable message.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

Tensor2 = np.ndarray  # (rows, cols) float64, C-order

ACTIVATIONS = ("tanh", "relu")
STREAM_IDS = ("init", "data", "noise", "train", "sample")

# Counts per-sample model evaluations (a batched call over B rows adds B).
# Tests use deltas of this counter to verify forward-pass budgets.
_EVAL_COUNT = 0


def forward_eval_count() -> int:
    """Total number of per-sample forward evaluations so far in this process."""
    return _EVAL_COUNT


class RngStream:
    """Seeded random stream tagged by purpose.

    Streams with different ``stream_id`` (or different substream keys) are
    statistically independent; identical (seed, stream_id, key) reproduce the
    same sequence bit for bit. ``draw_count`` increments on every drawing
    call so tests can assert that a code path consumes no randomness.
    """

    def __init__(self, seed: int, stream_id: str, _key: tuple = ()):
        if stream_id not in STREAM_IDS:
            raise ValueError(
                f"unknown stream_id {stream_id!r}, expected one of {STREAM_IDS}"
            )
        self.seed = int(seed)
        self.stream_id = stream_id
        self._key = tuple(int(k) for k in _key)
        ss = np.random.SeedSequence(
            self.seed, spawn_key=(STREAM_IDS.index(stream_id),) + self._key
        )
        self._gen = np.random.Generator(np.random.PCG64(ss))
        self.draw_count = 0

    def substream(self, index: int) -> "RngStream":
        """Independent child stream, deterministic given (seed, stream_id, index)."""
        return RngStream(self.seed, self.stream_id, self._key + (index,))

    def normal(self, size=None) -> np.ndarray:
        self.draw_count += 1
        return self._gen.standard_normal(size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        self.draw_count += 1
        return self._gen.uniform(low, high, size=size)

    def integers(self, low, high=None, size=None):
        self.draw_count += 1
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        self.draw_count += 1
        return self._gen.permutation(n)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        self.draw_count += 1
        return self._gen.choice(n, size=k, replace=False)

    def state_dict(self) -> dict:
        return {
            "seed": self.seed,
            "stream_id": self.stream_id,
            "key": list(self._key),
            "bit_generator": self._gen.bit_generator.state,
            "draw_count": self.draw_count,
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "RngStream":
        rng = cls(state["seed"], state["stream_id"], tuple(state["key"]))
        rng._gen.bit_generator.state = state["bit_generator"]
        rng.draw_count = int(state["draw_count"])
        return rng


@dataclass
class VelocityModel:
    """MLP velocity field v(x, t, cond) with learned class and null embeddings.

    The network input is the concatenation [x | t | embedding], so the first
    layer width must equal data_dim + 1 + embed_dim whenever embeddings are
    in play. The null embedding is its own trainable row, never an alias of a
    class row.
    """

    dims: list
    activation: str
    weights: list       # layer l: (dims[l+1], dims[l])
    biases: list        # layer l: (dims[l+1],)
    class_embeddings: np.ndarray   # (n_classes, embed_dim)
    null_embedding: np.ndarray     # (embed_dim,)

    @property
    def data_dim(self) -> int:
        return self.dims[-1]

    @property
    def n_classes(self) -> int:
        return self.class_embeddings.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.null_embedding.shape[0]

    def params(self) -> list:
        """All trainable arrays in a fixed canonical order."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        out.append(self.class_embeddings)
        out.append(self.null_embedding)
        return out

    def copy(self) -> "VelocityModel":
        return VelocityModel(
            dims=list(self.dims),
            activation=self.activation,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            class_embeddings=self.class_embeddings.copy(),
            null_embedding=self.null_embedding.copy(),
        )


@dataclass
class ModelGrads:
    """Gradients shaped exactly like the model parameters."""

    weights: list
    biases: list
    class_embeddings: np.ndarray
    null_embedding: np.ndarray

    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        out.append(self.class_embeddings)
        out.append(self.null_embedding)
        return out

    def add_(self, other: "ModelGrads") -> "ModelGrads":
        for a, b in zip(self.params(), other.params()):
            a += b
        return self

    @classmethod
    def zeros_like(cls, model: VelocityModel) -> "ModelGrads":
        return cls(
            weights=[np.zeros_like(w) for w in model.weights],
            biases=[np.zeros_like(b) for b in model.biases],
            class_embeddings=np.zeros_like(model.class_embeddings),
            null_embedding=np.zeros_like(model.null_embedding),
        )


def mlp_init(dims, activation: str, rng: RngStream,
             n_classes: int = 0, embed_dim: int = 0) -> VelocityModel:
    """Build a velocity model with scaled-uniform weights, deterministic in rng.

    Weights of layer l are drawn U(-s, s) with s = 1/sqrt(fan_in); biases start
    at zero; embedding rows are drawn the same way with their own width as
    fan-in. ``n_classes=0, embed_dim=0`` yields a bare MLP (used by tests that
    only exercise the trunk).
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise ValueError(f"need at least 2 layer sizes, got {dims}")
    if any(d < 1 for d in dims):
        raise ValueError(f"layer sizes must be >= 1, got {dims}")
    if activation not in ACTIVATIONS:
        raise ValueError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
    if n_classes < 0 or embed_dim < 0:
        raise ValueError("n_classes and embed_dim must be non-negative")
    if n_classes > 0 and embed_dim == 0:
        raise ValueError("class-conditional model needs embed_dim >= 1")
    if embed_dim > 0 and dims[0] != dims[-1] + 1 + embed_dim:
        raise ValueError(
            f"input width {dims[0]} != data_dim {dims[-1]} + 1 + embed_dim {embed_dim}"
        )

    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        scale = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-scale, scale, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    if embed_dim > 0:
        scale = 1.0 / math.sqrt(embed_dim)
        class_emb = rng.uniform(-scale, scale, size=(n_classes, embed_dim))
        null_emb = rng.uniform(-scale, scale, size=(embed_dim,))
    else:
        class_emb = np.zeros((n_classes, 0))
        null_emb = np.zeros(0)
    return VelocityModel(dims, activation, weights, biases, class_emb, null_emb)


def _activate(p: np.ndarray, activation: str) -> np.ndarray:
    if activation == "tanh":
        return np.tanh(p)
    return np.maximum(p, 0.0)


def _activate_grad(p: np.ndarray, a: np.ndarray, activation: str) -> np.ndarray:
    if activation == "tanh":
        return 1.0 - a * a
    return (p > 0.0).astype(np.float64)


def _embedding_rows(model: VelocityModel, cond_ids: np.ndarray) -> np.ndarray:
    rows = np.empty((cond_ids.shape[0], model.embed_dim))
    is_class = cond_ids >= 0
    if np.any(cond_ids >= model.n_classes):
        bad = int(cond_ids[cond_ids >= model.n_classes][0])
        raise ValueError(f"class id {bad} out of range for {model.n_classes} classes")
    if is_class.any():
        rows[is_class] = model.class_embeddings[cond_ids[is_class]]
    if (~is_class).any():
        rows[~is_class] = model.null_embedding
    return rows


def forward_batch(model: VelocityModel, X: np.ndarray, t, cond_ids: np.ndarray):
    """Evaluate v(x, t, cond) for a batch of rows; returns (V, cache).

    cond_ids is an int array with -1 meaning the null condition. t may be a
    scalar or one value per row. Counts one evaluation per row.
    """
    global _EVAL_COUNT
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = X.shape[0]
    t_col = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)).reshape(n, 1)
    cond_ids = np.asarray(cond_ids, dtype=np.int64)
    emb = _embedding_rows(model, cond_ids)
    Z = np.concatenate([X, t_col, emb], axis=1)
    if Z.shape[1] != model.dims[0]:
        raise ValueError(
            f"assembled input width {Z.shape[1]} != input layer width {model.dims[0]}"
        )

    pres, acts = [], [Z]
    h = Z
    last = len(model.weights) - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        p = h @ w.T + b
        pres.append(p)
        h = _activate(p, model.activation) if l < last else p
        acts.append(h)
    _EVAL_COUNT += n
    if not np.all(np.isfinite(h)):
        raise FloatingPointError("non-finite values in forward pass output")
    cache = {"pres": pres, "acts": acts, "cond_ids": cond_ids}
    return h, cache


def backward_batch(model: VelocityModel, cache: dict, upstream: np.ndarray) -> ModelGrads:
    """Backprop an upstream gradient dL/dV through a cached forward pass.

    Rows of ``upstream`` set to zero contribute nothing, which is how callers
    restrict gradients to a selected subset of the batch.
    """
    upstream = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    pres, acts, cond_ids = cache["pres"], cache["acts"], cache["cond_ids"]
    grads = ModelGrads.zeros_like(model)

    delta = upstream
    for l in range(len(model.weights) - 1, -1, -1):
        grads.weights[l][:] = delta.T @ acts[l]
        grads.biases[l][:] = delta.sum(axis=0)
        d_input = delta @ model.weights[l]
        if l > 0:
            delta = d_input * _activate_grad(pres[l - 1], acts[l], model.activation)
        else:
            delta = d_input
    # delta is now dL/dZ; the embedding block sits after [x | t].
    d_emb = delta[:, model.data_dim + 1:]
    is_class = cond_ids >= 0
    if is_class.any():
        np.add.at(grads.class_embeddings, cond_ids[is_class], d_emb[is_class])
    if (~is_class).any():
        grads.null_embedding[:] = d_emb[~is_class].sum(axis=0)
    return grads


def _check_inputs(model: VelocityModel, x: np.ndarray, t: float, cond):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != model.data_dim:
        raise ValueError(f"x must be a vector of dim {model.data_dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("x contains non-finite values")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if cond is not None:
        cond = int(cond)
        if cond < 0 or cond >= model.n_classes:
            raise ValueError(f"class id {cond} out of range for {model.n_classes} classes")
    return x, cond


def mlp_forward(model: VelocityModel, x, t: float, cond) -> np.ndarray:
    """v(x, t, cond) for a single input; cond=None selects the null embedding."""
    x, cond = _check_inputs(model, x, t, cond)
    cid = -1 if cond is None else cond
    v, _ = forward_batch(model, x[None, :], float(t), np.array([cid]))
    return v[0]


def mlp_grad(model: VelocityModel, x, t: float, cond, upstream) -> ModelGrads:
    """Exact analytic gradient of upstream . v(x, t, cond) w.r.t. all parameters.

    Only the selected embedding row (class ``cond`` or the null row) receives
    a nonzero embedding gradient.
    """
    x, cond = _check_inputs(model, x, t, cond)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (model.data_dim,):
        raise ValueError(
            f"upstream must have shape ({model.data_dim},), got {upstream.shape}"
        )
    cid = -1 if cond is None else cond
    _, cache = forward_batch(model, x[None, :], float(t), np.array([cid]))
    return backward_batch(model, cache, upstream[None, :])


@dataclass
class AdamState:
    """Adam accumulators; moment shapes mirror the parameter list exactly."""

    lr: float
    beta1: float
    beta2: float
    eps: float
    step_count: int
    m: list
    v: list

    @classmethod
    def for_params(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        return cls(
            lr=lr, beta1=beta1, beta2=beta2, eps=eps, step_count=0,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
        )


def adam_step(state: AdamState, params, grads) -> None:
    """One Adam update with bias correction; mutates params and state in place.

    Raises before touching any state if a gradient is non-finite or a shape
    disagrees, so a failed step leaves parameters untouched.
    """
    if len(params) != len(state.m) or len(params) != len(grads):
        raise ValueError(
            f"parameter/gradient count mismatch: {len(params)} params, "
            f"{len(grads)} grads, {len(state.m)} moments"
        )
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise ValueError(f"shape mismatch at param {i}: {p.shape} vs {g.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient at param {i} (shape {g.shape})")

    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
