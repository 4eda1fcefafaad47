"""Shared test utilities: independent oracles and model builders.

The finite-difference and scalar-loop oracles here deliberately avoid the
library's own vectorized code paths.
"""

import numpy as np

from spfm_lab.numcore import RngStream, VelocityModel, mlp_forward, mlp_init


def finite_difference_grads(model, x, t, cond, upstream, h=1e-5):
    """Central finite differences of upstream . v(x, t, cond) over every
    parameter, via plain Python loops."""
    grads = []
    for p in model.params():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.shape[0]):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(np.dot(upstream, mlp_forward(model, x, t, cond)))
            flat[i] = orig - h
            f_minus = float(np.dot(upstream, mlp_forward(model, x, t, cond)))
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.abs(a), np.abs(n)) + 1e-6
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def random_velocity_model(seed, data_dim=4, hidden=(8, 8), embed_dim=3,
                          n_classes=3, activation="tanh"):
    """Small random conditional model; input width follows from the pieces."""
    dims = [data_dim + 1 + embed_dim] + list(hidden) + [data_dim]
    return mlp_init(dims, activation, RngStream(seed, "init"),
                    n_classes=n_classes, embed_dim=embed_dim)


def linear_model(W, bias=None, n_classes=0, embed_dim=0,
                 class_embeddings=None, null_embedding=None):
    """Single-layer model with explicit weights, for hand-computable cases."""
    W = np.asarray(W, dtype=np.float64)
    out_dim, in_dim = W.shape
    b = np.zeros(out_dim) if bias is None else np.asarray(bias, dtype=np.float64)
    if class_embeddings is None:
        class_embeddings = np.zeros((n_classes, embed_dim))
    else:
        class_embeddings = np.asarray(class_embeddings, dtype=np.float64)
    if null_embedding is None:
        null_embedding = np.zeros(embed_dim)
    else:
        null_embedding = np.asarray(null_embedding, dtype=np.float64)
    return VelocityModel(
        dims=[in_dim, out_dim], activation="tanh",
        weights=[W], biases=[b],
        class_embeddings=class_embeddings, null_embedding=null_embedding,
    )
