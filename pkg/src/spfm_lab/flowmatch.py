"""Flow-matching primitives: straight-line interpolation draws, the
conditional/unconditional per-sample losses, classifier-free-guidance
velocity combination, and a forward-Euler ODE sampler.

Per-sample losses are the plain sum of squared components of the velocity
residual; averaging over a batch is the trainer's job.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import RngStream, VelocityModel, forward_batch, mlp_forward


@dataclass
class PairedDraw:
    """One interpolation draw shared by both losses of a sample.

    x_t is (1 - t') x0 + t' x1 and target is x1 - x0, exactly.
    """

    x0: np.ndarray
    x1: np.ndarray
    t_prime: float
    x_t: np.ndarray
    target: np.ndarray


@dataclass
class LossPair:
    l_cond: float
    l_uncond: float


def interpolate(x0: np.ndarray, x1: np.ndarray, t_prime: float) -> np.ndarray:
    return (1.0 - t_prime) * x0 + t_prime * x1


def draw_time(t_policy, rng: RngStream, size=None):
    """Interpolation time(s) under the policy: a float means that fixed value,
    "uniform" draws from [0, 1)."""
    if t_policy == "uniform":
        return rng.uniform(0.0, 1.0, size=size)
    t = float(t_policy)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"fixed interpolation time must lie in [0, 1], got {t}")
    return t if size is None else np.full(size, t)


def make_draw(x1, t_policy, rng: RngStream) -> PairedDraw:
    """Sample a source x0 ~ N(0, I) and an interpolation time, then fill the draw."""
    x1 = np.asarray(x1, dtype=np.float64)
    if not np.all(np.isfinite(x1)):
        raise ValueError("x1 contains non-finite values")
    x0 = rng.normal(size=x1.shape[0])
    t_prime = float(draw_time(t_policy, rng))
    return PairedDraw(
        x0=x0, x1=x1, t_prime=t_prime,
        x_t=interpolate(x0, x1, t_prime),
        target=x1 - x0,
    )


def fm_loss(model: VelocityModel, draw: PairedDraw, cond) -> float:
    """Squared L2 residual || v(x_t, t', cond) - (x1 - x0) ||^2.

    cond=None evaluates the unconditional loss, a class id the conditional one.
    """
    v = mlp_forward(model, draw.x_t, draw.t_prime, cond)
    r = v - draw.target
    return float(r @ r)


def loss_pair(model: VelocityModel, draw: PairedDraw, cond: int) -> LossPair:
    """Both losses evaluated on the SAME draw; consumes no randomness."""
    if cond is None:
        raise ValueError("loss_pair needs a real class id, not the null condition")
    return LossPair(
        l_cond=fm_loss(model, draw, cond),
        l_uncond=fm_loss(model, draw, None),
    )


def cfg_velocity(model: VelocityModel, x, t: float, cond: int, w: float) -> np.ndarray:
    """Guided velocity v_null + w (v_cond - v_null); w=1 is pure conditional."""
    if w < 0:
        raise ValueError(f"guidance scale must be >= 0, got {w}")
    if w == 1.0:
        return mlp_forward(model, x, t, cond)
    v_null = mlp_forward(model, x, t, None)
    if w == 0.0:
        return v_null
    v_cond = mlp_forward(model, x, t, cond)
    return v_null + w * (v_cond - v_null)


def sample_ode_batch(model: VelocityModel, cond_ids, w: float, steps: int,
                     rng: RngStream) -> np.ndarray:
    """Integrate n probability-flow trajectories with forward Euler.

    cond_ids is one condition per row (-1 for null). Starts from x ~ N(0, I)
    at t=0 and returns the states at t=1.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if w < 0:
        raise ValueError(f"guidance scale must be >= 0, got {w}")
    cond_ids = np.asarray(cond_ids, dtype=np.int64)
    n = cond_ids.shape[0]
    x = rng.normal(size=(n, model.data_dim))
    dt = 1.0 / steps
    null_ids = np.full(n, -1, dtype=np.int64)
    for k in range(steps):
        t = k * dt
        try:
            if w == 1.0:
                v, _ = forward_batch(model, x, t, cond_ids)
            else:
                v_null, _ = forward_batch(model, x, t, null_ids)
                if w == 0.0:
                    v = v_null
                else:
                    v_cond, _ = forward_batch(model, x, t, cond_ids)
                    v = v_null + w * (v_cond - v_null)
        except FloatingPointError as e:
            raise FloatingPointError(f"integration failed at step {k}: {e}")
        x = x + dt * v
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite state at integration step {k}")
    return x


def sample_ode(model: VelocityModel, cond, w: float, steps: int,
               rng: RngStream) -> np.ndarray:
    """Generate one sample; cond=None integrates the unconditional field."""
    cid = -1 if cond is None else int(cond)
    if cond is not None and (cid < 0 or cid >= model.n_classes):
        raise ValueError(f"class id {cid} out of range for {model.n_classes} classes")
    return sample_ode_batch(model, np.array([cid]), w, steps, rng)[0]
