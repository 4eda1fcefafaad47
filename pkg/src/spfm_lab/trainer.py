"""Training loop and run plumbing: strict JSON config parsing, dataset
assembly from file paths or generator specs, the SPFM/vanilla mode switch,
JSON-numeric checkpoints with exact resume, and the metrics log.

Everything downstream of the config seed is deterministic: datasets, model
init, batch order, draws, and therefore the metrics log and ledger. The
wallclock_ms column of the on-disk metrics CSV is zeroed by design so run
artifacts stay byte-reproducible; measured timing lives on the returned
MetricsRow objects and in the stderr log.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .numcore import (ACTIVATIONS, AdamState, ModelGrads, RngStream,
                      VelocityModel, adam_step, backward_batch, forward_batch,
                      mlp_init)
from .flowmatch import draw_time, interpolate
from .spfm import (BatchResult, PurityLedger, RoutingConfig, ledger_update,
                   merge_step_decisions, purify_batch)
from .synthdata import BatchMixer, Dataset, NoiseSpec, Sample, gen_mixture, \
    gen_moons, inject_label_noise, load_dataset

log = logging.getLogger("spfm")

CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Run configuration; defaults follow the reference training regime
    (10k iterations, batch 32, 1k warm-up, fixed t'=0.5).

    The deliberately small trunk and conservative learning rate are
    calibrated so the conditional branch outpaces the unconditional one on
    trusted labels; a large trunk lets the unconditional branch infer the
    class from the interpolated point alone, which washes out the routing
    signal.
    """

    data_dim: int = 2
    K: int = 4
    hidden_dims: list = field(default_factory=lambda: [8])
    activation: str = "tanh"
    embed_dim: int = 8
    iterations: int = 10000
    batch_size: int = 32
    warmup_steps: int = 1000
    t_policy: object = 0.5
    n_draws: int = 1
    p_drop: float = 0.1
    mode: str = "spfm"
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    log_every: int = 50
    data_a: object = None   # path string, generator-spec dict, or None for default
    data_b: object = None


_CONFIG_KEYS = set(TrainConfig.__dataclass_fields__)

# Generator-spec keys with their defaults; "seed" and "subset" resolve from
# context when omitted inside a train config.
_MIXTURE_KEYS = {"generator", "K", "n_per_class", "radius", "sigma", "dim",
                 "feature_noise", "rho", "seed", "subset"}
_MOONS_KEYS = {"generator", "n_per_class", "noise_sigma", "rho", "seed", "subset"}


def parse_config(path) -> TrainConfig:
    """Load and validate a JSON config; unknown keys are rejected outright."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"config file not found or unreadable: {path} ({e})")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed JSON in {path}: {e}")
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a JSON object, got {type(raw).__name__}")
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    config = TrainConfig(**raw)
    validate_config(config)
    return config


def validate_config(config: TrainConfig) -> None:
    c = config
    if c.batch_size % 2 != 0 or c.batch_size < 2:
        raise ConfigError(f"batch_size must be even and >= 2, got {c.batch_size}")
    if c.mode not in ("spfm", "vanilla"):
        raise ConfigError(f"mode must be 'spfm' or 'vanilla', got {c.mode!r}")
    if c.iterations < 1:
        raise ConfigError(f"iterations must be >= 1, got {c.iterations}")
    if c.warmup_steps < 0:
        raise ConfigError(f"warmup_steps must be >= 0, got {c.warmup_steps}")
    if c.mode == "spfm" and c.iterations <= c.warmup_steps:
        raise ConfigError(
            f"iterations ({c.iterations}) must exceed warmup_steps "
            f"({c.warmup_steps}) in spfm mode"
        )
    if c.activation not in ACTIVATIONS:
        raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {c.activation!r}")
    if not isinstance(c.hidden_dims, list) or any(
            not isinstance(h, int) or h < 1 for h in c.hidden_dims):
        raise ConfigError(f"hidden_dims must be a list of ints >= 1, got {c.hidden_dims}")
    if c.K < 2:
        raise ConfigError(f"K must be >= 2, got {c.K}")
    if c.data_dim < 1:
        raise ConfigError(f"data_dim must be >= 1, got {c.data_dim}")
    if c.embed_dim < 1:
        raise ConfigError(f"embed_dim must be >= 1, got {c.embed_dim}")
    if c.t_policy != "uniform":
        try:
            t = float(c.t_policy)
        except (TypeError, ValueError):
            raise ConfigError(f"t_policy must be a number or 'uniform', got {c.t_policy!r}")
        if not 0.0 <= t <= 1.0:
            raise ConfigError(f"fixed t_policy must lie in [0, 1], got {t}")
    if not 0.0 <= c.p_drop <= 1.0:
        raise ConfigError(f"p_drop must lie in [0, 1], got {c.p_drop}")
    if c.n_draws < 1:
        raise ConfigError(f"n_draws must be >= 1, got {c.n_draws}")
    if c.lr <= 0:
        raise ConfigError(f"lr must be positive, got {c.lr}")
    if c.log_every < 1:
        raise ConfigError(f"log_every must be >= 1, got {c.log_every}")
    for role, spec in (("data_a", c.data_a), ("data_b", c.data_b)):
        if spec is None or isinstance(spec, str):
            continue
        if isinstance(spec, dict):
            _validate_generator_spec(spec, role)
        else:
            raise ConfigError(f"{role} must be a path, a generator spec object, "
                              f"or null, got {type(spec).__name__}")


def _validate_generator_spec(spec: dict, label: str) -> None:
    name = spec.get("generator")
    if name == "mixture":
        allowed = _MIXTURE_KEYS
    elif name == "moons":
        allowed = _MOONS_KEYS
    else:
        raise ConfigError(f"{label}: generator must be 'mixture' or 'moons', got {name!r}")
    unknown = set(spec) - allowed
    if unknown:
        raise ConfigError(f"{label}: unknown generator spec key(s): {sorted(unknown)}")
    rho = spec.get("rho", 0.0)
    if not 0.0 <= rho <= 1.0:
        raise ConfigError(f"{label}: rho must lie in [0, 1], got {rho}")


def _default_mixture_spec(config: TrainConfig, role: str) -> dict:
    # Easy/hard split in the spirit of a clean vs noisy subset pair.
    sigma, feature_noise = (0.2, 0.0) if role == "A" else (0.6, 0.2)
    return {
        "generator": "mixture", "K": config.K, "n_per_class": 500,
        "radius": 4.0, "sigma": sigma, "dim": 2,
        "feature_noise": feature_noise, "rho": 0.0,
    }


def resolve_generator_spec(spec: dict, seed: int, subset: str) -> dict:
    """Fill generator-spec defaults and pin a concrete seed."""
    _validate_generator_spec(spec, "generator spec")
    out = {"generator": spec["generator"],
           "seed": int(spec.get("seed", seed)),
           "subset": spec.get("subset", subset),
           "rho": float(spec.get("rho", 0.0))}
    if spec["generator"] == "mixture":
        out.update({
            "K": int(spec.get("K", 4)),
            "n_per_class": int(spec.get("n_per_class", 500)),
            "radius": float(spec.get("radius", 4.0)),
            "sigma": float(spec.get("sigma", 0.3)),
            "dim": int(spec.get("dim", 2)),
            "feature_noise": float(spec.get("feature_noise", 0.0)),
        })
    else:
        out.update({
            "n_per_class": int(spec.get("n_per_class", 500)),
            "noise_sigma": float(spec.get("noise_sigma", 0.1)),
        })
    return out


def dataset_from_spec(resolved: dict) -> Dataset:
    """Generate a dataset from a resolved spec (concrete seed required)."""
    rng = RngStream(resolved["seed"], "data")
    if resolved["generator"] == "mixture":
        ds = gen_mixture(resolved["K"], resolved["n_per_class"], resolved["radius"],
                         resolved["sigma"], resolved["dim"], rng,
                         subset=resolved["subset"],
                         feature_noise=resolved["feature_noise"])
    else:
        ds = gen_moons(resolved["n_per_class"], resolved["noise_sigma"], rng,
                       subset=resolved["subset"])
    if resolved["rho"] > 0:
        ds = inject_label_noise(ds, NoiseSpec(rho=resolved["rho"], seed=resolved["seed"]))
    return ds


def resolve_config(config: TrainConfig) -> TrainConfig:
    """Return a copy with data_a/data_b pinned to concrete generator specs.

    Derived seeds come from the config seed, so the same config file always
    names the same data.
    """
    derived = np.random.SeedSequence(config.seed).generate_state(2)
    resolved = {}
    for i, (role, spec) in enumerate((("A", config.data_a), ("B", config.data_b))):
        if isinstance(spec, str):
            resolved[role] = spec
            continue
        if spec is None:
            spec = _default_mixture_spec(config, role)
        resolved[role] = resolve_generator_spec(spec, seed=int(derived[i]), subset=role)
    return replace(config, data_a=resolved["A"], data_b=resolved["B"])


def config_to_dict(config: TrainConfig) -> dict:
    c = resolve_config(config)
    return {k: getattr(c, k) for k in sorted(_CONFIG_KEYS)}


def config_hash(config: TrainConfig) -> str:
    """Identity hash of everything but the horizon; a resumed run may extend
    iterations but nothing else."""
    d = config_to_dict(config)
    d.pop("iterations")
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def build_training_data(config: TrainConfig):
    """Materialize subsets A and B plus the combined training corpus.

    Corpus ids are globally unique: if the two subsets' id ranges collide,
    B's are shifted past A's. Subset tags are reassigned by role.
    """
    c = resolve_config(config)
    parts = {}
    for role, spec in (("A", c.data_a), ("B", c.data_b)):
        ds = load_dataset(spec) if isinstance(spec, str) else dataset_from_spec(spec)
        if ds.K != config.K:
            raise ConfigError(f"data_{role.lower()} has K={ds.K}, config says K={config.K}")
        if ds.data_dim != config.data_dim:
            raise ConfigError(f"data_{role.lower()} has dim={ds.data_dim}, "
                              f"config says data_dim={config.data_dim}")
        parts[role] = ds
    a, b = parts["A"], parts["B"]
    ids_a = {s.id for s in a.samples}
    offset = max(ids_a) + 1 if ids_a & {s.id for s in b.samples} else 0
    a_samples = [replace(s, subset="A") for s in a.samples]
    b_samples = [replace(s, id=s.id + offset, subset="B") for s in b.samples]
    a_view = Dataset(a_samples, a.K, a.data_dim, a.generator_spec)
    b_view = Dataset(b_samples, b.K, b.data_dim, b.generator_spec)
    corpus = Dataset(a_samples + b_samples, a.K, a.data_dim,
                     {"name": "combined", "a": a.generator_spec, "b": b.generator_spec})
    return corpus, a_view, b_view


@dataclass
class MetricsRow:
    step: int
    mean_loss: float
    mean_l_cond: float
    mean_l_uncond: float
    suspect_count: int
    wallclock_ms: float


METRICS_HEADER = ["step", "mean_loss", "mean_l_cond", "mean_l_uncond",
                  "suspect_count", "wallclock_ms"]


def write_metrics_csv(rows, path) -> None:
    """Append-only style metrics log; wallclock_ms is zeroed on disk to keep
    files byte-identical across reruns of the same seed."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for r in rows:
            writer.writerow([r.step, repr(r.mean_loss), repr(r.mean_l_cond),
                             repr(r.mean_l_uncond), r.suspect_count, 0])


def read_metrics_csv(path):
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != METRICS_HEADER:
            raise ValueError(f"malformed metrics file: {path}")
        for row in reader:
            rows.append(MetricsRow(int(row[0]), float(row[1]), float(row[2]),
                                   float(row[3]), int(row[4]), float(row[5])))
    return rows


@dataclass
class Checkpoint:
    model: VelocityModel
    adam: AdamState
    step: int
    config: dict
    config_hash: str
    noise_rng_state: dict
    mixer_state: dict


def _model_to_dict(model: VelocityModel) -> dict:
    return {
        "dims": list(model.dims),
        "activation": model.activation,
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "class_embeddings": model.class_embeddings.tolist(),
        "null_embedding": model.null_embedding.tolist(),
    }


def _model_from_dict(d: dict) -> VelocityModel:
    n_classes = len(d["class_embeddings"])
    return VelocityModel(
        dims=list(d["dims"]),
        activation=d["activation"],
        weights=[np.array(w, dtype=np.float64) for w in d["weights"]],
        biases=[np.array(b, dtype=np.float64) for b in d["biases"]],
        class_embeddings=np.array(d["class_embeddings"], dtype=np.float64).reshape(n_classes, -1),
        null_embedding=np.array(d["null_embedding"], dtype=np.float64),
    )


def save_checkpoint(cp: Checkpoint, path) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "step": cp.step,
        "config": cp.config,
        "config_hash": cp.config_hash,
        "model": _model_to_dict(cp.model),
        "adam": {
            "lr": cp.adam.lr, "beta1": cp.adam.beta1, "beta2": cp.adam.beta2,
            "eps": cp.adam.eps, "step_count": cp.adam.step_count,
            "m": [m.tolist() for m in cp.adam.m],
            "v": [v.tolist() for v in cp.adam.v],
        },
        "noise_rng": cp.noise_rng_state,
        "mixer": cp.mixer_state,
    }
    with open(path, "w", encoding="utf-8", newline="") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as e:
        raise CheckpointError(f"checkpoint not readable: {path} ({e})")
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}")
    version = payload.get("version") if isinstance(payload, dict) else None
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version mismatch in {path}: "
            f"expected {CHECKPOINT_VERSION}, found {version!r}"
        )
    model = _model_from_dict(payload["model"])
    a = payload["adam"]
    adam = AdamState(
        lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"],
        step_count=a["step_count"],
        m=[np.array(m, dtype=np.float64).reshape(p.shape)
           for m, p in zip(a["m"], model.params())],
        v=[np.array(v, dtype=np.float64).reshape(p.shape)
           for v, p in zip(a["v"], model.params())],
    )
    return Checkpoint(
        model=model, adam=adam, step=int(payload["step"]),
        config=payload["config"], config_hash=payload["config_hash"],
        noise_rng_state=payload["noise_rng"], mixer_state=payload["mixer"],
    )


def _vanilla_batch(model: VelocityModel, batch: list, step: int,
                   config: RoutingConfig, rng: RngStream) -> BatchResult:
    """Ordinary conditional flow matching with CFG label dropout; no routing.

    Consumes the rng stream with the same layout as purify_batch so both
    modes see identical draws under a shared seed.
    """
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    X1 = np.stack([s.x1 for s in batch])
    labels = np.array([s.label for s in batch], dtype=np.int64)

    draws = []
    for _ in range(config.n_draws):
        x0 = rng.normal(size=(n, model.data_dim))
        t = draw_time(config.t_policy, rng, size=n)
        draws.append((x0, np.asarray(t, dtype=np.float64)))
    coins = rng.uniform(size=n)
    dropped = coins < config.p_drop

    cond_idx = np.where(~dropped)[0]
    drop_idx = np.where(dropped)[0]
    per_sample = np.zeros(n)
    grads = ModelGrads.zeros_like(model)
    scale = 2.0 / (n * config.n_draws)
    for x0, t in draws:
        x_t = interpolate(x0, X1, t[:, None])
        target = X1 - x0
        for idx, ids in ((cond_idx, labels[cond_idx]),
                         (drop_idx, np.full(len(drop_idx), -1, dtype=np.int64))):
            if len(idx) == 0:
                continue
            v, cache = forward_batch(model, x_t[idx], t[idx], ids)
            resid = v - target[idx]
            per_sample[idx] += np.sum(resid ** 2, axis=1)
            grads.add_(backward_batch(model, cache, scale * resid))
    per_sample /= config.n_draws
    mean_cond = per_sample[cond_idx].mean() if len(cond_idx) else float("nan")
    mean_uncond = per_sample[drop_idx].mean() if len(drop_idx) else float("nan")

    return BatchResult(
        decisions=[], loss=float(per_sample.mean()), grads=grads,
        mean_l_cond=float(mean_cond), mean_l_uncond=float(mean_uncond),
        suspect_count=0, dropped_count=int(dropped.sum()),
    )


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list
    ledger: PurityLedger
    corpus: Dataset

    @property
    def model(self) -> VelocityModel:
        return self.checkpoint.model


def train(config: TrainConfig, resume_from=None) -> TrainResult:
    """Run `config.iterations` optimizer steps (continuing from a checkpoint
    if given) and return the final checkpoint, metrics rows, and ledger.

    A resumed run replays nothing: datasets are regenerated deterministically
    from the config, while optimizer/model/rng/mixer state come from the
    checkpoint, so the continuation is bit-identical to an uninterrupted run.
    The ledger, by contrast, starts fresh on resume and only covers the
    resumed steps.
    """
    validate_config(config)
    cfg_dict = config_to_dict(config)
    cfg_hash = config_hash(config)
    corpus, a_view, b_view = build_training_data(config)

    noise_rng = RngStream(config.seed, "noise")
    mixer = BatchMixer(a_view, b_view, config.batch_size,
                       RngStream(config.seed, "data").substream(2))
    start_step = 0
    if resume_from is not None:
        cp = resume_from if isinstance(resume_from, Checkpoint) else load_checkpoint(resume_from)
        if cp.config_hash != cfg_hash:
            raise CheckpointError(
                "checkpoint was produced by a different configuration "
                f"(hash {cp.config_hash[:12]}.. vs {cfg_hash[:12]}..)"
            )
        if cp.step >= config.iterations:
            raise CheckpointError(
                f"checkpoint already at step {cp.step}, iterations={config.iterations}"
            )
        model = cp.model
        adam = cp.adam
        noise_rng = RngStream.from_state_dict(cp.noise_rng_state)
        mixer.load_state_dict(cp.mixer_state)
        start_step = cp.step
    else:
        init_rng = RngStream(config.seed, "init")
        dims = [config.data_dim + 1 + config.embed_dim] + list(config.hidden_dims) \
            + [config.data_dim]
        model = mlp_init(dims, config.activation, init_rng,
                         n_classes=config.K, embed_dim=config.embed_dim)
        adam = AdamState.for_params(model.params(), lr=config.lr, beta1=config.beta1,
                                    beta2=config.beta2, eps=config.eps)

    routing = RoutingConfig(warmup_steps=config.warmup_steps, t_policy=config.t_policy,
                            p_drop=config.p_drop, n_draws=config.n_draws)
    ledger = PurityLedger()
    rows = []
    t0 = time.perf_counter()
    for step in range(start_step + 1, config.iterations + 1):
        batch = mixer.next_batch()
        try:
            if config.mode == "spfm":
                res = purify_batch(model, batch, step, routing, noise_rng)
            else:
                res = _vanilla_batch(model, batch, step, routing, noise_rng)
        except FloatingPointError as e:
            raise TrainingDiverged(f"training diverged at step {step}: {e}")
        if not math.isfinite(res.loss):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        adam_step(adam, model.params(), res.grads.params())
        ledger_update(ledger, merge_step_decisions(res.decisions))
        if step % config.log_every == 0:
            wall = (time.perf_counter() - t0) * 1000.0
            rows.append(MetricsRow(step, res.loss, res.mean_l_cond,
                                   res.mean_l_uncond, res.suspect_count, wall))
            log.info("step %d loss %.5f suspects %d (%.0f ms)",
                     step, res.loss, res.suspect_count, wall)

    cp = Checkpoint(
        model=model, adam=adam, step=config.iterations,
        config=cfg_dict, config_hash=cfg_hash,
        noise_rng_state=noise_rng.state_dict(),
        mixer_state=mixer.state_dict(),
    )
    return TrainResult(checkpoint=cp, metrics=rows, ledger=ledger, corpus=corpus)
