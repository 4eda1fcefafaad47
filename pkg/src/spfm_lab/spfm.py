"""Self-purifying routing: per-sample comparison of the conditional and
unconditional flow-matching losses, warm-up gating, and the purity ledger
that accumulates per-sample flag history.

A sample is Suspect exactly when its conditional loss strictly exceeds its
unconditional loss after the warm-up phase; Suspect samples train the
unconditional branch that step, everything else trains conditionally (minus
standard CFG label dropout).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .flowmatch import LossPair, draw_time, interpolate
from .numcore import ModelGrads, RngStream, VelocityModel, backward_batch, forward_batch


class Verdict(Enum):
    TRUSTED = "trusted"
    SUSPECT = "suspect"


@dataclass
class RoutingDecision:
    sample_id: int
    verdict: Verdict
    losses: LossPair
    step: int


@dataclass
class RoutingConfig:
    """Knobs purify_batch needs from the training configuration."""

    warmup_steps: int = 1000
    t_policy: object = 0.5   # float for fixed, "uniform" for uniform draws
    p_drop: float = 0.1
    n_draws: int = 1


def route(losses: LossPair, step: int, warmup_steps: int) -> Verdict:
    """The routing rule: Suspect iff l_cond > l_uncond and step > warmup_steps.

    Ties go to Trusted (the rule is a strict inequality), and every verdict
    during warm-up is Trusted regardless of the losses.
    """
    if not (math.isfinite(losses.l_cond) and math.isfinite(losses.l_uncond)):
        raise ValueError(f"non-finite losses: {losses}")
    if step > warmup_steps and losses.l_cond > losses.l_uncond:
        return Verdict.SUSPECT
    return Verdict.TRUSTED


@dataclass
class BatchResult:
    decisions: list
    loss: float
    grads: ModelGrads
    mean_l_cond: float
    mean_l_uncond: float
    suspect_count: int
    dropped_count: int


def purify_batch(model: VelocityModel, batch: list, step: int,
                 config: RoutingConfig, rng: RngStream) -> BatchResult:
    """One SPFM training step over a batch.

    Per sample and draw: one shared (x0, t') feeds both losses, the averaged
    pair is routed, and gradients flow only through the selected branch. The
    CFG dropout coin is drawn before routing so the rng stream layout does not
    depend on verdicts. Draw order per step: for each of the n_draws rounds
    x0 then (if the policy is uniform) t', and finally one dropout coin per
    sample.
    """
    if not batch:
        raise ValueError("purify_batch needs a non-empty batch")
    for s in batch:
        if s.label is None:
            raise ValueError(f"sample {s.id} has no label; unconditional-only "
                             "data is out of scope for purify_batch")
        if not 0 <= s.label < model.n_classes:
            raise ValueError(f"sample {s.id} label {s.label} out of range "
                             f"for {model.n_classes} classes")
    n = len(batch)
    X1 = np.stack([s.x1 for s in batch])
    labels = np.array([s.label for s in batch], dtype=np.int64)
    null_ids = np.full(n, -1, dtype=np.int64)

    draws = []
    for _ in range(config.n_draws):
        x0 = rng.normal(size=(n, model.data_dim))
        t = draw_time(config.t_policy, rng, size=n)
        draws.append((x0, np.asarray(t, dtype=np.float64)))
    coins = rng.uniform(size=n)
    dropped = coins < config.p_drop

    l_cond = np.zeros(n)
    l_uncond = np.zeros(n)
    passes = []
    for x0, t in draws:
        x_t = interpolate(x0, X1, t[:, None])
        target = X1 - x0
        v_c, cache_c = forward_batch(model, x_t, t, labels)
        v_u, cache_u = forward_batch(model, x_t, t, null_ids)
        l_cond += np.sum((v_c - target) ** 2, axis=1)
        l_uncond += np.sum((v_u - target) ** 2, axis=1)
        passes.append((v_c, cache_c, v_u, cache_u, target))
    l_cond /= config.n_draws
    l_uncond /= config.n_draws

    suspect = (l_cond > l_uncond) & (step > config.warmup_steps)
    train_uncond = suspect | dropped
    selected = np.where(train_uncond, l_uncond, l_cond)
    loss = float(np.mean(selected))

    # Mean of the selected per-sample losses, so each sample contributes
    # 2 (v - target) / (n * n_draws) through its selected branch only.
    scale = 2.0 / (n * config.n_draws)
    grads = ModelGrads.zeros_like(model)
    cond_rows = (~train_uncond)[:, None]
    uncond_rows = train_uncond[:, None]
    for v_c, cache_c, v_u, cache_u, target in passes:
        up_c = scale * (v_c - target) * cond_rows
        up_u = scale * (v_u - target) * uncond_rows
        grads.add_(backward_batch(model, cache_c, up_c))
        grads.add_(backward_batch(model, cache_u, up_u))

    decisions = [
        RoutingDecision(
            sample_id=s.id,
            verdict=Verdict.SUSPECT if suspect[i] else Verdict.TRUSTED,
            losses=LossPair(float(l_cond[i]), float(l_uncond[i])),
            step=step,
        )
        for i, s in enumerate(batch)
    ]
    return BatchResult(
        decisions=decisions, loss=loss, grads=grads,
        mean_l_cond=float(np.mean(l_cond)), mean_l_uncond=float(np.mean(l_uncond)),
        suspect_count=int(np.sum(suspect)), dropped_count=int(np.sum(dropped)),
    )


def purify_margins(model: VelocityModel, ds, t_policy, n_draws: int,
                   rng: RngStream):
    """Post-hoc SPFM audit: per-sample margin l_cond - l_uncond, averaged
    over n_draws fresh draws. Positive margin means the label looks suspect.

    Returns (margins, mean_l_cond, mean_l_uncond) aligned with ds.samples.
    """
    if n_draws < 1:
        raise ValueError(f"n_draws must be >= 1, got {n_draws}")
    n = len(ds.samples)
    if n == 0:
        raise ValueError("dataset is empty")
    X1 = ds.features()
    labels = ds.labels()
    null_ids = np.full(n, -1, dtype=np.int64)
    l_cond = np.zeros(n)
    l_uncond = np.zeros(n)
    for _ in range(n_draws):
        x0 = rng.normal(size=(n, model.data_dim))
        t = np.asarray(draw_time(t_policy, rng, size=n), dtype=np.float64)
        x_t = interpolate(x0, X1, t[:, None])
        target = X1 - x0
        v_c, _ = forward_batch(model, x_t, t, labels)
        v_u, _ = forward_batch(model, x_t, t, null_ids)
        l_cond += np.sum((v_c - target) ** 2, axis=1)
        l_uncond += np.sum((v_u - target) ** 2, axis=1)
    l_cond /= n_draws
    l_uncond /= n_draws
    return l_cond - l_uncond, l_cond, l_uncond


@dataclass
class PurityLedger:
    """Cumulative per-sample flag history plus the per-step suspect counts.

    Keeps the step indices behind each counter so flag rates can be recomputed
    over a window (detection uses the tail of training by default).
    """

    times_seen: dict = field(default_factory=dict)
    times_flagged: dict = field(default_factory=dict)
    suspects_per_step: list = field(default_factory=list)
    seen_steps: dict = field(default_factory=dict)
    flagged_steps: dict = field(default_factory=dict)

    def flag_rate(self, sample_id: int) -> float:
        seen = self.times_seen.get(sample_id, 0)
        if seen == 0:
            return 0.0
        return self.times_flagged.get(sample_id, 0) / seen

    def window(self, start_step: int) -> "PurityLedger":
        """Ledger restricted to steps >= start_step."""
        out = PurityLedger()
        for sid, steps in self.seen_steps.items():
            kept = [s for s in steps if s >= start_step]
            if kept:
                out.times_seen[sid] = len(kept)
                out.seen_steps[sid] = kept
                flagged = [s for s in self.flagged_steps.get(sid, []) if s >= start_step]
                out.times_flagged[sid] = len(flagged)
                out.flagged_steps[sid] = flagged
        out.suspects_per_step = list(self.suspects_per_step)
        return out


def merge_step_decisions(decisions: list) -> list:
    """Collapse duplicate sample ids from one step into a single decision.

    Batch recycling can place a sample in the same batch twice; the ledger
    counts at per-step granularity, so a sample is seen once per step and
    flagged if any of its occurrences was ruled Suspect.
    """
    merged = {}
    for d in decisions:
        prev = merged.get(d.sample_id)
        if prev is None:
            merged[d.sample_id] = d
        elif d.verdict is Verdict.SUSPECT and prev.verdict is not Verdict.SUSPECT:
            merged[d.sample_id] = d
    return list(merged.values())


def ledger_update(ledger: PurityLedger, decisions: list) -> PurityLedger:
    """Fold one completed step's decisions into the ledger.

    Appends the step's suspect count to the history; an empty decision list
    still appends 0. Duplicate sample ids within one step are rejected.
    """
    seen_now = set()
    n_suspects = 0
    for d in decisions:
        if d.sample_id in seen_now:
            raise ValueError(f"duplicate sample id {d.sample_id} in one step")
        seen_now.add(d.sample_id)
    for d in decisions:
        ledger.times_seen[d.sample_id] = ledger.times_seen.get(d.sample_id, 0) + 1
        ledger.seen_steps.setdefault(d.sample_id, []).append(d.step)
        if d.verdict is Verdict.SUSPECT:
            n_suspects += 1
            ledger.times_flagged[d.sample_id] = ledger.times_flagged.get(d.sample_id, 0) + 1
            ledger.flagged_steps.setdefault(d.sample_id, []).append(d.step)
    ledger.suspects_per_step.append(n_suspects)
    return ledger


def ledger_to_csv(ledger: PurityLedger, ds, path) -> None:
    """Write per-sample counters with the ground-truth corruption column."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "times_seen", "times_flagged",
                         "flag_rate", "is_corrupted_ground_truth"])
        for s in sorted(ds.samples, key=lambda s: s.id):
            writer.writerow([
                s.id,
                ledger.times_seen.get(s.id, 0),
                ledger.times_flagged.get(s.id, 0),
                repr(ledger.flag_rate(s.id)),
                int(s.is_corrupted),
            ])


def ledger_events_to_csv(ledger: PurityLedger, path) -> None:
    """Write the raw (step, sample_id, flagged) events for post-hoc windowing."""
    events = []
    for sid, steps in ledger.seen_steps.items():
        flagged = set(ledger.flagged_steps.get(sid, []))
        for step in steps:
            events.append((step, sid, int(step in flagged)))
    events.sort()
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "sample_id", "flagged"])
        writer.writerows(events)


def ledger_from_events_csv(path) -> PurityLedger:
    ledger = PurityLedger()
    per_step = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["step", "sample_id", "flagged"]:
            raise ValueError(f"malformed ledger events file: {path}")
        for row in reader:
            step, sid, flagged = int(row[0]), int(row[1]), int(row[2])
            ledger.times_seen[sid] = ledger.times_seen.get(sid, 0) + 1
            ledger.seen_steps.setdefault(sid, []).append(step)
            if flagged:
                ledger.times_flagged[sid] = ledger.times_flagged.get(sid, 0) + 1
                ledger.flagged_steps.setdefault(sid, []).append(step)
            per_step[step] = per_step.get(step, 0) + flagged
    if per_step:
        last = max(per_step)
        ledger.suspects_per_step = [per_step.get(s, 0) for s in range(1, last + 1)]
    return ledger
