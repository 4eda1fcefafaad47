"""Purification and generation quality metrics: detection scores against the
ground-truth corruption mask, conditional class consistency, energy distance,
and deterministic report/chart emission.

Charts are written by a tiny built-in SVG writer rather than a plotting
library so identical inputs produce byte-identical files.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .flowmatch import sample_ode_batch
from .numcore import RngStream, VelocityModel
from .spfm import PurityLedger
from .synthdata import Dataset, mixture_means


@dataclass
class DetectionReport:
    precision: float
    recall: float
    f1: float
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int


@dataclass
class FidelityReport:
    class_consistency: float
    energy_distance: float
    samples_per_class: int


def detection_metrics(ledger: PurityLedger, ds: Dataset, threshold: float) -> DetectionReport:
    """Score flag rates against the corruption mask.

    A sample is predicted corrupted iff its flag rate strictly exceeds the
    threshold. Samples the ledger never saw count as flag rate 0; ledger ids
    outside the dataset are an error.
    """
    ds_ids = {s.id for s in ds.samples}
    extra = set(ledger.times_seen) - ds_ids
    if extra:
        raise ValueError(f"ledger contains ids not in the dataset, e.g. {sorted(extra)[:5]}")
    tp = fp = tn = fn = 0
    for s in ds.samples:
        predicted = ledger.flag_rate(s.id) > threshold
        if predicted and s.is_corrupted:
            tp += 1
        elif predicted:
            fp += 1
        elif s.is_corrupted:
            fn += 1
        else:
            tn += 1
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return DetectionReport(precision, recall, f1, threshold, tp, fp, tn, fn)


def _require_mixture(ref: dict) -> tuple:
    if ref.get("name") != "mixture":
        raise ValueError(f"reference generator must be a mixture, got {ref.get('name')!r}")
    return int(ref["K"]), float(ref["radius"])


def reference_mixture_spec(generator_spec: dict) -> dict:
    """Unwrap a (possibly combined) dataset spec to one mixture reference.

    A combined corpus qualifies when every part is a mixture with the same
    K and radius.
    """
    if generator_spec.get("name") == "combined":
        parts = [generator_spec["a"], generator_spec["b"]]
    else:
        parts = [generator_spec]
    keys = {_require_mixture(p) for p in parts}
    if len(keys) != 1:
        raise ValueError(f"subsets disagree on mixture geometry: {sorted(keys)}")
    K, radius = keys.pop()
    return {"name": "mixture", "K": K, "radius": radius}


def class_consistency(model: VelocityModel, ref: dict, n_per_class: int,
                      w: float, steps: int, rng: RngStream) -> float:
    """Fraction of conditionally generated points whose nearest reference
    class mean is the conditioning class."""
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    K, radius = _require_mixture(reference_mixture_spec(ref))
    means = mixture_means(K, radius)
    cond = np.repeat(np.arange(K, dtype=np.int64), n_per_class)
    X = sample_ode_batch(model, cond, w, steps, rng)
    dists = np.linalg.norm(X[:, None, :] - means[None, :, :], axis=-1)
    nearest = np.argmin(dists, axis=1)
    return float(np.mean(nearest == cond))


def energy_distance(X: np.ndarray, Y: np.ndarray) -> float:
    """2 E||x - y|| - E||x - x'|| - E||y - y'|| over all index pairs."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape[0] == 0 or Y.shape[0] == 0:
        raise ValueError("both sample sets must be non-empty")
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    d_xy = np.linalg.norm(X[:, None, :] - Y[None, :, :], axis=-1).mean()
    d_xx = np.linalg.norm(X[:, None, :] - X[None, :, :], axis=-1).mean()
    d_yy = np.linalg.norm(Y[:, None, :] - Y[None, :, :], axis=-1).mean()
    return float(2.0 * d_xy - d_xx - d_yy)


_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e"]


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


def line_chart_svg(series, title: str, xlabel: str, ylabel: str,
                   width: int = 640, height: int = 400) -> str:
    """Static SVG line chart; series is a list of (label, xs, ys).

    Points with non-finite y are dropped. Output depends only on the inputs.
    """
    ml, mr, mt, mb = 62.0, 16.0, 34.0, 46.0
    pw, ph = width - ml - mr, height - mt - mb
    clean = []
    for label, xs, ys in series:
        pts = [(float(x), float(y)) for x, y in zip(xs, ys) if math.isfinite(y)]
        clean.append((label, pts))
    all_pts = [p for _, pts in clean for p in pts]
    if all_pts:
        x_min = min(p[0] for p in all_pts)
        x_max = max(p[0] for p in all_pts)
        y_min = min(p[1] for p in all_pts)
        y_max = max(p[1] for p in all_pts)
    else:
        x_min, x_max, y_min, y_max = 0.0, 1.0, 0.0, 1.0
    if x_max == x_min:
        x_max = x_min + 1.0
    if y_max == y_min:
        y_max = y_min + 1.0
    pad = 0.05 * (y_max - y_min)
    y_min, y_max = y_min - pad, y_max + pad

    def sx(x):
        return ml + (x - x_min) / (x_max - x_min) * pw

    def sy(y):
        return mt + (1.0 - (y - y_min) / (y_max - y_min)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" font-family="sans-serif" font-size="14" '
        f'text-anchor="middle">{title}</text>',
    ]
    # axes with 5 ticks each
    for i in range(5):
        fx = x_min + i * (x_max - x_min) / 4
        fy = y_min + i * (y_max - y_min) / 4
        px, py = sx(fx), sy(fy)
        out.append(f'<line x1="{px:.2f}" y1="{mt + ph:.2f}" x2="{px:.2f}" '
                   f'y2="{mt + ph + 5:.2f}" stroke="black"/>')
        out.append(f'<text x="{px:.2f}" y="{mt + ph + 18:.2f}" font-family="sans-serif" '
                   f'font-size="10" text-anchor="middle">{_fmt(fx)}</text>')
        out.append(f'<line x1="{ml - 5:.2f}" y1="{py:.2f}" x2="{ml:.2f}" '
                   f'y2="{py:.2f}" stroke="black"/>')
        out.append(f'<text x="{ml - 8:.2f}" y="{py + 3:.2f}" font-family="sans-serif" '
                   f'font-size="10" text-anchor="end">{_fmt(fy)}</text>')
    out.append(f'<line x1="{ml:.2f}" y1="{mt:.2f}" x2="{ml:.2f}" y2="{mt + ph:.2f}" '
               f'stroke="black"/>')
    out.append(f'<line x1="{ml:.2f}" y1="{mt + ph:.2f}" x2="{ml + pw:.2f}" '
               f'y2="{mt + ph:.2f}" stroke="black"/>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 8}" font-family="sans-serif" '
               f'font-size="11" text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="14" y="{mt + ph / 2:.1f}" font-family="sans-serif" '
               f'font-size="11" text-anchor="middle" '
               f'transform="rotate(-90 14 {mt + ph / 2:.1f})">{ylabel}</text>')
    for i, (label, pts) in enumerate(clean):
        color = _PALETTE[i % len(_PALETTE)]
        if pts:
            coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                       f'points="{coords}"/>')
        ly = mt + 14 + 14 * i
        out.append(f'<line x1="{ml + pw - 120:.2f}" y1="{ly - 4:.1f}" '
                   f'x2="{ml + pw - 100:.2f}" y2="{ly - 4:.1f}" stroke="{color}" '
                   f'stroke-width="1.5"/>')
        out.append(f'<text x="{ml + pw - 94:.2f}" y="{ly:.1f}" font-family="sans-serif" '
                   f'font-size="10">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


@dataclass
class RunRecord:
    """One evaluated training run, ready for the summary report."""

    mode: str
    rho: float
    seed: int
    metrics: list
    detection: DetectionReport
    fidelity: FidelityReport

    @property
    def label(self) -> str:
        rho = "NA" if self.rho is None else f"{self.rho:g}"
        return f"{self.mode}_rho{rho}_seed{self.seed}"


def emit_report(runs: list, out_dir) -> list:
    """Write summary.csv plus per-run suspect and loss charts; returns paths."""
    if not runs:
        raise ValueError("emit_report needs at least one run")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    summary = out_dir / "summary.csv"
    with open(summary, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["mode", "rho", "seed", "precision", "recall", "f1",
                         "consistency", "energy_distance"])
        for r in runs:
            writer.writerow([
                r.mode,
                "" if r.rho is None else repr(float(r.rho)),
                r.seed,
                repr(r.detection.precision), repr(r.detection.recall),
                repr(r.detection.f1), repr(r.fidelity.class_consistency),
                repr(r.fidelity.energy_distance),
            ])
    written.append(summary)

    for r in runs:
        steps = [m.step for m in r.metrics]
        p1 = out_dir / f"{r.label}_suspects.svg"
        p1.write_text(line_chart_svg(
            [("suspects", steps, [m.suspect_count for m in r.metrics])],
            f"suspect count per step ({r.label})", "step", "suspects"),
            encoding="utf-8")
        written.append(p1)
        p2 = out_dir / f"{r.label}_losses.svg"
        p2.write_text(line_chart_svg(
            [("l_cond", steps, [m.mean_l_cond for m in r.metrics]),
             ("l_uncond", steps, [m.mean_l_uncond for m in r.metrics])],
            f"per-branch loss ({r.label})", "step", "loss"),
            encoding="utf-8")
        written.append(p2)
    return written
