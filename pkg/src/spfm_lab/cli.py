"""Command line entry point: dataset generation, training, purification
auditing, sampling, and report emission as subcommands.

stdout carries machine-readable output only (JSON summaries or CSV rows);
human diagnostics go to stderr. Exit codes: 0 success, 1 usage error,
2 runtime or data error. SPFM_LOG_LEVEL in {error, info, debug} controls
stderr verbosity.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from .evalkit import (DetectionReport, FidelityReport, RunRecord,
                      class_consistency, detection_metrics, energy_distance,
                      emit_report, reference_mixture_spec)
from .flowmatch import sample_ode_batch
from .numcore import RngStream
from .spfm import ledger_events_to_csv, ledger_from_events_csv, ledger_to_csv, \
    purify_margins
from .synthdata import load_dataset, save_dataset
from .trainer import (CheckpointError, ConfigError, TrainingDiverged,
                      dataset_from_spec, load_checkpoint, parse_config,
                      read_metrics_csv, resolve_generator_spec, save_checkpoint,
                      train, write_metrics_csv)

log = logging.getLogger("spfm")


def _emit(payload: dict) -> None:
    sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")


def cmd_gen(args) -> None:
    try:
        with open(args.spec, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as e:
        raise ConfigError(f"spec file not found or unreadable: {args.spec} ({e})")
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed JSON in {args.spec}: {e}")
    spec = resolve_generator_spec(raw, seed=0, subset="A")
    ds = dataset_from_spec(spec)
    save_dataset(ds, args.out)
    log.info("wrote %d samples to %s", len(ds.samples), args.out)
    _emit({"command": "gen", "out": str(args.out), "n": len(ds.samples),
           "K": ds.K, "corrupted": int(ds.corruption_mask().sum())})


def cmd_train(args) -> None:
    config = parse_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(config, resume_from=args.resume)
    save_checkpoint(result.checkpoint, out / "checkpoint.json")
    write_metrics_csv(result.metrics, out / "metrics.csv")
    ledger_to_csv(result.ledger, result.corpus, out / "ledger.csv")
    ledger_events_to_csv(result.ledger, out / "ledger_events.csv")
    save_dataset(result.corpus, out / "corpus.csv")
    final_loss = result.metrics[-1].mean_loss if result.metrics else None
    log.info("finished %d steps, final loss %s", result.checkpoint.step, final_loss)
    _emit({"command": "train", "out": str(out), "steps": result.checkpoint.step,
           "mode": config.mode, "final_loss": final_loss})


def cmd_purify(args) -> None:
    cp = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    t_policy = cp.config["t_policy"]
    n_draws = args.draws if args.draws is not None else int(cp.config["n_draws"])
    rng = RngStream(args.seed, "noise")
    margins, l_cond, l_uncond = purify_margins(cp.model, ds, t_policy, n_draws, rng)
    ids = np.array([s.id for s in ds.samples])
    order = np.lexsort((ids, -margins))
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "margin", "mean_l_cond", "mean_l_uncond",
                         "label", "true_label", "is_corrupted"])
        for i in order:
            s = ds.samples[i]
            writer.writerow([s.id, repr(float(margins[i])), repr(float(l_cond[i])),
                             repr(float(l_uncond[i])), s.label, s.true_label,
                             int(s.is_corrupted)])
    mask = ds.corruption_mask()
    summary = {"command": "purify", "out": str(args.out), "n": len(ds.samples),
               "n_draws": n_draws,
               "mean_margin_corrupted":
                   float(margins[mask].mean()) if mask.any() else None,
               "mean_margin_clean":
                   float(margins[~mask].mean()) if (~mask).any() else None}
    _emit(summary)


def cmd_sample(args) -> None:
    cp = load_checkpoint(args.checkpoint)
    if not 0 <= args.class_id < cp.model.n_classes:
        raise ValueError(f"class id {args.class_id} out of range for "
                         f"{cp.model.n_classes} classes")
    if args.n < 1:
        raise ValueError(f"--n must be >= 1, got {args.n}")
    rng = RngStream(args.seed, "sample")
    cond = np.full(args.n, args.class_id, dtype=np.int64)
    X = sample_ode_batch(cp.model, cond, args.w, args.steps, rng)
    rows = "\n".join(",".join(repr(float(v)) for v in x) for x in X) + "\n"
    if args.out:
        Path(args.out).write_text(rows, encoding="utf-8")
        _emit({"command": "sample", "out": str(args.out), "n": args.n,
               "class": args.class_id, "w": args.w})
    else:
        sys.stdout.write(rows)


def cmd_eval(args) -> None:
    run = Path(args.run)
    cp = load_checkpoint(run / "checkpoint.json")
    corpus = load_dataset(run / "corpus.csv")
    ledger = ledger_from_events_csv(run / "ledger_events.csv")

    if not 0.0 <= args.window <= 1.0:
        raise ValueError(f"--window must lie in [0, 1], got {args.window}")
    start = int(math.floor((1.0 - args.window) * cp.step)) + 1 if args.window < 1.0 else 1
    detection = detection_metrics(ledger.window(start), corpus, args.threshold)

    ref = reference_mixture_spec(corpus.generator_spec)
    rng = RngStream(args.seed, "sample")
    consistency = class_consistency(cp.model, ref, args.n_per_class, args.w,
                                    args.steps, rng.substream(0))
    K = ref["K"]
    cond = np.repeat(np.arange(K, dtype=np.int64), args.n_per_class)
    generated = sample_ode_batch(cp.model, cond, args.w, args.steps, rng.substream(1))
    ed = energy_distance(generated, corpus.features())

    payload = {
        "mode": cp.config["mode"],
        "rho": _extract_rho(corpus.generator_spec),
        "seed": cp.config["seed"],
        "threshold": args.threshold,
        "window": args.window,
        "detection": {
            "precision": detection.precision, "recall": detection.recall,
            "f1": detection.f1, "tp": detection.tp, "fp": detection.fp,
            "tn": detection.tn, "fn": detection.fn,
        },
        "fidelity": {
            "class_consistency": consistency,
            "energy_distance": ed,
            "samples_per_class": args.n_per_class,
        },
    }
    out = Path(args.out) if args.out else run / "eval.json"
    with open(out, "w", encoding="utf-8", newline="") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")
    _emit(dict(payload, command="eval", out=str(out)))


def _extract_rho(generator_spec: dict):
    if generator_spec.get("name") == "combined":
        parts = [generator_spec["a"], generator_spec["b"]]
    else:
        parts = [generator_spec]
    rhos = {float(p.get("noise", {}).get("rho", 0.0)) for p in parts}
    return rhos.pop() if len(rhos) == 1 else None


def cmd_report(args) -> None:
    runs = []
    for run_dir in args.runs:
        run = Path(run_dir)
        try:
            with open(run / "eval.json", "r", encoding="utf-8") as fh:
                ev = json.load(fh)
        except OSError as e:
            raise ValueError(f"run {run} has no eval.json (run `spfm eval` first): {e}")
        metrics = read_metrics_csv(run / "metrics.csv")
        d = ev["detection"]
        f = ev["fidelity"]
        runs.append(RunRecord(
            mode=ev["mode"], rho=ev["rho"], seed=ev["seed"], metrics=metrics,
            detection=DetectionReport(d["precision"], d["recall"], d["f1"],
                                      ev["threshold"], d["tp"], d["fp"],
                                      d["tn"], d["fn"]),
            fidelity=FidelityReport(f["class_consistency"], f["energy_distance"],
                                    f["samples_per_class"]),
        ))
    written = emit_report(runs, args.out)
    _emit({"command": "report", "out": str(args.out),
           "files": [str(p) for p in written]})


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spfm",
        description="Self-purifying flow matching lab: generate data, train, "
                    "audit label noise, sample, and report.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a dataset file from a spec JSON")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="run training from a config JSON")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("purify", help="rank a dataset by the SPFM suspect margin")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--draws", type=int, default=None,
                   help="override the checkpoint's n_draws")
    p.set_defaults(func=cmd_purify)

    p = sub.add_parser("sample", help="generate vectors from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--class", dest="class_id", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--w", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="compute detection and fidelity metrics for a run")
    p.add_argument("--run", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--window", type=float, default=0.25,
                   help="final fraction of steps used for flag rates")
    p.add_argument("--n-per-class", type=int, default=250)
    p.add_argument("--w", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="aggregate evaluated runs into summary + charts")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def _setup_logging() -> None:
    level = os.environ.get("SPFM_LOG_LEVEL", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(stream=sys.stderr,
                        level=levels.get(level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")


def dispatch(argv) -> int:
    """Run one CLI invocation; returns the process exit code."""
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        args.func(args)
    except (ConfigError, CheckpointError, TrainingDiverged, ValueError,
            KeyError, OSError, FloatingPointError) as e:
        log.error("%s", e)
        sys.stderr.write(f"error: {e}\n")
        return 2
    return 0


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))
