"""Command-line surface: gradient verification, memory planning, phantom
corpora, training, segmentation, and ensemble selection.

Every report is JSON with a schema_version field and goes to stdout;
human-readable progress goes to stderr. Exit codes: 0 success, 1
verification or numerical failure, 2 usage/config error. Commands that
draw randomness require an explicit --seed; nothing is seeded ambiently.
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from . import memplan, phantoms, verify
from .engine import STRATEGIES, EngineError
from .tensor import ShapeError, tensor_read, tensor_write
from .training import LrSchedule, TrainingError, per_class_dice, train
from .unet import Model, crop_to_record, pad_to_grid, resolve_config

_PRECISIONS = ("single", "double")
_AXES = ("volume", "depth", "channels")


def _emit(doc, out=None):
    text = json.dumps(doc, indent=2, sort_keys=True)
    if out:
        with open(out, "w") as f:
            f.write(text + "\n")
    print(text)


def _status(msg):
    print(msg, file=sys.stderr)


def cmd_gradcheck(args):
    report = verify.gradcheck_report(args.config, args.seed, corrupt=args.corrupt_op)
    for check in report["checks"]:
        _status("%s  %-36s max_err=%.3e  tol=%.0e"
                % ("PASS" if check["pass"] else "FAIL", check["check"],
                   check["max_err"], check["tol"]))
    if not report["pass"]:
        _status("worst offender: %s" % report["worst"])
    _emit(report, args.out)
    return 0 if report["pass"] else 1


def cmd_memplan(args):
    precision = args.precision or "single"
    if args.claims:
        report = memplan.claims_report(precision)
        _status("volume multiplier (family max): %.4f"
                % report["family"]["volume_multiplier_max"])
        _status("channel multiplier (family): %d..%d"
                % (report["family"]["channel_multiplier_min"],
                   report["family"]["channel_multiplier_max"]))
        _emit(report, args.out)
        return 0
    config = resolve_config(args.config)
    if args.budget is not None:
        if args.axis is None:
            raise ValueError("--budget requires --axis")
        budget = memplan.parse_budget(args.budget)
        found = memplan.budget_search(config, budget, args.axis,
                                      strategy=args.strategy, precision=precision)
        report = {"schema_version": 1, "budget_bytes": budget,
                  "strategy": args.strategy, "precision": precision,
                  "search": found}
        _emit(report, args.out)
        return 0
    if args.compare:
        both = {s: memplan.estimate(config, s, precision) for s in STRATEGIES}
        rows = [(s, both[s]["retained_bytes"]) for s in STRATEGIES]
        for s, retained in rows:
            _status("%-10s retained %d bytes" % (s, retained))
        report = {"schema_version": 1, "precision": precision,
                  "store_all": both["store-all"], "reversible": both["reversible"],
                  "store_over_reversible": both["store-all"]["retained_bytes"]
                  / both["reversible"]["retained_bytes"]}
        _emit(report, args.out)
        return 0
    _emit(memplan.estimate(config, args.strategy, precision), args.out)
    return 0


def cmd_phantoms(args):
    index = phantoms.write_corpus(args.out, args.count, args.size, args.seed)
    _status("wrote %d phantoms of size %s to %s"
            % (index["count"], "x".join(map(str, index["size"])), args.out))
    _emit(index)
    return 0


def cmd_train(args):
    if (args.steps is None) == (args.epochs is None):
        raise ValueError("give exactly one of --steps or --epochs")
    pairs, _ = phantoms.read_corpus(args.data)
    if args.holdout >= len(pairs):
        raise ValueError("holdout %d leaves no training data (corpus has %d)"
                         % (args.holdout, len(pairs)))
    split = len(pairs) - args.holdout
    train_pairs, holdout_pairs = pairs[:split], pairs[split:]
    config = resolve_config(args.config)
    schedule = LrSchedule(base_lr=args.base_lr) if args.base_lr else None
    os.makedirs(args.out, exist_ok=True)
    started = time.time()
    model, records = train(
        config, train_pairs, seed=args.seed, holdout=holdout_pairs,
        epochs=args.epochs, steps=args.steps, precision=args.precision,
        strategy=args.strategy, schedule=schedule,
        augment_data=not args.no_augment,
        metrics_path=os.path.join(args.out, "metrics.jsonl"))
    wall = time.time() - started
    model.save(os.path.join(args.out, "model"))
    evals = [r for r in records if r["kind"] == "eval"]
    steps = [r for r in records if r["kind"] == "step"]
    report = {
        "schema_version": 1,
        "config": config.to_dict(),
        "seed": args.seed,
        "precision": args.precision,
        "strategy": args.strategy,
        "train_pairs": len(train_pairs),
        "holdout_pairs": len(holdout_pairs),
        "steps": len(steps),
        "final_eval": evals[-1] if evals else None,
        "peak_ledger_bytes": max((r["peak_ledger_bytes"] for r in steps), default=0),
        "wall_seconds": wall,
        "out": args.out,
    }
    if evals:
        _status("final holdout mean dice: %.4f" % evals[-1]["mean_dice"])
    _emit(report)
    return 0


def cmd_segment(args):
    model = Model.load(args.model, strategy=args.strategy)
    volume = tensor_read(args.volume)
    if volume.shape[1] != model.config.in_ch:
        raise ShapeError("volume has %d channels, model expects %d"
                         % (volume.shape[1], model.config.in_ch))
    volume = volume.astype(model.dtype, copy=False)
    padded, record = pad_to_grid(volume, model.config.levels)
    logits = crop_to_record(model.forward(padded, None), record)
    labels = np.argmax(logits, axis=1)[0]
    out5 = labels.astype(np.float32).reshape((1, 1) + labels.shape)
    tensor_write(out5, args.out)
    report = {
        "schema_version": 1,
        "model": args.model,
        "volume": args.volume,
        "out": args.out,
        "input_size": list(volume.shape[2:]),
        "padded_size": list(padded.shape[2:]),
        "class_voxels": [int((labels == c).sum())
                         for c in range(model.config.num_classes)],
    }
    if args.labels:
        truth = tensor_read(args.labels)[0, 0].astype(np.int32)
        if truth.shape != labels.shape:
            raise ShapeError("reference labels %r do not match volume %r"
                             % (truth.shape, labels.shape))
        per_class = per_class_dice(labels, truth, model.config.num_classes)
        report["dice"] = per_class
        report["mean_dice"] = sum(per_class) / len(per_class)
        _status("mean dice vs reference: %.4f" % report["mean_dice"])
    _emit(report)
    return 0


def cmd_ensemble_select(args):
    with open(args.stats) as f:
        stats = json.load(f)
    models = stats["models"]
    dice = np.array([m["train_dice"] for m in models], dtype=np.float64)
    hists = np.array(stats["train_histograms"], dtype=np.float64)
    volume = tensor_read(args.volume)
    scores = phantoms.ensemble_scores(dice, hists, volume,
                                      reading=args.reading, bins=hists.shape[1])
    chosen = phantoms.ensemble_select(dice, hists, volume,
                                      reading=args.reading, bins=hists.shape[1])
    report = {
        "schema_version": 1,
        "reading": args.reading,
        "scores": [float(s) for s in scores],
        "selected_index": int(chosen),
        "selected_name": models[chosen].get("name", str(chosen)),
    }
    _status("selected model %d (%s)" % (chosen, report["selected_name"]))
    _emit(report, args.out)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="revunet",
        description="Reversible 3D U-Net micro-engine: verification, memory "
                    "planning, and desk-scale training on synthetic phantoms.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=False, precision=None, strategy=False):
        if seed:
            p.add_argument("--seed", type=int, required=True,
                           help="explicit seed; required, no ambient randomness")
        if precision is not None:
            p.add_argument("--precision", choices=_PRECISIONS, default=precision)
        if strategy:
            p.add_argument("--strategy", choices=STRATEGIES, default="reversible")

    p = sub.add_parser("gradcheck", help="round-trip, oracle, and finite-difference suites")
    p.add_argument("--config", default="mbconv-base",
                   help="preset name or config JSON; desk presets run their toy analog")
    common(p, seed=True)
    p.add_argument("--corrupt-op", default=None,
                   help="test hook: perturb the named op's VJP to force a failure")
    p.add_argument("--out", default=None, help="also write the JSON report here")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("memplan", help="activation-memory estimates and budget search")
    p.add_argument("--config", default="mbconv-base")
    common(p, precision="single", strategy=True)
    p.add_argument("--budget", default=None,
                   help="byte budget, e.g. 14GB (decimal) or 2GiB (binary)")
    p.add_argument("--axis", choices=_AXES, default=None)
    p.add_argument("--compare", action="store_true",
                   help="store-all vs reversible side by side")
    p.add_argument("--claims", action="store_true",
                   help="full claim-check report across the preset family")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_memplan)

    p = sub.add_parser("phantoms", help="generate a deterministic phantom corpus")
    p.add_argument("--out", required=True, help="corpus directory")
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--size", type=int, default=32, help="cube side length")
    common(p, seed=True)
    p.set_defaults(func=cmd_phantoms)

    p = sub.add_parser("train", help="train on a phantom corpus")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default="mbconv-base-toy")
    common(p, seed=True, precision="single", strategy=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--holdout", type=int, default=0,
                   help="hold out the last N corpus items for evaluation")
    p.add_argument("--base-lr", type=float, default=None,
                   help="override the schedule's base learning rate")
    p.add_argument("--no-augment", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="run a saved model on an RVT1 volume")
    p.add_argument("--model", required=True, help="saved model directory")
    p.add_argument("--volume", required=True, help="input RVT1 volume")
    p.add_argument("--out", required=True, help="output RVT1 label map")
    p.add_argument("--labels", default=None,
                   help="optional reference labels; adds Dice to the report")
    p.add_argument("--strategy", choices=STRATEGIES, default="reversible")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("ensemble-select",
                       help="pick a model by Dice weighted against histogram distance")
    p.add_argument("--stats", required=True,
                   help="JSON with models[].train_dice and train_histograms")
    p.add_argument("--volume", required=True, help="query RVT1 volume")
    p.add_argument("--reading", choices=("literal", "inverted"), default="literal")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ensemble_select)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (TrainingError, EngineError) as exc:
        _status("failure: %s" % exc)
        return 1
    except (ValueError, KeyError, OSError) as exc:
        _status("error: %s" % exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
