"""Command-line entry point: ``svgan <command> ...``.

Exit codes: 0 success, 2 invalid input or configuration, 3 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import generate_phantoms, load_dataset, normalize_record, save_dataset
from .errors import CheckpointError, DatasetError, NumericError, SvganError, ValidationError
from .gradsuite import format_results, run_suite
from .metrics import default_grouping
from .report import side_by_side, write_ppm, write_report
from .trainer import OracleGenerator, Trainer, evaluate, fit, predict_records
from .weighting import compute_stats, compute_weights, weights_csv

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("svgan")


def _frequency_table(dataset):
    stats = compute_stats((r.labels for r in dataset), dataset.num_seg_classes)
    names = dataset.class_names or [str(c) for c in range(stats.num_classes)]
    lines = ["class,name,pixels,fraction"]
    for c, f in enumerate(stats.freq):
        lines.append(f"{c},{names[c]},{int(f)},{f / stats.total:.5f}")
    diseases = np.bincount([r.disease for r in dataset], minlength=dataset.num_diseases)
    lines.append("disease,patients")
    lines.extend(f"{d},{int(n)}" for d, n in enumerate(diseases))
    return "\n".join(lines)


def cmd_synth(args):
    cfg = RunConfig.load(args.config)
    dataset = generate_phantoms(cfg.phantom)
    save_dataset(dataset, args.out)
    print(_frequency_table(dataset))
    return EXIT_OK


def cmd_weights(args):
    dataset = load_dataset(args.data)
    stats = compute_stats((r.labels for r in dataset), dataset.num_seg_classes)
    sys.stdout.write(weights_csv(stats, compute_weights(stats)))
    return EXIT_OK


def cmd_train(args):
    cfg = RunConfig.load(args.config)
    dataset = load_dataset(args.data)
    cfg.check_dataset(dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trainer = fit(dataset, cfg.generator, cfg.discriminator, cfg.train, augmentation=cfg.augmentation, out_dir=out)
    config_doc = cfg.to_dict()
    config_doc["config_hash"] = trainer.config_hash
    (out / "config.json").write_text(json.dumps(config_doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    last = trainer.log.steps[-1]
    print(f"trained {trainer.step_index} steps in {trainer.log.wall_clock:.1f}s; "
          f"final total loss {last['total']:.5f}; checkpoints in {out}")
    return EXIT_OK


def _write_overlays(model, records, out_dir, limit):
    out_dir.mkdir(parents=True, exist_ok=True)
    records = [normalize_record(r) for r in records[:limit]]
    for rec, (seg, _) in zip(records, predict_records(model, records)):
        pred = np.argmax(seg, axis=-3)
        s = rec.labels.shape[0] // 2
        write_ppm(out_dir / f"{rec.id}_slice{s}.ppm", side_by_side(rec.volume[0, s], rec.labels[s], pred[s]))


def cmd_eval(args):
    dataset = load_dataset(args.data)
    if args.oracle_stub:
        model = OracleGenerator(dataset.num_seg_classes, dataset.num_diseases)
    else:
        if not args.checkpoint:
            raise ValidationError("eval needs --checkpoint (or --oracle-stub)")
        model = Trainer.load_checkpoint(args.checkpoint).generator
        if model.config.num_seg_classes != dataset.num_seg_classes:
            raise ValidationError("checkpoint and dataset disagree on the number of classes")
    report = evaluate(model, dataset, dataset.num_seg_classes, default_grouping(dataset.num_seg_classes),
                      tta=args.tta)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_text(out / "metrics.csv", report.to_csv())
    _atomic_text(out / "summary.json", report.to_json() + "\n")
    _write_overlays(model, dataset.records, out / "overlays", args.overlays)
    summary = report.summary()
    for region, entry in summary["regions"].items():
        print(f"{region}: dice={_fmt(entry['dice'])} hausdorff={_fmt(entry['hausdorff'])} "
              f"sensitivity={_fmt(entry['sensitivity'])}")
    print(f"disease_accuracy={_fmt(summary['disease_accuracy'])}")
    return EXIT_OK


def _fmt(value):
    return "undefined" if value is None else f"{value:.4f}"


def _atomic_text(path, text):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def cmd_report(args):
    for path in write_report(args.log, args.out):
        print(path)
    return EXIT_OK


def cmd_gradcheck(args):
    results = run_suite(instances=args.instances, seed=args.seed)
    print(format_results(results, args.tolerance))
    worst = max(r.max_rel_error for r in results)
    print(f"worst max_rel_err={worst:.3e} over {len(results)} ops")
    return EXIT_OK if worst < args.tolerance else EXIT_RUNTIME


def build_parser():
    parser = argparse.ArgumentParser(prog="svgan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a phantom dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("weights", help="print class frequencies and weights as CSV")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_weights)

    p = sub.add_parser("train", help="train a generator/discriminator pair")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--oracle-stub", action="store_true", help="score the ground truth itself")
    p.add_argument("--tta", type=int, default=0, help="extra noisy copies averaged at inference")
    p.add_argument("--overlays", type=int, default=4, help="patients to render as PPM overlays")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="loss curves (SVG) and a summary table from a training log")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--instances", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, DatasetError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericError, SvganError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
