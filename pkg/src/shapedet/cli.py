"""Command-line interface.

Subcommands: synth (generate a dataset), template (build the per-anatomy
template bundle), train (fit a model), detect (boxes for one volume), align
(particles to the population frame), eval (full report with figures).

Exit codes: 0 success, 1 usage error, 2 data error.
"""

import argparse
import json
import os
import sys

import torch

from .detection import extract_detections
from .errors import ConfigMismatch, EmptyCohort, ShapedetError
from .fileio import (
    read_particles,
    read_template_bundle,
    read_volume,
    write_boxes,
    write_particles,
    write_template_bundle,
)
from .geometry import Frame, template_from_cohort
from .heads import predict_world
from .metrics import evaluate
from .model import ModelConfig, load_model_checkpoint
from .report import export_case_heatmaps, write_report
from .synth import (
    DEFAULT_SPLIT_COUNTS,
    default_spec,
    generate_dataset,
    read_dataset,
    spec_from_json,
    split_records,
    write_dataset,
)
from .train import TrainConfig, fit, prepare_resume


class _ArgumentParser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; this interface uses 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_json(path):
    with open(path) as handle:
        return json.load(handle)


def cmd_synth(args):
    if args.config:
        doc = _load_json(args.config)
        spec = spec_from_json(doc)
        split_counts = doc.get("splits", DEFAULT_SPLIT_COUNTS)
    else:
        spec = default_spec()
        split_counts = DEFAULT_SPLIT_COUNTS
    if args.seed is not None:
        spec.seed = args.seed
    counts = {name: int(n) for name, n in split_counts.items()}
    records, _ = generate_dataset(spec, sum(counts.values()))
    ids = [r.sample_id for r in records]
    splits, cursor = {}, 0
    for name, n in counts.items():
        splits[name] = ids[cursor : cursor + n]
        cursor += n
    write_dataset(records, args.out, spec=spec, splits=splits)
    summary = ", ".join(f"{name}={len(ids)}" for name, ids in splits.items())
    print(f"wrote {len(records)} samples ({summary}) to {args.out}")
    return 0


def cmd_template(args):
    records, manifest = read_dataset(args.data)
    cohort = split_records(records, manifest, "train") or records
    if not cohort:
        raise EmptyCohort(f"no samples under {args.data}")
    templates = []
    for k in range(int(manifest["num_classes"])):
        masks = [r.anatomies[k].mask for r in cohort]
        local_sets = [r.anatomies[k].local for r in cohort]
        world_sets = [r.anatomies[k].world for r in cohort]
        index, template = template_from_cohort(masks, local_sets, world_sets)
        templates.append(template)
        print(f"anatomy {k}: medoid is cohort sample {cohort[index].sample_id}")
    write_template_bundle(templates, args.out)
    print(f"wrote template bundle to {args.out}")
    return 0


def _model_config_from(doc, manifest):
    """Dataset manifest fixes class/point counts; the config file may set
    the architecture but must not contradict the data."""
    fields = {
        "num_classes": int(manifest["num_classes"]),
        "num_points": int(manifest["num_points"]),
    }
    model_doc = doc.get("model", {})
    for key in ("num_classes", "num_points"):
        if key in model_doc and int(model_doc[key]) != fields[key]:
            raise ConfigMismatch(
                f"model {key}={model_doc[key]} contradicts dataset {key}={fields[key]}"
            )
    for key in ("stride", "stage_channels", "pyramid_width", "pool_grid",
                "hidden_width", "direct_world"):
        if key in model_doc:
            fields[key] = model_doc[key]
    return ModelConfig(**fields)


def cmd_train(args):
    records, manifest = read_dataset(args.data)
    templates = read_template_bundle(args.templates)
    doc = _load_json(args.config) if args.config else {}
    config = TrainConfig.from_json(doc)
    if args.seed is not None:
        config.seed = args.seed
    model_config = _model_config_from(doc, manifest)
    train_records = split_records(records, manifest, "train") or records
    val_records = split_records(records, manifest, "val")
    resume = prepare_resume(args.resume, config, model_config) if args.resume else None
    result = fit(
        train_records, val_records, templates, model_config, config, args.out, resume=resume
    )
    print(
        f"finished {config.epochs} epochs; best validation world RMSE "
        f"{result.best_val_rmse_world:.4f} at epoch {result.best_epoch}"
    )
    print(f"log: {result.log_path}")
    print(f"checkpoints: {result.best_checkpoint}, {result.last_checkpoint}")
    return 0


def cmd_detect(args):
    model, _, _ = load_model_checkpoint(args.model)
    path = args.volume
    if os.path.isdir(path):
        path = os.path.join(path, "volume.raw")
    volume, _ = read_volume(path)
    maps = model.predicted_maps(torch.as_tensor(volume, dtype=torch.float32))
    boxes = extract_detections(maps, args.threshold)
    for box in boxes:
        cells = [str(int(box.anatomy))]
        cells += [repr(float(v)) for v in (*box.center, *box.radii, box.confidence)]
        print(" ".join(cells))
    if args.out:
        write_boxes(boxes, args.out)
    return 0


def cmd_align(args):
    templates = read_template_bundle(args.templates)
    by_anatomy = {t.anatomy: t for t in templates}
    if args.anatomy not in by_anatomy:
        raise ConfigMismatch(
            f"anatomy {args.anatomy} not in bundle (has {sorted(by_anatomy)})"
        )
    local = read_particles(args.particles, Frame.LOCAL, args.anatomy)
    world = predict_world(local, by_anatomy[args.anatomy])
    if args.out:
        write_particles(world, args.out)
    else:
        for p in world.points:
            print(f"{p[0]!r} {p[1]!r} {p[2]!r}")
    return 0


def cmd_eval(args):
    records, manifest = read_dataset(args.data)
    templates = read_template_bundle(args.templates)
    model, _, _ = load_model_checkpoint(args.model)
    chosen = split_records(records, manifest, args.split) if args.split else records
    if not chosen:
        raise EmptyCohort(f"split {args.split!r} selects no samples")
    report = evaluate(
        model,
        chosen,
        templates,
        presence_threshold=args.threshold,
        s2s_seed=args.seed if args.seed is not None else 0,
        keep_predictions=args.heatmaps,
    )
    files = write_report(report, args.out, log_path=args.log)
    if args.heatmaps:
        files += export_case_heatmaps(
            report.predictions, templates, os.path.join(args.out, "heatmaps")
        )
    overall = report.aggregates["overall"]
    print(
        f"evaluated {len(chosen)} samples: {overall['count']} detections, "
        f"{report.missed_detections} missed"
    )
    for key in ("local_rmse", "world_rmse", "center_err", "radius_err", "s2s_mean"):
        print(f"  mean {key}: {overall[key]:.4f}")
    print(f"wrote {len(files)} files under {args.out}")
    return 0


def build_parser():
    parser = _ArgumentParser(prog="shapedet")
    commands = parser.add_subparsers(dest="command", required=True)

    def common(sub):
        sub.add_argument("--seed", type=int, default=None, help="override the configured seed")
        sub.add_argument("--config", default=None, help="JSON configuration file")
        sub.add_argument("--out", default=None, help="output path")
        return sub

    synth = common(commands.add_parser("synth", help="generate a synthetic dataset"))
    synth.set_defaults(func=cmd_synth)

    template = common(commands.add_parser("template", help="build the template bundle"))
    template.add_argument("--data", required=True, help="dataset directory")
    template.set_defaults(func=cmd_template)

    train = common(commands.add_parser("train", help="fit a model"))
    train.add_argument("--data", required=True, help="dataset directory")
    train.add_argument("--templates", required=True, help="template bundle directory")
    train.add_argument("--resume", default=None, help="checkpoint to continue from")
    train.set_defaults(func=cmd_train)

    detect = common(commands.add_parser("detect", help="detect boxes in one volume"))
    detect.add_argument("--model", required=True, help="model checkpoint")
    detect.add_argument("--volume", required=True, help="volume file or sample directory")
    detect.add_argument("--threshold", type=float, default=0.3)
    detect.set_defaults(func=cmd_detect)

    align = common(commands.add_parser("align", help="map particles to the population frame"))
    align.add_argument("--particles", required=True, help="image-space particle file")
    align.add_argument("--templates", required=True, help="template bundle directory")
    align.add_argument("--anatomy", type=int, required=True)
    align.set_defaults(func=cmd_align)

    evaluate_ = common(commands.add_parser("eval", help="full evaluation report"))
    evaluate_.add_argument("--data", required=True, help="dataset directory")
    evaluate_.add_argument("--templates", required=True, help="template bundle directory")
    evaluate_.add_argument("--model", required=True, help="model checkpoint")
    evaluate_.add_argument("--split", default=None, help="restrict to a named split")
    evaluate_.add_argument("--log", default=None, help="training log to render curves from")
    evaluate_.add_argument("--threshold", type=float, default=0.3)
    evaluate_.add_argument("--heatmaps", action="store_true", help="export surface heatmaps")
    evaluate_.set_defaults(func=cmd_eval)

    return parser


_REQUIRED_OUT = {"synth", "template", "train", "eval"}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command in _REQUIRED_OUT and not args.out:
        parser.error(f"--out is required for {args.command}")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except ShapedetError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
