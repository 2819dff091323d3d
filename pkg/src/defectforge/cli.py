"""Command-line surface: dataset synthesis, training, inspection, evaluation.

Every command exits 0 only when it succeeded, prints errors to stderr, and is
deterministic for a fixed --seed. Heavy lifting stays in the library modules;
this file only parses flags, moves files, and prints.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .config import (
    ConfigError,
    PipelineConfig,
    load_config,
    load_synthetic_spec,
)
from .data import (
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    read_image,
    write_image,
    write_synthetic_dataset,
)
from .evaluate import scale_sweep
from .pipeline import (
    evaluate_pipeline,
    inspect_image,
    load_pipeline,
    render_overlay,
    save_pipeline,
    train_pipeline,
)

_LAYOUTS = ("synthetic", "kolektor", "severstal", "cplid")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="defectforge",
        description="Two-stage surface-defect inspection: patch screening then segmentation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="write a synthetic defect dataset")
    p_synth.add_argument("--spec", help="generator spec file (key = value lines)")
    p_synth.add_argument("--count", type=int, required=True, help="number of images")
    p_synth.add_argument("--out", required=True, help="output dataset directory")
    p_synth.add_argument("--seed", type=int, help="override the spec seed")
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="train pipeline stages and checkpoint them")
    p_train.add_argument("--data", required=True, help="dataset root directory")
    p_train.add_argument("--config", help="pipeline config file (key = value lines)")
    p_train.add_argument("--stage", choices=("1", "2", "both"), default="both")
    p_train.add_argument("--out", required=True, help="checkpoint path to write")
    p_train.add_argument("--layout", choices=_LAYOUTS, default="synthetic")
    p_train.add_argument("--seed", type=int, help="override the config seed")
    p_train.set_defaults(func=cmd_train)

    p_inspect = sub.add_parser("inspect", help="inspect one image with a checkpoint")
    p_inspect.add_argument("--image", required=True, help="image file to inspect")
    p_inspect.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p_inspect.add_argument("--skip-stage1", action="store_true",
                           help="send every grid patch to stage 2")
    p_inspect.add_argument("--out", required=True, help="directory for JSON + overlay")
    p_inspect.add_argument("--seed", type=int, help="accepted for uniformity; inference is deterministic")
    p_inspect.set_defaults(func=cmd_inspect)

    p_eval = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p_eval.add_argument("--data", required=True, help="dataset root directory")
    p_eval.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p_eval.add_argument("--sweep", action="store_true",
                        help="retrain at dataset fractions 30/60/100% and report the trend")
    p_eval.add_argument("--out", default=".", help="directory for report files")
    p_eval.add_argument("--layout", choices=_LAYOUTS, default="synthetic")
    p_eval.add_argument("--seed", type=int, help="override the checkpoint seed")
    p_eval.set_defaults(func=cmd_eval)
    return parser


def cmd_synth(args) -> int:
    spec = load_synthetic_spec(args.spec) if args.spec else SyntheticSpec()
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    if args.count < 0:
        raise ConfigError(f"--count must be >= 0, got {args.count}")
    records = generate_synthetic(spec, args.count)
    manifest = write_synthetic_dataset(records, args.out, spec)
    print(f"wrote {manifest['count']} images to {args.out} "
          f"(mean defect fraction {manifest['stats']['mean_defect_fraction']:.4f})")
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    records = [r for r in load_dataset(args.data, args.layout) if r.split != "test"]
    pipe = train_pipeline(records, config, stage=args.stage, log=print)
    save_pipeline(pipe, args.out)
    trained = [name for name, model in (("1", pipe.stage1), ("2", pipe.stage2)) if model]
    print(f"trained stage {'+'.join(trained)} on {len(records)} images -> {args.out}")
    return 0


def cmd_inspect(args) -> int:
    pipe = load_pipeline(args.checkpoint)
    image = read_image(args.image)
    result = inspect_image(image, pipe, skip_stage1=args.skip_stage1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / "inspection.json"
    json_path.write_text(json.dumps(result.to_dict(), indent=2) + "\n")
    overlay_path = out / "overlay.png"
    write_image(overlay_path, render_overlay(image, result))
    print(f"{result.selected_count}/{result.patch_count} patches selected, "
          f"{len(result.detections)} detections, "
          f"{int(result.binarized().sum())} defect pixels")
    print(f"wrote {json_path} and {overlay_path}")
    return 0


def cmd_eval(args) -> int:
    pipe = load_pipeline(args.checkpoint)
    if args.seed is not None:
        pipe.config = dataclasses.replace(pipe.config, seed=args.seed)
    records = load_dataset(args.data, args.layout)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.sweep:
        results = scale_sweep(records, pipe.config, seed=pipe.config.seed)
        payload = {"sweep": [
            {"fraction": f, "mean_pixel_acc": a} for f, a in results]}
        (out / "sweep.json").write_text(json.dumps(payload, indent=2) + "\n")
        for fraction, acc in results:
            print(f"fraction {fraction:.0%}: mean pixel ACC {acc:.4f}")
        print(f"wrote {out / 'sweep.json'}")
        return 0
    held_out = [r for r in records if r.split == "test"] or records
    report = evaluate_pipeline(held_out, pipe, log=None)
    (out / "report.json").write_text(report.to_json() + "\n")
    table = report.text_table()
    (out / "report.txt").write_text(table + "\n")
    print(table)
    print(f"wrote {out / 'report.json'} and {out / 'report.txt'}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
