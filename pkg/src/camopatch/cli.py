"""Command line entry points.

Subcommands cover the whole pipeline: synth-data, ingest, train-detector,
train-patch, apply, evaluate, plot.  Options can come from a YAML or JSON
config file (--config); explicit command line flags win.  Exit codes:
0 success, 2 usage error, 3 missing input file.
"""

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .detector import (DetectorTrainConfig, ToyDetector, load_detector,
                       save_detector, train_toy_detector)
from .evaluator import EvalReport, evaluate_conditions, plot_pr_curves
from .geometry import (PatchConfig, Placement, TransformRanges, load_patch,
                       patch_id, save_patch)
from .ingest import (DatasetManifest, load_csv_annotations, load_image,
                     save_image, split_manifest, tile_dataset)
from .losses import LossWeights, PrintableColorSet
from .trainer import TrainConfig, apply_patch_to_dataset, train_patch

log = logging.getLogger(__name__)

EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3


class CliError(Exception):
    def __init__(self, message, code=1):
        super().__init__(message)
        self.code = code


def _require_file(path, what):
    if not os.path.exists(path):
        raise CliError(f"missing {what}: {path}", EXIT_MISSING_INPUT)
    return path


def load_config_file(path):
    _require_file(path, "config file")
    with open(path) as f:
        if path.endswith((".yaml", ".yml")):
            import yaml

            data = yaml.safe_load(f)
        else:
            data = json.load(f)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise CliError(f"config file must hold a mapping: {path}", EXIT_USAGE)
    return data


def resolve_options(args, defaults):
    """Merge precedence: CLI flag > config file > built-in default."""
    config = load_config_file(args.config) if getattr(args, "config", None) else {}
    unknown = set(config) - set(defaults)
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(sorted(unknown))}", EXIT_USAGE)
    out = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        out[key] = flag if flag is not None else config.get(key, default)
    return out


def make_run_dir(base, seed):
    stamp = time.strftime("%Y%m%d_%H%M%S")
    path = os.path.join(base, f"run_{stamp}_seed{seed}")
    os.makedirs(path, exist_ok=True)
    return path


def write_resolved_config(run_dir, command, options):
    snapshot = {
        "command": command,
        "options": options,
        "versions": {"camopatch": __version__, "numpy": np.__version__,
                     "python": sys.version.split()[0]},
    }
    path = os.path.join(run_dir, "resolved_config.json")
    with open(path, "w") as f:
        json.dump(snapshot, f, indent=2, sort_keys=True, default=str)
    return path


def _patch_config_from(opts):
    return PatchConfig(rel_width=float(opts["rel_width"]),
                       rel_height=float(opts["rel_height"]),
                       placement=Placement(opts["placement"]),
                       count=int(opts["count"]))


def _transform_ranges_from(opts):
    if not opts.get("randomize", True):
        return TransformRanges.identity_jitter()
    return TransformRanges()


def cmd_synth_data(args):
    from .synth import SynthConfig, make_dataset, save_dataset

    opts = resolve_options(args, {"n_images": 60, "seed": 0, "size": 256})
    data = make_dataset(int(opts["n_images"]), int(opts["seed"]),
                        SynthConfig(size=int(opts["size"])))
    save_dataset(data, args.out)
    n_boxes = sum(len(a) for _, a in data)
    print(f"wrote {len(data)} images ({n_boxes} boxes) to {args.out}")
    return 0


def cmd_ingest(args):
    opts = resolve_options(args, {"tile_size": 256, "overlap": 32,
                                  "test_fraction": 0.28, "seed": 0})
    images_dir = _require_file(args.images, "images directory")
    ann_path = os.path.join(images_dir, "annotations.json")
    sources = []
    if os.path.exists(ann_path):
        with open(ann_path) as f:
            index = json.load(f)
        for name in sorted(index):
            image = load_image(_require_file(os.path.join(images_dir, name), "image"))
            from .geometry import Annotation

            source_id = os.path.splitext(name)[0]
            anns = [Annotation(image_id=source_id, class_id=a["class_id"],
                               box=tuple(a["box"])) for a in index[name]]
            sources.append((source_id, image, anns))
    elif args.annotations_csv:
        by_id = load_csv_annotations(_require_file(args.annotations_csv, "annotation csv"))
        for name in sorted(os.listdir(images_dir)):
            if not name.lower().endswith((".png", ".jpg", ".jpeg")):
                continue
            source_id = os.path.splitext(name)[0]
            image = load_image(os.path.join(images_dir, name))
            sources.append((source_id, image, by_id.get(source_id, [])))
    else:
        raise CliError(f"no annotations.json in {images_dir} and no --annotations-csv",
                       EXIT_MISSING_INPUT)
    manifest = tile_dataset(sources, args.out, int(opts["tile_size"]), int(opts["overlap"]))
    train, test = split_manifest(manifest, float(opts["test_fraction"]), int(opts["seed"]))
    train.save(os.path.join(args.out, "manifest_train.json"))
    test.save(os.path.join(args.out, "manifest_test.json"))
    print(f"tiled {len(sources)} sources into {len(manifest.entries)} tiles "
          f"({len(train.entries)} train / {len(test.entries)} test) in {args.out}")
    return 0


def _load_manifest_images(path):
    manifest = DatasetManifest.load(_require_file(path, "manifest"))
    return manifest.load_images(root=os.path.dirname(os.path.abspath(path)))


def cmd_train_detector(args):
    opts = resolve_options(args, {"epochs": 40, "batch_size": 8, "learning_rate": 1e-3,
                                  "seed": 0, "occluders": 2})
    train_data = _load_manifest_images(args.train_manifest)
    val_data = _load_manifest_images(args.val_manifest) if args.val_manifest else None
    cfg = DetectorTrainConfig(epochs=int(opts["epochs"]), batch_size=int(opts["batch_size"]),
                              learning_rate=float(opts["learning_rate"]),
                              seed=int(opts["seed"]),
                              occluders_per_image=int(opts["occluders"]))
    det, result = train_toy_detector(train_data, cfg, val_data=val_data)
    save_detector(det, args.out)
    msg = f"saved detector to {args.out} (checksum {det.weights_checksum()[:12]})"
    if "val_ap" in result:
        msg += f", val AP {result['val_ap']:.4f}"
    print(msg)
    return 0


_PATCH_DEFAULTS = {
    "rel_width": 0.2, "rel_height": 0.2, "placement": "on_top_center", "count": 1,
    "epochs": 60, "batch_size": 8, "learning_rate": 0.03, "seed": 0,
    "resolution": 48, "alpha": 0.01, "beta": 2.5, "gamma": 0.0,
    "randomize": True, "checkpoint_every": 0, "colors_file": None,
}


def cmd_train_patch(args):
    opts = resolve_options(args, _PATCH_DEFAULTS)
    detector = load_detector(_require_file(args.weights, "detector weights"))
    dataset = _load_manifest_images(args.manifest)
    patch_config = _patch_config_from(opts)
    train_config = TrainConfig(
        epochs=int(opts["epochs"]), batch_size=int(opts["batch_size"]),
        learning_rate=float(opts["learning_rate"]), seed=int(opts["seed"]),
        patch_resolution=int(opts["resolution"]),
        weights=LossWeights(alpha=float(opts["alpha"]), beta=float(opts["beta"]),
                            gamma=float(opts["gamma"])),
        transforms=_transform_ranges_from(opts),
        checkpoint_every=int(opts["checkpoint_every"]))
    colors = None
    if opts["colors_file"]:
        colors = PrintableColorSet.from_file(_require_file(opts["colors_file"], "color set"))
    run_dir = args.out or make_run_dir("runs", train_config.seed)
    os.makedirs(run_dir, exist_ok=True)
    write_resolved_config(run_dir, "train-patch", opts)
    patch, history = train_patch(detector, dataset, patch_config, train_config,
                                 run_dir=run_dir, colors=colors)
    print(f"trained patch {patch_id(patch)} in {run_dir} "
          f"(final objectness {history[-1]['obj']:.4f})")
    return 0


def cmd_apply(args):
    opts = resolve_options(args, {"policy": "randomized", "seed": 0})
    patch = load_patch(_require_file(args.patch, "patch"))
    dataset = _load_manifest_images(args.manifest)
    cfg_dict = patch.meta.get("config")
    if cfg_dict is None:
        raise CliError("patch sidecar lacks placement config; pass a patch "
                       "saved by train-patch", EXIT_USAGE)
    patch_config = PatchConfig.from_dict(cfg_dict)
    patched = apply_patch_to_dataset(dataset, patch, patch_config,
                                     policy=opts["policy"], seed=int(opts["seed"]))
    os.makedirs(args.out, exist_ok=True)
    for i, (image, _) in enumerate(patched):
        save_image(os.path.join(args.out, f"patched-{i:05d}.png"), image)
    print(f"wrote {len(patched)} patched images to {args.out}")
    return 0


def cmd_evaluate(args):
    opts = resolve_options(args, {"seed": 0, "gt_conf": 0.4, "nms_iou": 0.45,
                                  "match_iou": 0.5, "policy": "randomized",
                                  "eval_rel_width": None, "eval_rel_height": None,
                                  "eval_placement": None})
    detector = load_detector(_require_file(args.weights, "detector weights"))
    patch = load_patch(_require_file(args.patch, "patch"))
    dataset = _load_manifest_images(args.manifest)
    cfg_dict = patch.meta.get("config")
    if cfg_dict is None:
        raise CliError("patch sidecar lacks placement config", EXIT_USAGE)
    patch_config = PatchConfig.from_dict(cfg_dict)
    eval_config = None
    if opts["eval_rel_width"] or opts["eval_placement"]:
        eval_config = PatchConfig(
            rel_width=float(opts["eval_rel_width"] or patch_config.rel_width),
            rel_height=float(opts["eval_rel_height"] or patch_config.rel_height),
            placement=Placement(opts["eval_placement"] or patch_config.placement),
            count=2 if (opts["eval_placement"] or patch_config.placement)
                        == Placement.TWO_ON_TOP else 1)
    os.makedirs(args.out, exist_ok=True)
    write_resolved_config(args.out, "evaluate", opts)
    report = evaluate_conditions(detector, dataset, patch, patch_config,
                                 seed=int(opts["seed"]), policy=opts["policy"],
                                 gt_conf=float(opts["gt_conf"]),
                                 nms_iou=float(opts["nms_iou"]),
                                 match_iou=float(opts["match_iou"]),
                                 eval_patch_config=eval_config)
    report.save(os.path.join(args.out, "report.json"))
    report.save_pr_csv(os.path.join(args.out, "pr_points.csv"))
    aps = ", ".join(f"{name} {report.ap(name):.4f}" for name in sorted(report.conditions))
    print(f"wrote report to {args.out} ({aps})")
    return 0


def cmd_plot(args):
    report = EvalReport.load(_require_file(args.report, "report"))
    plot_pr_curves(report, args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="camopatch",
                                     description="adversarial camouflage patch toolkit")
    parser.add_argument("--version", action="version", version=f"camopatch {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="info logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="render a synthetic scene dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--n-images", type=int, dest="n_images")
    p.add_argument("--seed", type=int)
    p.add_argument("--size", type=int)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("ingest", help="tile images and build train/test manifests")
    p.add_argument("--images", required=True, help="directory with images + annotations.json")
    p.add_argument("--annotations-csv", dest="annotations_csv")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--tile-size", type=int, dest="tile_size")
    p.add_argument("--overlap", type=int)
    p.add_argument("--test-fraction", type=float, dest="test_fraction")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train-detector", help="train the toy detector")
    p.add_argument("--train-manifest", required=True, dest="train_manifest")
    p.add_argument("--val-manifest", dest="val_manifest")
    p.add_argument("--out", required=True, help="weights zip path")
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--seed", type=int)
    p.add_argument("--occluders", type=int)
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("train-patch", help="optimize a patch against a detector")
    p.add_argument("--weights", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="run directory (default runs/run_<stamp>_seed<seed>)")
    p.add_argument("--config")
    p.add_argument("--rel-width", type=float, dest="rel_width")
    p.add_argument("--rel-height", type=float, dest="rel_height")
    p.add_argument("--placement", choices=[pl.value for pl in Placement])
    p.add_argument("--count", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--seed", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    p.add_argument("--colors-file", dest="colors_file")
    p.set_defaults(func=cmd_train_patch)

    p = sub.add_parser("apply", help="composite a trained patch onto a dataset")
    p.add_argument("--patch", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--policy", choices=["randomized", "identity"])
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("evaluate", help="CLEAN/NOISE/PATCH benchmark")
    p.add_argument("--weights", required=True)
    p.add_argument("--patch", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--gt-conf", type=float, dest="gt_conf")
    p.add_argument("--nms-iou", type=float, dest="nms_iou")
    p.add_argument("--match-iou", type=float, dest="match_iou")
    p.add_argument("--policy", choices=["randomized", "identity"])
    p.add_argument("--eval-rel-width", type=float, dest="eval_rel_width")
    p.add_argument("--eval-rel-height", type=float, dest="eval_rel_height")
    p.add_argument("--eval-placement", dest="eval_placement",
                   choices=[pl.value for pl in Placement])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="PR curves from a report")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (ValueError, RuntimeError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
