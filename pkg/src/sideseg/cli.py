"""Command-line front end: gen, train, eval, infer, ablate, bench, serve.

Commands share one output directory so the pipeline runs as separate
invocations: `gen` writes scene bundles, `train` fits a model against them,
`eval`/`infer`/`ablate`/`bench` consume the checkpoint. Every command
writes the effective config and a manifest (config hash, seed, package
versions) next to its outputs, and removes whatever it created if it
fails partway.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, config_hash, load_model
from .evalinfer import (ablate_gate_rate, ablate_side_fraction, bench_inference,
                        confusion_matrix, make_grid, metrics_from_confusion,
                        save_labels_png, save_softmax, sliding_infer,
                        write_metrics, write_table_csv)
from .model import GatedSegModel, ModelConfig
from .nn import ConfigError, GradientError
from .synth import (class_palette, extract_patches, generate_scene, kmeans_sample,
                    load_scene, save_scene, simulate_photos, simulate_strokes)
from .train import TrainConfig, fit

log = logging.getLogger("sideseg")

DEFAULTS = {
    "seed": 0,
    "scenes": {
        "count_train": 8,
        "count_val": 2,
        "count_test": 2,
        "height": 256,
        "width": 256,
        "num_classes": 4,
        "n_cells": None,             # region count; None = generator default
        "kind": "stroke",            # stroke | point
        "strokes_per_region": 1,
        "stroke_width": 5.0,
        "min_region_area": 64,
        "photo_density": 3.0,
        "photo_noise_sigma": 2.0,
    },
    "model": {
        "num_classes": 4,
        "side_channels_raw": 4,
        "d": 16,
        "n": 4,
        "backbone_channels": 32,
        "num_gated_blocks": 6,
        "dilations": [1, 1, 2, 2, 4, 4],
        "target_rate": 0.6,
        "gate_temperature": 1.0,
        # brush strokes are dense; starting every pass at full weight lets the
        # compounding 3x3 ones kernel swamp the image features
        "diffusion_init": "first_one_rest_zero",
        "seed": 0,
    },
    "data": {
        "patch_size": 80,
        "stride": 40,
        "ignore_threshold": 0.6,
        "sparse_normal_class": None,
        "augment": True,
    },
    "train": {
        "epochs": 12,
        "batch_size": 16,
        "base_lr": 0.02,
        "lr_embedding": 100.0,
        "lr_fusion": 2.0,
        "lr_diffusion": 0.001,
        "momentum": 0.9,
        "poly_power": 0.9,
        "warmup_epochs": 2,
        "grad_accum_steps": 1,
        "target_rate": 0.6,
        "loss_weight": 1.0,
        "per_gate_rate": False,
        "early_stop_patience": 0,
        "early_stop_metric": "miou",
        "seed": 0,
        "diffusion_scalar_init": None,
        "divergence_threshold": 1e6,
        "val_patch": 80,
        "val_stride": 40,
    },
    "eval": {
        "patch": 80,
        "stride": 40,
        "side_fraction": 1.0,
        "exclude": [],
    },
    "ablate": {
        "kind": "side_fraction",     # side_fraction | gate_rate
        "fractions": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
        "rates": [0.4, 0.6, 0.8],
    },
    "bench": {
        "batch_sizes": [1, 16],
        "patch": 80,
        "stride": 40,
        "min_patches": 50,
    },
}


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

def merge_config(defaults, user, path=""):
    """Defaults overlaid with user values; unknown keys are rejected."""
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            out[key] = merge_config(defaults[key], value, path + key + ".")
        else:
            out[key] = value
    return out


def apply_override(config, item):
    """One --set entry, e.g. train.base_lr=0.01 (values parsed as JSON)."""
    key, sep, raw = item.partition("=")
    if not sep:
        raise ConfigError(f"--set takes key=value, got {item!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config
    parts = key.split(".")
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def load_config(args):
    user = {}
    if args.config:
        with open(args.config) as fh:
            user = json.load(fh)
    config = merge_config(DEFAULTS, user)
    for item in args.set or []:
        apply_override(config, item)
    if args.seed is not None:
        config["seed"] = args.seed
    return config


def child_seed(*entropy):
    return int(np.random.SeedSequence(entropy=[int(e) for e in entropy])
               .generate_state(1)[0])


def write_run_records(directory, command, config):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "config.json", "w") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")
    import PIL
    import scipy
    manifest = {
        "command": command,
        "config_hash": config_hash(config),
        "seed": config["seed"],
        "versions": {
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pillow": PIL.__version__,
            "sideseg": __version__,
        },
    }
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


class CreatedPaths:
    """Paths this run created, removed again if the command fails."""

    def __init__(self):
        self.paths = []

    def claim(self, path):
        path = Path(path)
        if not path.exists():
            self.paths.append(path)
        return path

    def cleanup(self):
        for path in reversed(self.paths):
            if path.is_dir():
                shutil.rmtree(path, ignore_errors=True)
            elif path.exists():
                path.unlink()


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

SPLITS = ("train", "val", "test")


def scenes_root(args, config):
    if args.scenes:
        return Path(args.scenes)
    return Path(args.out) / "scenes"


def load_split(root, split):
    split_dir = Path(root) / split
    if not split_dir.is_dir():
        raise ConfigError(f"scene split not found: {split_dir}; run gen first")
    sets = []
    for entry in sorted(split_dir.iterdir()):
        if entry.is_dir():
            sets.append(load_scene(entry))
    if not sets:
        raise ConfigError(f"no scene bundles under {split_dir}")
    return sets


def resolve_checkpoint(args, out):
    if args.model:
        path = Path(args.model)
    else:
        train_dir = Path(out) / "train"
        path = train_dir / "best.sinf"
        if not path.exists():
            path = train_dir / "checkpoint.sinf"
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return path


def annotate_scene(scene, kind, seed, sc):
    if kind == "stroke":
        return simulate_strokes(scene, seed=seed,
                                strokes_per_region=sc["strokes_per_region"],
                                width=sc["stroke_width"],
                                min_region_area=sc["min_region_area"])
    if kind == "point":
        return simulate_photos(scene, seed=seed, density=sc["photo_density"],
                               noise_sigma=sc["photo_noise_sigma"])
    raise ConfigError(f"unknown annotation kind {kind!r}")


def eval_scene_sets(model, scene_sets, fraction, seed, patch, stride, exclude):
    num_classes = model.config.num_classes
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    rates = []
    per_scene = []
    for i, (scene, aset) in enumerate(scene_sets):
        sub = kmeans_sample(aset, fraction, seed=child_seed(seed, 83, i))
        grid = make_grid(scene.shape, patch, stride)
        result = sliding_infer(scene.image, sub, model, grid)
        conf = confusion_matrix(result.labels, scene.labels, num_classes)
        confusion += conf
        rates.append(result.gate_rate)
        per_scene.append((scene, result, conf))
    return confusion, rates, per_scene


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(args, config, created):
    sc = config["scenes"]
    root = created.claim(scenes_root(args, config))
    for split_idx, split in enumerate(SPLITS):
        count = sc[f"count_{split}"]
        for i in range(count):
            seed = child_seed(config["seed"], split_idx, i)
            scene = generate_scene(sc["height"], sc["width"], sc["num_classes"],
                                   seed=seed, n_cells=sc["n_cells"])
            aset = annotate_scene(scene, sc["kind"], child_seed(seed, 1), sc)
            save_scene(scene, aset, root / split / f"scene_{i:03d}")
            log.info("gen %s/scene_%03d: %d annotations", split, i, len(aset))
    write_run_records(root, "gen", config)
    print(f"gen: wrote {sum(sc[f'count_{s}'] for s in SPLITS)} scenes to {root}")
    return 0


def build_patches(scene_sets, config):
    dc = config["data"]
    patches = []
    for i, (scene, aset) in enumerate(scene_sets):
        patches.extend(extract_patches(
            scene, aset, patch_size=dc["patch_size"], stride=dc["stride"],
            ignore_threshold=dc["ignore_threshold"],
            sparse_normal_class=dc["sparse_normal_class"],
            augment=dc["augment"], seed=child_seed(config["seed"], 57, i)))
    return patches


def cmd_train(args, config, created):
    root = scenes_root(args, config)
    train_sets = load_split(root, "train")
    val_sets = load_split(root, "val")
    patches = build_patches(train_sets, config)
    if not patches:
        raise ConfigError("no training patches survived filtering")
    model = GatedSegModel(model_config_from(config))
    tc = TrainConfig(**config["train"])
    out_dir = created.claim(Path(args.out) / "train")
    log.info("train: %d patches, %d epochs", len(patches), tc.epochs)
    _, history = fit(model, patches, val_sets, tc, out_dir=out_dir)
    write_run_records(out_dir, "train", config)
    last = history[-1] if history else {}
    print(f"train: {len(history)} epochs, "
          f"final val mIoU {last.get('val_miou', float('nan')):.4f}")
    return 0


def model_config_from(config):
    mc = dict(config["model"])
    mc["dilations"] = tuple(mc["dilations"])
    return ModelConfig(**mc)


def cmd_eval(args, config, created):
    ckpt_path = resolve_checkpoint(args, args.out)
    model, _ = load_model(ckpt_path)
    test_sets = load_split(scenes_root(args, config), "test")
    ec = config["eval"]
    out_dir = created.claim(Path(args.out) / "eval")
    out_dir.mkdir(parents=True, exist_ok=True)
    confusion, rates, per_scene = eval_scene_sets(
        model, test_sets, ec["side_fraction"], config["seed"],
        ec["patch"], ec["stride"], tuple(ec["exclude"]))
    palette = class_palette(model.config.num_classes)
    for i, (scene, result, conf) in enumerate(per_scene):
        save_labels_png(result.labels, out_dir / f"scene_{i:03d}_labels.png",
                        palette=palette)
        save_softmax(result.mean_softmax, out_dir / f"scene_{i:03d}_softmax.ssmx")
        write_metrics(metrics_from_confusion(conf, tuple(ec["exclude"])),
                      out_dir / f"scene_{i:03d}_metrics.txt",
                      out_dir / "metrics.jsonl",
                      extra={"scene": f"scene_{i:03d}",
                             "gate_rate": result.gate_rate})
    report = metrics_from_confusion(confusion, tuple(ec["exclude"]))
    write_metrics(report, out_dir / "metrics.txt", out_dir / "metrics.jsonl",
                  extra={"scene": "aggregate",
                         "side_fraction": ec["side_fraction"],
                         "gate_rate": float(np.mean(rates)),
                         "checkpoint": ckpt_path.name})
    write_run_records(out_dir, "eval", config)
    print(f"eval: mIoU {report.miou:.4f} acc {report.pixel_accuracy:.4f} "
          f"gate rate {float(np.mean(rates)):.3f}")
    return 0


def cmd_infer(args, config, created):
    ckpt_path = resolve_checkpoint(args, args.out)
    model, _ = load_model(ckpt_path)
    scene, aset = load_scene(args.scene)
    ec = config["eval"]
    sub = kmeans_sample(aset, ec["side_fraction"],
                        seed=child_seed(config["seed"], 83, 0))
    patch = min(ec["patch"], *scene.shape)
    grid = make_grid(scene.shape, patch, min(ec["stride"], patch))
    result = sliding_infer(scene.image, sub, model, grid)
    out_dir = created.claim(Path(args.out))
    out_dir.mkdir(parents=True, exist_ok=True)
    save_labels_png(result.labels, out_dir / "labels.png",
                    palette=class_palette(model.config.num_classes))
    save_softmax(result.mean_softmax, out_dir / "softmax.ssmx")
    report = metrics_from_confusion(confusion_matrix(
        result.labels, scene.labels, model.config.num_classes))
    write_metrics(report, out_dir / "metrics.txt", out_dir / "metrics.jsonl",
                  extra={"gate_rate": result.gate_rate})
    print(f"infer: mIoU {report.miou:.4f} gate rate {result.gate_rate:.3f}")
    write_run_records(out_dir, "infer", config)
    return 0


def cmd_ablate(args, config, created):
    ac = config["ablate"]
    out_dir = created.claim(Path(args.out) / "ablate")
    out_dir.mkdir(parents=True, exist_ok=True)
    ec = config["eval"]
    root = scenes_root(args, config)
    if ac["kind"] == "side_fraction":
        model, _ = load_model(resolve_checkpoint(args, args.out))
        test_sets = load_split(root, "test")
        rows = ablate_side_fraction(model, test_sets,
                                    fractions=tuple(ac["fractions"]),
                                    seed=config["seed"], patch=ec["patch"],
                                    stride=ec["stride"],
                                    exclude=tuple(ec["exclude"]))
        write_table_csv(rows, out_dir / "side_fraction.csv")
    elif ac["kind"] == "gate_rate":
        train_sets = load_split(root, "train")
        val_sets = load_split(root, "val")
        patches = build_patches(train_sets, config)
        rows = ablate_gate_rate(patches, val_sets, model_config_from(config),
                                TrainConfig(**config["train"]),
                                rates=tuple(ac["rates"]),
                                patch=ec["patch"], stride=ec["stride"])
        write_table_csv(rows, out_dir / "gate_rate.csv")
    else:
        raise ConfigError(f"unknown ablation kind {ac['kind']!r}")
    write_run_records(out_dir, "ablate", config)
    print(f"ablate {ac['kind']}: {len(rows)} rows -> {out_dir}")
    return 0


def cmd_bench(args, config, created):
    model, _ = load_model(resolve_checkpoint(args, args.out))
    test_sets = load_split(scenes_root(args, config), "test")
    scene, aset = test_sets[0]
    bc = config["bench"]
    out_dir = created.claim(Path(args.out) / "bench")
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = bench_inference(model, scene.image, aset,
                           batch_sizes=tuple(bc["batch_sizes"]),
                           patch=bc["patch"], stride=bc["stride"],
                           min_patches=bc["min_patches"])
    write_table_csv(rows, out_dir / "bench.csv")
    write_run_records(out_dir, "bench", config)
    for row in rows:
        print(f"bench: batch {row['batch_size']}: "
              f"{row['seconds_per_patch'] * 1000:.1f} ms/patch, "
              f"rss {row['peak_rss_bytes'] / 1e6:.0f} MB")
    return 0


def cmd_serve(args, config, created):
    import uvicorn

    from .server import create_app

    if not args.model:
        raise ConfigError("serve needs --model pointing at a checkpoint")
    if not args.scenes:
        raise ConfigError("serve needs --scenes pointing at a bundle directory")
    host, _, port = args.bind.partition(":")
    app = create_app(args.model, args.scenes,
                     patch=config["eval"]["patch"],
                     stride=config["eval"]["stride"],
                     ui_dir=args.ui)
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port or 8008),
                log_level=os.environ.get("SINF_LOG", "warning").lower())
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="sideseg",
        description="Semi-automatic segmentation: synthetic benchmark, "
                    "training, evaluation, and an annotation service.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry (dotted keys)")
        p.add_argument("--seed", type=int, help="override the top-level seed")
        p.add_argument("--out", required=needs_out, help="pipeline output directory")
        p.add_argument("--scenes", help="scene bundle root (default <out>/scenes)")
        p.add_argument("--model", help="checkpoint path")
        return p

    common(sub.add_parser("gen", help="generate synthetic scene bundles"))
    common(sub.add_parser("train", help="train a model on generated scenes"))
    common(sub.add_parser("eval", help="evaluate a checkpoint on the test split"))
    infer = common(sub.add_parser("infer", help="segment one scene bundle"))
    infer.add_argument("scene", help="scene bundle directory")
    common(sub.add_parser("ablate", help="run an ablation sweep"))
    common(sub.add_parser("bench", help="measure inference throughput"))
    serve = common(sub.add_parser("serve", help="run the annotation service"),
                   needs_out=False)
    serve.add_argument("--bind", default="127.0.0.1:8008", metavar="HOST:PORT")
    serve.add_argument("--ui", default="frontend/dist",
                       help="static UI directory to mount at /ui")
    return parser


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "ablate": cmd_ablate,
    "bench": cmd_bench,
    "serve": cmd_serve,
}


def main(argv=None):
    logging.basicConfig(
        level=os.environ.get("SINF_LOG", "WARNING").upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    created = CreatedPaths()
    try:
        config = load_config(args)
        return COMMANDS[args.command](args, config, created)
    except (ConfigError, CheckpointError, GradientError, OSError,
            json.JSONDecodeError) as exc:
        created.cleanup()
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
