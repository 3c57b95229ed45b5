"""Whole-scene inference, segmentation metrics, ablations, and benchmarks.

Scenes larger than the training crop are segmented by a sliding window:
per-tile softmax maps are accumulated in raster order into per-pixel sums
and counts, averaged, then decided by argmax (lowest class index on ties).
The accumulation order is fixed so results are bitwise reproducible.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from .annotations import AnnotationSet, rasterize
from .nn import ConfigError
from .nn.loss import softmax
from .synth import kmeans_sample, tile_origins

IGNORE = 255


# ---------------------------------------------------------------------------
# sliding-window inference
# ---------------------------------------------------------------------------

@dataclass
class TileGrid:
    patch: int
    stride: int
    origins: list  # [(row, col)] in raster order


def make_grid(shape, patch, stride) -> TileGrid:
    h, w = shape
    if patch > h or patch > w:
        raise ConfigError(f"tile {patch} larger than scene {h}x{w}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    origins = [(r, c) for r in tile_origins(h, patch, stride)
               for c in tile_origins(w, patch, stride)]
    return TileGrid(patch=patch, stride=stride, origins=origins)


@dataclass
class SegmentationResult:
    labels: np.ndarray          # (h, w) uint8
    mean_softmax: np.ndarray    # (h, w, C) float64, rows sum to 1
    coverage_counts: np.ndarray  # (h, w) int32 tiles per pixel
    gate_rate: float            # mean executed-block fraction over tiles


def sliding_infer(image, annotations, model, grid: TileGrid) -> SegmentationResult:
    """Segment a full scene by averaging overlapping tile softmaxes."""
    h, w = image.shape[:2]
    num_classes = model.config.num_classes
    if annotations is not None and len(annotations):
        raw_full = rasterize(annotations)
    else:
        raw_full = np.zeros((h, w, model.config.side_channels_raw), dtype=np.float32)
    sums = np.zeros((h, w, num_classes), dtype=np.float64)
    counts = np.zeros((h, w), dtype=np.int32)
    rates = []
    p = grid.patch
    for orow, ocol in grid.origins:
        crop = image[orow:orow + p, ocol:ocol + p]
        raw = raw_full[orow:orow + p, ocol:ocol + p]
        result = model.forward(crop, raw_side=raw, mode="eval")
        probs = softmax(result.logits.astype(np.float64))
        sums[orow:orow + p, ocol:ocol + p] += probs
        counts[orow:orow + p, ocol:ocol + p] += 1
        rates.append(result.trace.executed_fraction)
    mean = sums / counts[..., None]
    labels = mean.argmax(axis=2).astype(np.uint8)
    return SegmentationResult(labels=labels, mean_softmax=mean,
                              coverage_counts=counts,
                              gate_rate=float(np.mean(rates)))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    confusion: np.ndarray        # (C, C) int64, rows = ground truth
    pixel_accuracy: float
    per_class_iou: np.ndarray    # (C,) float64, 0 where not evaluated
    class_evaluated: np.ndarray  # (C,) bool: class present and not excluded
    miou: float
    valid: bool                  # False when every pixel was ignored

    def to_dict(self):
        return {
            "pixel_accuracy": self.pixel_accuracy,
            "miou": self.miou,
            "per_class_iou": [float(v) for v in self.per_class_iou],
            "class_evaluated": [bool(v) for v in self.class_evaluated],
            "valid": self.valid,
            "confusion": self.confusion.tolist(),
        }


def metrics_from_confusion(confusion, exclude=()) -> MetricsReport:
    confusion = np.asarray(confusion, dtype=np.int64)
    num_classes = confusion.shape[0]
    total = int(confusion.sum())
    if total == 0:
        return MetricsReport(confusion=confusion, pixel_accuracy=0.0,
                             per_class_iou=np.zeros(num_classes),
                             class_evaluated=np.zeros(num_classes, dtype=bool),
                             miou=0.0, valid=False)
    diag = np.diag(confusion).astype(np.float64)
    gt_counts = confusion.sum(axis=1).astype(np.float64)
    pred_counts = confusion.sum(axis=0).astype(np.float64)
    union = gt_counts + pred_counts - diag
    iou = np.zeros(num_classes)
    np.divide(diag, union, out=iou, where=union > 0)
    evaluated = (gt_counts + pred_counts) > 0
    for c in exclude:
        evaluated[c] = False
    miou = float(iou[evaluated].mean()) if evaluated.any() else 0.0
    return MetricsReport(confusion=confusion,
                         pixel_accuracy=float(diag.sum() / total),
                         per_class_iou=iou, class_evaluated=evaluated,
                         miou=miou, valid=True)


def confusion_matrix(pred, gt, num_classes, ignore_index=IGNORE):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ConfigError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    mask = gt != ignore_index
    idx = gt[mask].astype(np.int64) * num_classes + pred[mask].astype(np.int64)
    counts = np.bincount(idx, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def compute_metrics(pred, gt, num_classes, ignore_index=IGNORE, exclude=()) -> MetricsReport:
    return metrics_from_confusion(
        confusion_matrix(pred, gt, num_classes, ignore_index), exclude)


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

def _child_seed(seed, index):
    return int(np.random.SeedSequence(entropy=(seed, index)).generate_state(1)[0])


def ablate_side_fraction(model, scene_sets, fractions=(0.0, 0.2, 0.4, 0.6, 0.8, 1.0),
                         seed=0, patch=80, stride=40, exclude=()):
    """Row per fraction: subsample annotations, segment every scene, report
    metrics on the aggregated confusion matrix."""
    rows = []
    num_classes = model.config.num_classes
    for fi, fraction in enumerate(fractions):
        confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
        rates = []
        for si, (scene, aset) in enumerate(scene_sets):
            sub = kmeans_sample(aset, fraction, seed=_child_seed(seed, fi * 1000 + si))
            grid = make_grid(scene.shape, patch, stride)
            result = sliding_infer(scene.image, sub, model, grid)
            confusion += confusion_matrix(result.labels, scene.labels, num_classes)
            rates.append(result.gate_rate)
        report = metrics_from_confusion(confusion, exclude)
        rows.append({"fraction": float(fraction),
                     "pixel_accuracy": report.pixel_accuracy,
                     "miou": report.miou,
                     "gate_rate": float(np.mean(rates))})
    return rows


def ablate_gate_rate(train_patches, val_scene_sets, model_config, train_config,
                     rates=(0.4, 0.6, 0.8), patch=80, stride=40):
    """Train one model per gate target rate and measure the realized rate."""
    from dataclasses import replace

    from .model import GatedSegModel
    from .train import fit

    rows = []
    for t in rates:
        mc = replace(model_config, target_rate=float(t))
        tc = replace(train_config, target_rate=float(t))
        model = GatedSegModel(mc)
        fit(model, train_patches, val_scene_sets, tc)
        confusion = np.zeros((mc.num_classes, mc.num_classes), dtype=np.int64)
        realized = []
        for scene, aset in val_scene_sets:
            grid = make_grid(scene.shape, patch, stride)
            result = sliding_infer(scene.image, aset, model, grid)
            confusion += confusion_matrix(result.labels, scene.labels, mc.num_classes)
            realized.append(result.gate_rate)
        report = metrics_from_confusion(confusion)
        rows.append({"target_rate": float(t),
                     "realized_rate": float(np.mean(realized)),
                     "miou": report.miou,
                     "pixel_accuracy": report.pixel_accuracy})
    return rows


def spearman_rank(xs, ys):
    """Spearman rank correlation; average ranks on ties."""
    def ranks(v):
        v = np.asarray(v, dtype=np.float64)
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        r[order] = np.arange(1, len(v) + 1, dtype=np.float64)
        for val in np.unique(v):
            sel = v == val
            if sel.sum() > 1:
                r[sel] = r[sel].mean()
        return r
    rx, ry = ranks(xs), ranks(ys)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx ** 2).sum() * (ry ** 2).sum())
    if denom == 0:
        return 0.0
    return float((rx * ry).sum() / denom)


# ---------------------------------------------------------------------------
# throughput benchmark
# ---------------------------------------------------------------------------

def bench_inference(model, image, annotations=None, batch_sizes=(1, 16),
                    patch=80, stride=40, min_patches=50, warmup=3):
    """Wall-clock seconds per tile and peak resident set size, per batch size."""
    import psutil

    h, w = image.shape[:2]
    if annotations is not None and len(annotations):
        raw_full = rasterize(annotations)
    else:
        raw_full = np.zeros((h, w, model.config.side_channels_raw), dtype=np.float32)
    grid = make_grid((h, w), patch, stride)
    crops = []
    i = 0
    while len(crops) < max(min_patches, warmup + 1):
        orow, ocol = grid.origins[i % len(grid.origins)]
        crops.append((image[orow:orow + patch, ocol:ocol + patch],
                      raw_full[orow:orow + patch, ocol:ocol + patch]))
        i += 1
    proc = psutil.Process()
    rows = []
    for bs in batch_sizes:
        for crop, raw in crops[:warmup]:
            model.forward(crop, raw_side=raw, mode="eval")
        peak_rss = proc.memory_info().rss
        start = time.perf_counter()
        done = 0
        while done < len(crops):
            for crop, raw in crops[done:done + bs]:
                model.forward(crop, raw_side=raw, mode="eval")
            done += bs
            peak_rss = max(peak_rss, proc.memory_info().rss)
        elapsed = time.perf_counter() - start
        rows.append({"batch_size": int(bs),
                     "patches": len(crops),
                     "seconds_per_patch": elapsed / len(crops),
                     "peak_rss_bytes": int(peak_rss)})
    return rows


# ---------------------------------------------------------------------------
# result writers
# ---------------------------------------------------------------------------

SOFTMAX_MAGIC = b"SSMX"


def save_labels_png(labels, path, palette=None):
    """8-bit class raster; with a palette the PNG renders in legend colors.

    ``path`` may be a filesystem path or any binary file object.
    """
    from PIL import Image

    img = Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="P" if palette else "L")
    if palette:
        table = [0] * 768
        for idx, (r, g, b) in enumerate(palette):
            table[3 * idx:3 * idx + 3] = [r, g, b]
        table[3 * IGNORE:3 * IGNORE + 3] = [64, 64, 64]
        img.putpalette(table)
    if hasattr(path, "write"):
        img.save(path, format="PNG")
    else:
        img.save(path)


def save_softmax(arr, path):
    import struct

    arr = np.ascontiguousarray(arr, dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(SOFTMAX_MAGIC)
        fh.write(struct.pack("<III", *arr.shape))
        fh.write(arr.tobytes())


def load_softmax(path):
    import struct

    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SOFTMAX_MAGIC:
            raise ConfigError(f"not a softmax dump: magic {magic!r}")
        h, w, c = struct.unpack("<III", fh.read(12))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != h * w * c:
        raise ConfigError("softmax dump truncated")
    return data.reshape(h, w, c).copy()


def format_value(v):
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def write_metrics(report: MetricsReport, txt_path, jsonl_path=None, extra=None):
    """Human-readable key: value lines plus one machine-readable record."""
    record = report.to_dict()
    if extra:
        record.update(extra)
    with open(txt_path, "w") as fh:
        for key in sorted(record):
            value = record[key]
            if isinstance(value, list):
                flat = ",".join(format_value(x) for x in value) if value and \
                    not isinstance(value[0], list) else json.dumps(value)
                fh.write(f"{key}: {flat}\n")
            else:
                fh.write(f"{key}: {format_value(value)}\n")
    if jsonl_path is not None:
        with open(jsonl_path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def write_table_csv(rows, path):
    import csv

    if not rows:
        raise ConfigError("no rows to write")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: format_value(v) for k, v in row.items()})
