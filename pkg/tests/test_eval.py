"""Sliding-window inference, metrics, ablation tables, and result writers."""

import json

import numpy as np
import pytest
from conftest import tiny_config

from sideseg.annotations import AnnotationSet, rasterize
from sideseg.evalinfer import (
    ablate_side_fraction,
    bench_inference,
    compute_metrics,
    confusion_matrix,
    load_softmax,
    make_grid,
    metrics_from_confusion,
    save_labels_png,
    save_softmax,
    sliding_infer,
    spearman_rank,
    write_metrics,
    write_table_csv,
)
from sideseg.model import GatedSegModel
from sideseg.nn import ConfigError
from sideseg.nn.loss import softmax
from sideseg.synth import class_palette


def sliding_oracle(image, aset, model, grid):
    """Brute force: per pixel, average the softmax of every covering tile
    in raster order. Must match sliding_infer bitwise."""
    h, w = image.shape[:2]
    num_classes = model.config.num_classes
    if aset is not None and len(aset):
        raw_full = rasterize(aset)
    else:
        raw_full = np.zeros((h, w, model.config.side_channels_raw), dtype=np.float32)
    p = grid.patch
    tiles = []
    for orow, ocol in grid.origins:
        res = model.forward(image[orow:orow + p, ocol:ocol + p],
                            raw_side=raw_full[orow:orow + p, ocol:ocol + p],
                            mode="eval")
        tiles.append((orow, ocol, softmax(res.logits.astype(np.float64))))
    mean = np.zeros((h, w, num_classes))
    counts = np.zeros((h, w), dtype=np.int32)
    for r in range(h):
        for c in range(w):
            acc = np.zeros(num_classes)
            cnt = 0
            for orow, ocol, probs in tiles:
                if orow <= r < orow + p and ocol <= c < ocol + p:
                    acc = acc + probs[r - orow, c - ocol]
                    cnt += 1
            mean[r, c] = acc / cnt
            counts[r, c] = cnt
    return mean.argmax(axis=2).astype(np.uint8), mean, counts


class TestMakeGrid:
    def test_raster_order_with_clamp(self):
        grid = make_grid((100, 100), 33, 17)
        rows = sorted({r for r, _ in grid.origins})
        assert rows == [0, 17, 34, 51, 67]
        assert grid.origins == [(r, c) for r in rows for c in rows]

    def test_tile_too_large(self):
        with pytest.raises(ConfigError):
            make_grid((64, 64), 65, 32)

    def test_bad_stride(self):
        with pytest.raises(ConfigError):
            make_grid((64, 64), 32, 0)


class TestSlidingInfer:
    @pytest.mark.parametrize("size,patch,stride", [
        ((64, 64), 32, 16),
        ((64, 80), 32, 24),
        ((96, 64), 48, 32),
    ])
    def test_matches_brute_force_oracle(self, toy_sets, size, patch, stride):
        scene, aset = toy_sets[0]
        rng = np.random.default_rng(hash((size, patch)) % 2 ** 32)
        image = rng.random((*size, 3)).astype(np.float32)
        model = GatedSegModel(tiny_config())
        grid = make_grid(size, patch, stride)
        sub = aset.subset(range(min(3, len(aset)))) if size == (64, 64) else None
        got = sliding_infer(image, sub, model, grid)
        want_labels, want_mean, want_counts = sliding_oracle(image, sub, model, grid)
        assert np.array_equal(got.labels, want_labels)
        assert np.array_equal(got.mean_softmax, want_mean)  # bitwise
        assert np.array_equal(got.coverage_counts, want_counts)

    def test_no_overlap_equals_per_tile_argmax(self, tiny_model):
        image = np.random.default_rng(0).random((64, 64, 3)).astype(np.float32)
        grid = make_grid((64, 64), 32, 32)
        got = sliding_infer(image, None, tiny_model, grid)
        for orow, ocol in grid.origins:
            res = tiny_model.forward(image[orow:orow + 32, ocol:ocol + 32],
                                     mode="eval")
            tile_labels = res.logits.argmax(axis=2)
            assert np.array_equal(got.labels[orow:orow + 32, ocol:ocol + 32],
                                  tile_labels)
        assert np.all(got.coverage_counts == 1)

    def test_constant_logits_break_ties_to_class_zero(self, tiny_model):
        tiny_model.head.weight.value[...] = 0.0
        tiny_model.head.bias.value[...] = 0.0
        image = np.random.default_rng(1).random((64, 64, 3)).astype(np.float32)
        got = sliding_infer(image, None, tiny_model, make_grid((64, 64), 32, 16))
        assert np.all(got.labels == 0)
        assert np.allclose(got.mean_softmax, 1.0 / 3.0)

    def test_rows_sum_to_one(self, tiny_model):
        image = np.random.default_rng(2).random((64, 64, 3)).astype(np.float32)
        got = sliding_infer(image, None, tiny_model, make_grid((64, 64), 32, 16))
        assert np.abs(got.mean_softmax.sum(axis=2) - 1.0).max() < 1e-9

    def test_gate_rate_bounds_and_ungated(self):
        image = np.random.default_rng(3).random((64, 64, 3)).astype(np.float32)
        gated = GatedSegModel(tiny_config())
        got = sliding_infer(image, None, gated, make_grid((64, 64), 32, 32))
        assert 0.0 <= got.gate_rate <= 1.0
        free = GatedSegModel(tiny_config(target_rate=None))
        got = sliding_infer(image, None, free, make_grid((64, 64), 32, 32))
        assert got.gate_rate == 1.0

    def test_none_equals_empty_annotations(self, tiny_model):
        image = np.random.default_rng(4).random((64, 64, 3)).astype(np.float32)
        grid = make_grid((64, 64), 32, 16)
        empty = AnnotationSet([], (64, 64), 3)
        a = sliding_infer(image, None, tiny_model, grid)
        b = sliding_infer(image, empty, tiny_model, grid)
        assert np.array_equal(a.mean_softmax, b.mean_softmax)


def confusion_oracle(pred, gt, num_classes, ignore=255):
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    for g, p in zip(gt.ravel(), pred.ravel()):
        if g != ignore:
            conf[g, p] += 1
    return conf


class TestMetrics:
    def test_hand_worked_two_by_two(self):
        gt = np.array([[0, 0], [1, 1]], dtype=np.uint8)
        pred = np.zeros((2, 2), dtype=np.uint8)
        report = compute_metrics(pred, gt, num_classes=2)
        assert report.pixel_accuracy == pytest.approx(0.5)
        assert report.per_class_iou[0] == pytest.approx(0.5)
        assert report.per_class_iou[1] == pytest.approx(0.0)
        assert report.miou == pytest.approx(0.25)
        assert report.valid

    def test_perfect_prediction(self):
        gt = np.random.default_rng(0).integers(0, 3, size=(10, 10)).astype(np.uint8)
        report = compute_metrics(gt, gt, num_classes=3)
        assert report.pixel_accuracy == 1.0
        assert report.miou == 1.0

    def test_all_ignore_flagged_not_nan(self):
        gt = np.full((4, 4), 255, dtype=np.uint8)
        report = compute_metrics(np.zeros((4, 4), np.uint8), gt, num_classes=3)
        assert not report.valid
        assert report.miou == 0.0 and report.pixel_accuracy == 0.0
        assert np.isfinite(report.per_class_iou).all()

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            compute_metrics(np.zeros((2, 2)), np.zeros((2, 3)), 2)

    def test_confusion_against_loop_oracle(self):
        rng = np.random.default_rng(5)
        gt = rng.integers(0, 4, size=(20, 20)).astype(np.uint8)
        gt[rng.random((20, 20)) < 0.1] = 255
        pred = rng.integers(0, 4, size=(20, 20)).astype(np.uint8)
        conf = confusion_matrix(pred, gt, 4)
        assert np.array_equal(conf, confusion_oracle(pred, gt, 4))
        assert conf.sum() == int((gt != 255).sum())
        gt_counts = np.array([(gt == c).sum() for c in range(4)])
        assert np.array_equal(conf.sum(axis=1), gt_counts)

    def test_exclusion_list(self):
        gt = np.array([[0, 0], [1, 1]], dtype=np.uint8)
        pred = np.zeros((2, 2), dtype=np.uint8)
        report = compute_metrics(pred, gt, num_classes=2, exclude=(1,))
        assert report.miou == pytest.approx(0.5)  # only class 0 evaluated
        assert not report.class_evaluated[1]

    def test_absent_class_not_evaluated(self):
        gt = np.zeros((4, 4), dtype=np.uint8)
        report = compute_metrics(gt, gt, num_classes=3)
        assert report.class_evaluated.tolist() == [True, False, False]
        assert report.miou == 1.0


class TestSpearman:
    def test_perfect_monotone(self):
        assert spearman_rank([0, 0.2, 0.4, 0.6], [1, 2, 3, 4]) == pytest.approx(1.0)
        assert spearman_rank([0, 0.2, 0.4, 0.6], [4, 3, 2, 1]) == pytest.approx(-1.0)

    def test_one_adjacent_swap_of_six(self):
        rho = spearman_rank([1, 2, 3, 4, 5, 6], [1, 2, 3, 5, 4, 6])
        assert rho == pytest.approx(1.0 - 6.0 * 2.0 / (6 * 35))  # 0.9428...
        assert rho > 0.9

    def test_ties_averaged(self):
        assert spearman_rank([1, 1, 2], [5, 5, 9]) == pytest.approx(1.0)


class TestAblateSideFraction:
    def test_limit_rows_match_direct_evaluation(self, toy_sets, tiny_model):
        scene, aset = toy_sets[0]
        rows = ablate_side_fraction(tiny_model, [(scene, aset)],
                                    fractions=(0.0, 1.0), seed=1,
                                    patch=32, stride=32)
        assert [r["fraction"] for r in rows] == [0.0, 1.0]
        grid = make_grid(scene.shape, 32, 32)
        for fraction, sub in ((0.0, None), (1.0, aset)):
            direct = sliding_infer(scene.image, sub, tiny_model, grid)
            report = compute_metrics(direct.labels, scene.labels, 3)
            row = next(r for r in rows if r["fraction"] == fraction)
            assert row["miou"] == pytest.approx(report.miou)
            assert row["pixel_accuracy"] == pytest.approx(report.pixel_accuracy)

    def test_deterministic(self, toy_sets, tiny_model):
        a = ablate_side_fraction(tiny_model, toy_sets, fractions=(0.4,),
                                 seed=9, patch=32, stride=32)
        b = ablate_side_fraction(tiny_model, toy_sets, fractions=(0.4,),
                                 seed=9, patch=32, stride=32)
        assert a == b


class TestBench:
    def test_structure(self, toy_sets, tiny_model):
        scene, aset = toy_sets[0]
        rows = bench_inference(tiny_model, scene.image, aset,
                               batch_sizes=(1, 8), patch=32, stride=32,
                               min_patches=50, warmup=2)
        assert [r["batch_size"] for r in rows] == [1, 8]
        for row in rows:
            assert row["patches"] >= 50
            assert row["seconds_per_patch"] > 0
            assert row["peak_rss_bytes"] > 0


class TestWriters:
    def test_labels_png_round_trip(self, tmp_path):
        from PIL import Image

        labels = np.random.default_rng(0).integers(0, 4, (16, 16)).astype(np.uint8)
        save_labels_png(labels, tmp_path / "plain.png")
        assert np.array_equal(np.asarray(Image.open(tmp_path / "plain.png")), labels)
        save_labels_png(labels, tmp_path / "pal.png", palette=class_palette(4))
        img = Image.open(tmp_path / "pal.png")
        assert img.mode == "P"
        assert np.array_equal(np.asarray(img), labels)

    def test_softmax_round_trip(self, tmp_path):
        arr = np.random.default_rng(1).random((8, 9, 3)).astype(np.float32)
        save_softmax(arr, tmp_path / "p.ssmx")
        assert np.array_equal(load_softmax(tmp_path / "p.ssmx"), arr)

    def test_softmax_bad_magic_and_truncation(self, tmp_path):
        (tmp_path / "bad").write_bytes(b"NOPE" + b"\0" * 20)
        with pytest.raises(ConfigError):
            load_softmax(tmp_path / "bad")
        arr = np.zeros((4, 4, 2), dtype=np.float32)
        save_softmax(arr, tmp_path / "t.ssmx")
        blob = (tmp_path / "t.ssmx").read_bytes()
        (tmp_path / "t.ssmx").write_bytes(blob[:-8])
        with pytest.raises(ConfigError):
            load_softmax(tmp_path / "t.ssmx")

    def test_metrics_files(self, tmp_path):
        report = metrics_from_confusion(np.array([[5, 1], [2, 4]]))
        write_metrics(report, tmp_path / "m.txt", tmp_path / "m.jsonl",
                      extra={"scene": "s0"})
        text = (tmp_path / "m.txt").read_text()
        assert "miou:" in text and "pixel_accuracy:" in text
        record = json.loads((tmp_path / "m.jsonl").read_text())
        assert record["scene"] == "s0"
        assert record["confusion"] == [[5, 1], [2, 4]]
        write_metrics(report, tmp_path / "m2.txt", extra={"scene": "s0"})
        assert (tmp_path / "m.txt").read_bytes() == (tmp_path / "m2.txt").read_bytes()

    def test_csv(self, tmp_path):
        rows = [{"fraction": 0.5, "miou": 0.25}, {"fraction": 1.0, "miou": 0.5}]
        write_table_csv(rows, tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().strip().splitlines()
        assert lines[0] == "fraction,miou"
        assert lines[1] == "0.5,0.25"
        with pytest.raises(ConfigError):
            write_table_csv([], tmp_path / "e.csv")
