"""Acceptance gate: one test per headline requirement, run with -v for a
pass/fail line each.

The three benchmark tests (side-information benefit, annotation-fraction
trend, gate-rate control) share one module fixture that generates the fixed
synthetic scenes and trains three models from scratch; expect several
minutes of CPU. Everything else finishes in seconds.
"""

import time

import numpy as np
import pytest
from conftest import tiny_config

from sideseg.annotations import Annotation, AnnotationSet, rasterize
from sideseg.diffusion import DiffusionOperator, EmbeddingLayer, diffuse, diffuse_backward
from sideseg.evalinfer import (ablate_side_fraction, compute_metrics, make_grid,
                               metrics_from_confusion, sliding_infer, spearman_rank)
from sideseg.model import GatedBlock, GatedSegModel, ModelConfig
from sideseg.nn import (Affine, BatchNorm2d, BilinearUpsample, Conv2d, MaxPool2d,
                        Param, ReLU, grad_check, softmax_cross_entropy)
from sideseg.nn.loss import softmax
from sideseg.synth import (extract_patches, generate_scene, kmeans_sample,
                           simulate_strokes)
from sideseg.train import TrainConfig, fit

# ---------------------------------------------------------------------------
# benchmark scale: 8 train / 2 val / 2 test scenes of 256x256 with 4 classes,
# two of which share a texture and are separable only through annotations
# ---------------------------------------------------------------------------

BENCH_SEED = 0
BENCH_HW = 256
BENCH_CLASSES = 4
BENCH_PATCH = 80
BENCH_STRIDE = 40
TIME_BUDGET_S = 30 * 60

# dense strokes make the first diffusion pass carry the signal; deeper passes
# compound the 3x3 ones kernel (x9 per pass), so they start at zero and move
# on a tiny learning rate, and n stays small
MODEL_KW = dict(num_classes=BENCH_CLASSES, side_channels_raw=BENCH_CLASSES,
                d=16, n=3, backbone_channels=32, num_gated_blocks=6,
                dilations=(1, 1, 2, 2, 4, 4), gate_temperature=1.0,
                diffusion_init="first_one_rest_zero", seed=0)
TRAIN_KW = dict(epochs=24, batch_size=16, base_lr=0.03, warmup_epochs=2,
                lr_embedding=1.0, lr_diffusion=0.001,
                early_stop_patience=0, seed=0, loss_weight=1000.0,
                target_rate=0.6, val_patch=BENCH_PATCH, val_stride=BENCH_STRIDE)


def bench_child_seed(*entropy):
    return int(np.random.SeedSequence(list(entropy)).generate_state(1)[0])


def build_scene_split(count, split_index):
    sets = []
    for i in range(count):
        scene = generate_scene(BENCH_HW, BENCH_HW, BENCH_CLASSES,
                               seed=bench_child_seed(BENCH_SEED, split_index, i),
                               n_cells=24)
        aset = simulate_strokes(scene, seed=bench_child_seed(BENCH_SEED, split_index, i, 7),
                                strokes_per_region=2, width=7.0)
        sets.append((scene, aset))
    return sets


def empty_annotations(shape):
    return AnnotationSet([], shape, BENCH_CLASSES)


def evaluate_on(model, scene_sets, with_side):
    confusion = None
    rates = []
    for scene, aset in scene_sets:
        use = aset if with_side else empty_annotations(scene.image.shape[:2])
        grid = make_grid(scene.image.shape[:2], BENCH_PATCH, BENCH_STRIDE)
        result = sliding_infer(scene.image, use, model, grid)
        report = compute_metrics(result.labels, scene.labels, BENCH_CLASSES)
        confusion = report.confusion if confusion is None else confusion + report.confusion
        rates.append(result.gate_rate)
    report = metrics_from_confusion(confusion)
    return report, float(np.mean(rates))


@pytest.fixture(scope="module")
def benchmark():
    """Scenes, patches, and three trained models: the full gated model, the
    same architecture without gating, and the gated architecture trained with
    every annotation channel blanked out (the zero-side baseline)."""
    wall_start = time.perf_counter()
    train_sets = build_scene_split(8, 0)
    val_sets = build_scene_split(2, 1)
    test_sets = build_scene_split(2, 2)

    patches = []
    for i, (scene, aset) in enumerate(train_sets):
        patches.extend(extract_patches(scene, aset, BENCH_PATCH, BENCH_STRIDE,
                                       augment=True,
                                       seed=bench_child_seed(BENCH_SEED, 57, i)))
    blank = [type(p)(image=p.image, labels=p.labels,
                     raw_side=np.zeros_like(p.raw_side),
                     annotations=empty_annotations(p.image.shape[:2]),
                     origin=p.origin)
             for p in patches]
    blank_val = [(s, empty_annotations(s.image.shape[:2])) for s, _ in val_sets]
    # annotation dropout: the side-consuming models also see half the crops
    # with the side channel blanked, so the image path trains on its own merit
    # and eval degrades gracefully toward the zero-side ceiling
    mixed = patches + blank[::2]

    out = {"test_sets": test_sets, "timings": {}}

    def train_one(name, target_rate, patch_list, val_list):
        t0 = time.perf_counter()
        model = GatedSegModel(ModelConfig(target_rate=target_rate, **MODEL_KW))
        fit(model, patch_list, val_list, TrainConfig(**TRAIN_KW))
        out["timings"][name] = time.perf_counter() - t0
        return model

    out["gated"] = train_one("gated", 0.6, mixed, val_sets)
    out["ungated"] = train_one("ungated", None, mixed, val_sets)
    out["zeroside"] = train_one("zeroside", 0.6, blank, blank_val)
    out["timings"]["setup_and_all_training"] = time.perf_counter() - wall_start
    return out


# ---------------------------------------------------------------------------
# independent oracles (no shared code with the library)
# ---------------------------------------------------------------------------

def box3_oracle(x):
    h, w, c = x.shape
    out = np.zeros_like(x)
    for i in range(h):
        for j in range(w):
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    r, q = i + di, j + dj
                    if 0 <= r < h and 0 <= q < w:
                        out[i, j] += x[r, q]
    return out


def diffuse_oracle(x, weights):
    acc = np.zeros_like(x)
    cur = x.copy()
    support = np.any(x != 0, axis=2).astype(x.dtype)[..., None]
    cov = np.zeros(x.shape[:2], dtype=np.int64)
    for w_i in weights:
        cur = box3_oracle(cur)
        support = box3_oracle(support)
        acc = acc + w_i * cur
        cov += (support[..., 0] > 0)
    return acc / np.maximum(cov, 1)[..., None]


def sliding_oracle(image, aset, model, grid):
    h, w = image.shape[:2]
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
    mean = np.zeros((h, w, model.config.num_classes))
    for r in range(h):
        for c in range(w):
            acc = np.zeros(model.config.num_classes)
            cnt = 0
            for orow, ocol, probs in tiles:
                if orow <= r < orow + p and ocol <= c < ocol + p:
                    acc = acc + probs[r - orow, c - ocol]
                    cnt += 1
            mean[r, c] = acc / cnt
    return mean.argmax(axis=2).astype(np.uint8), mean


# ---------------------------------------------------------------------------
# requirement 1: analytic gradients match central finite differences
# ---------------------------------------------------------------------------

def test_gradient_fidelity():
    started = time.perf_counter()
    rng = np.random.default_rng(11)
    worst = {}

    def layer_fidelity(tag, layer, x_shape, params, eps=1e-5, train=True):
        x = Param(rng.standard_normal(x_shape), name="x")
        probe = None

        def f():
            nonlocal probe
            for p in params:
                p.zero_grad()
            x.zero_grad()
            y, cache = layer.forward(x.value, train=train)
            if probe is None:
                probe = rng.standard_normal(y.shape)
            x.grad += layer.backward(probe, cache)
            return float((y * probe).sum())

        for p in params:
            worst[f"{tag}.{p.name}"] = grad_check(f, p, eps)
        worst[f"{tag}.input"] = grad_check(f, x, eps)

    # diffusion weights over a spread of pass counts, on 16x16 side maps
    for n in (1, 3, 5, 8):
        op = DiffusionOperator(n)
        op.cast(np.float64)
        x16 = rng.standard_normal((16, 16, 2))
        x16[rng.random((16, 16)) < 0.6] = 0.0
        probe = rng.standard_normal(x16.shape)

        def f_diff():
            op.weights.zero_grad()
            y, _ = diffuse(x16, op)
            diffuse_backward(probe, x16, op)
            return float((y * probe).sum())

        worst[f"diffusion.n{n}"] = grad_check(f_diff, op.weights, eps=1e-5)

    # embedding: shared affine + per-pixel unit rescale on a 16x16 map
    emb = EmbeddingLayer(3, 4, rng=np.random.default_rng(7))
    emb.cast(np.float64)
    xe = rng.standard_normal((16, 16, 3))
    xe[rng.random((16, 16)) < 0.7] = 0.0
    probe_e = rng.standard_normal((16, 16, 4))

    def f_emb():
        for p in emb.params():
            p.zero_grad()
        y, cache = emb.forward(xe, train=True)
        emb.backward(probe_e, cache)
        return float((y * probe_e).sum())

    worst["embedding.weight"] = grad_check(f_emb, emb.weight, eps=1e-4)
    worst["embedding.bias"] = grad_check(f_emb, emb.bias, eps=1e-4)

    # every tensor-core layer on 16x16 inputs
    conv = Conv2d(3, 4, 3, stride=1, padding=1, rng=np.random.default_rng(1))
    conv.cast(np.float64)
    layer_fidelity("conv", conv, (16, 16, 3), conv.params())

    convd = Conv2d(2, 2, 3, stride=2, padding=2, dilation=2, rng=np.random.default_rng(2))
    convd.cast(np.float64)
    layer_fidelity("conv_dilated", convd, (16, 16, 2), convd.params())

    bn = BatchNorm2d(3)
    bn.cast(np.float64)
    layer_fidelity("batchnorm", bn, (16, 16, 3), bn.params())

    aff = Affine(6, 5, rng=np.random.default_rng(3))
    aff.cast(np.float64)
    layer_fidelity("affine", aff, (16, 6), aff.params())

    layer_fidelity("relu", ReLU(), (16, 16, 3), [])
    layer_fidelity("maxpool", MaxPool2d(6, 4, padding=1), (16, 16, 2), [])
    up = BilinearUpsample(4)
    up.cast(np.float64)
    layer_fidelity("upsample", up, (4, 4, 2), [])

    # cross entropy: gradient with respect to the logits
    labels = rng.integers(0, 3, size=(8, 8)).astype(np.uint8)
    labels[0, :4] = 255
    xl = Param(rng.standard_normal((8, 8, 3)), name="logits")

    def f_ce():
        xl.zero_grad()
        out = softmax_cross_entropy(xl.value, labels)
        xl.grad += out.grad
        return float(out.loss)

    worst["cross_entropy.input"] = grad_check(f_ce, xl, eps=1e-5)

    elapsed = time.perf_counter() - started
    bad = {k: v for k, v in worst.items() if not v < 1e-3}
    assert not bad, f"gradient mismatches: {bad}"
    assert elapsed < 60.0, f"gradient suite took {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# requirement 2: diffusion equals the explicit multi-pass oracle
# ---------------------------------------------------------------------------

def test_diffusion_matches_oracle():
    rng = np.random.default_rng(23)
    for case in range(50):
        n = int(rng.integers(1, 9))
        h = int(rng.integers(3, 12))
        w = int(rng.integers(3, 12))
        c = int(rng.integers(1, 4))
        x = rng.standard_normal((h, w, c)).astype(np.float64)
        x[rng.random((h, w)) < 0.5] = 0.0
        op = DiffusionOperator(n)
        op.cast(np.float64)
        op.weights.value[:] = rng.standard_normal(n)
        got, _ = diffuse(x, op)
        want = diffuse_oracle(x, op.weights.value)
        assert np.max(np.abs(got - want)) <= 1e-6, f"case {case}"

    # worked example: unit source at (1,1) of a 4x4 map, two passes
    # weighted 1.0 and 0.5; both passes reach the source pixel, so its
    # value is (1*1 + 0.5*9) / 2 = 2.75
    x = np.zeros((4, 4, 1))
    x[1, 1, 0] = 1.0
    op = DiffusionOperator(2)
    op.weights.value[:] = [1.0, 0.5]
    out, _ = diffuse(x.astype(np.float32), op)
    assert out[1, 1, 0] == pytest.approx(2.75, abs=1e-6)
    assert np.max(np.abs(out[..., 0] - diffuse_oracle(x, [1.0, 0.5])[..., 0])) <= 1e-6


# ---------------------------------------------------------------------------
# requirement 3: a closed gate is a bitwise identity
# ---------------------------------------------------------------------------

def test_closed_gate_is_bitwise_identity():
    rng = np.random.default_rng(31)
    for trial in range(1000):
        channels = int(rng.integers(1, 9))
        h = int(rng.integers(2, 10))
        w = int(rng.integers(2, 10))
        block = GatedBlock(channels, dilation=int(rng.integers(1, 4)),
                           temperature=1.0, rng=rng)
        x = rng.standard_normal((h, w, channels)).astype(np.float32)
        y, z, _, _, _ = block.forward(x, train=False, override="off")
        assert z == 0
        assert y.tobytes() == x.tobytes(), f"trial {trial}"


# ---------------------------------------------------------------------------
# requirements 4-6: the synthetic benchmark
# ---------------------------------------------------------------------------

def test_side_information_benefit(benchmark):
    full, _ = evaluate_on(benchmark["gated"], benchmark["test_sets"], with_side=True)
    base, _ = evaluate_on(benchmark["zeroside"], benchmark["test_sets"], with_side=False)
    gain = (full.miou - base.miou) * 100.0
    spent = benchmark["timings"]["setup_and_all_training"]
    print(f"\n  full {full.miou:.4f} vs zero-side {base.miou:.4f} "
          f"-> +{gain:.2f} mIoU pts, wall {spent:.0f}s")
    assert gain >= 10.0, f"side information gain {gain:.2f} < 10 mIoU points"
    assert spent < TIME_BUDGET_S, f"training wall time {spent:.0f}s over budget"


def test_miou_tracks_annotation_fraction(benchmark):
    rows = ablate_side_fraction(benchmark["gated"], benchmark["test_sets"],
                                fractions=(0.0, 0.2, 0.4, 0.6, 0.8, 1.0),
                                seed=BENCH_SEED,
                                patch=BENCH_PATCH, stride=BENCH_STRIDE)
    rho = spearman_rank([r["fraction"] for r in rows], [r["miou"] for r in rows])
    trend = ", ".join(f"{r['fraction']:.1f}:{r['miou']:.3f}" for r in rows)
    print(f"\n  miou by fraction {trend} -> spearman {rho:.3f}")
    assert rho >= 0.9, f"spearman {rho:.3f} < 0.9"


def test_gate_rate_control(benchmark):
    gated_report, rate = evaluate_on(benchmark["gated"], benchmark["test_sets"],
                                     with_side=True)
    ungated_report, _ = evaluate_on(benchmark["ungated"], benchmark["test_sets"],
                                    with_side=True)
    gap = abs(gated_report.miou - ungated_report.miou) * 100.0
    print(f"\n  eval gate rate {rate:.3f}, gated {gated_report.miou:.4f} "
          f"vs ungated {ungated_report.miou:.4f} (gap {gap:.2f} pts)")
    assert 0.5 <= rate <= 0.7, f"eval gate rate {rate:.3f} outside [0.5, 0.7]"
    assert gap <= 3.0, f"gated model {gap:.2f} mIoU points from ungated"


# ---------------------------------------------------------------------------
# requirement 7: sliding inference equals the per-pixel brute force
# ---------------------------------------------------------------------------

def test_sliding_inference_matches_brute_force():
    rng = np.random.default_rng(47)
    model = GatedSegModel(tiny_config())
    for trial in range(20):
        h = int(rng.integers(10, 30))
        w = int(rng.integers(10, 30))
        patch = int(rng.integers(4, min(h, w) + 1))
        stride = int(rng.integers(1, patch + 1))
        image = rng.random((h, w, 3)).astype(np.float32)
        grid = make_grid((h, w), patch, stride)
        result = sliding_infer(image, None, model, grid)
        labels, mean = sliding_oracle(image, None, model, grid)
        assert result.labels.tobytes() == labels.tobytes(), f"trial {trial}"
        assert result.mean_softmax.tobytes() == mean.tobytes(), f"trial {trial}"


# ---------------------------------------------------------------------------
# requirement 8: annotation subsampling size contract
# ---------------------------------------------------------------------------

def test_kmeans_sample_size_contract():
    rng = np.random.default_rng(53)
    for n in range(1, 21):
        anns = []
        for k in range(n):
            pt = rng.integers(0, 60, size=2)
            anns.append(Annotation(kind="stroke", class_id=int(k % 3),
                                   points=np.array([pt, pt + 1], dtype=np.float64),
                                   width=3.0))
        aset = AnnotationSet(anns, (64, 64), 3)
        for pi in range(11):
            p = pi / 10.0
            want = int(np.ceil(n * p))
            first = kmeans_sample(aset, p, seed=900 + n)
            again = kmeans_sample(aset, p, seed=900 + n)
            assert len(first) == want, f"n={n} p={p}"
            assert [a.points.tolist() for a in first.annotations] == \
                   [a.points.tolist() for a in again.annotations], "determinism"
        full = kmeans_sample(aset, 1.0, seed=900 + n)
        assert [a.points.tolist() for a in full.annotations] == \
               [a.points.tolist() for a in aset.annotations]


# ---------------------------------------------------------------------------
# requirement 9: the whole pipeline is reproducible byte for byte
# ---------------------------------------------------------------------------

def test_pipeline_byte_determinism(tmp_path):
    from sideseg.cli import main

    mini = ["scenes.count_train=2", "scenes.count_val=1", "scenes.count_test=1",
            "scenes.height=64", "scenes.width=64", "scenes.num_classes=3",
            "scenes.min_region_area=48",
            "model.num_classes=3", "model.side_channels_raw=3", "model.d=4",
            "model.n=2", "model.backbone_channels=8", "model.num_gated_blocks=2",
            "model.dilations=[1,2]",
            "data.patch_size=32", "data.stride=32", "data.ignore_threshold=1.0",
            "train.epochs=2", "train.batch_size=8", "train.warmup_epochs=1",
            "train.base_lr=0.005", "train.val_patch=32", "train.val_stride=32",
            "eval.patch=32", "eval.stride=32"]

    def pipeline(out):
        for command in ("gen", "train", "eval"):
            args = [command, "--out", str(out), "--seed", "5"]
            for item in mini:
                args += ["--set", item]
            assert main(args) == 0, command

    pipeline(tmp_path / "a")
    pipeline(tmp_path / "b")
    for rel in ("train/history.jsonl", "eval/metrics.txt", "eval/metrics.jsonl"):
        a = (tmp_path / "a" / rel).read_bytes()
        b = (tmp_path / "b" / rel).read_bytes()
        assert a == b, f"{rel} differs between identical runs"


# ---------------------------------------------------------------------------
# requirement 10: checkpointed training resumes onto the same trajectory
# ---------------------------------------------------------------------------

def test_resume_matches_uninterrupted(tmp_path, toy_patches, toy_sets):
    config = TrainConfig(epochs=3, batch_size=8, base_lr=0.005, warmup_epochs=1,
                         early_stop_patience=0, seed=13,
                         val_patch=32, val_stride=32)
    patches = toy_patches
    val = [toy_sets[1]]

    straight = GatedSegModel(tiny_config())
    _, full_history = fit(straight, patches, val, config, out_dir=tmp_path / "full")

    paused = GatedSegModel(tiny_config())
    fit(paused, patches, val, config, out_dir=tmp_path / "paused", stop_after=1)
    resumed = GatedSegModel(tiny_config())
    _, tail = fit(resumed, patches, val, config, out_dir=tmp_path / "resumed",
                  resume=tmp_path / "paused" / "checkpoint.sinf")

    next_step = tail[0]
    reference = [h for h in full_history if h["epoch"] == next_step["epoch"]][0]
    assert abs(next_step["train_loss"] - reference["train_loss"]) <= 1e-6
