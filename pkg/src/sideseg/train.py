"""Training loop: grouped learning rates, warmup plus polynomial decay,
composite loss with the gate-rate penalty, gradient accumulation,
checkpointing with exact resume, and early stopping on validation mIoU.

The embedding layer trains much faster than the backbone and the fusion
convolution slightly faster, expressed as per-group multipliers on one base
rate. The schedule is base * group * min(epoch/warmup, 1) * (1 - i/I)^p
with epochs counted from 1 and i the global optimizer-step index out of a
fixed total I = epochs * steps_per_epoch.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .evalinfer import confusion_matrix, make_grid, metrics_from_confusion, sliding_infer
from .nn import ConfigError, GradientError
from .nn.loss import softmax_cross_entropy
from .nn.optim import sgd_step


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 16
    base_lr: float = 0.02
    lr_embedding: float = 100.0   # side-feature embedding learns fastest
    lr_fusion: float = 2.0        # fusion convolution slightly faster
    # the gradient of pass i scales like 9^i (repeated 3x3 ones kernels), so
    # the diffusion scalars get their own multiplier; keep it small whenever
    # n is large or the side maps are dense
    lr_diffusion: float = 1.0
    momentum: float = 0.9
    poly_power: float = 0.9
    warmup_epochs: int = 20
    grad_accum_steps: int = 1
    target_rate: float = 0.6
    loss_weight: float = 1.0      # weight on the gate-rate penalty
    per_gate_rate: bool = False   # penalize each block's mean separately
    early_stop_patience: int = 3  # epochs without improvement; 0 disables
    early_stop_metric: str = "miou"
    seed: int = 0
    diffusion_scalar_init: str | None = None
    divergence_threshold: float = 1e6
    val_patch: int = 80
    val_stride: int = 40

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1 or self.grad_accum_steps < 1:
            raise ConfigError("batch_size and grad_accum_steps must be >= 1")
        for name in ("base_lr", "lr_embedding", "lr_fusion", "lr_diffusion"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.warmup_epochs < 1:
            raise ConfigError("warmup_epochs must be >= 1")
        if self.epochs > 0 and self.warmup_epochs > self.epochs:
            raise ConfigError(f"warmup_epochs {self.warmup_epochs} exceeds "
                              f"epochs {self.epochs}")
        if self.early_stop_metric not in ("miou", "pixel_accuracy"):
            raise ConfigError(f"unknown early-stop metric {self.early_stop_metric!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")

    def to_dict(self):
        return asdict(self)


def lr_at(config: TrainConfig, epoch: int, step: int, max_steps: int):
    """Per-group learning rates at 1-based epoch and global step index."""
    if step > max_steps:
        raise ConfigError(f"step {step} beyond schedule end {max_steps}")
    warm = min(epoch / config.warmup_epochs, 1.0)
    decay = (1.0 - step / max_steps) ** config.poly_power
    base = config.base_lr * warm * decay
    return {"base": base,
            "embedding": base * config.lr_embedding,
            "fusion": base * config.lr_fusion,
            "diffusion": base * config.lr_diffusion}


def composite_loss(logits, labels, trace, target_rate, loss_weight):
    """Cross entropy plus the gate-rate penalty for one sample."""
    ce = softmax_cross_entropy(logits, labels)
    rate_loss = 0.0
    if target_rate is not None and trace is not None and trace.soft.size:
        rate_loss = loss_weight * float(trace.soft.mean() - target_rate) ** 2
    parts = {"ce": ce.loss, "rate": rate_loss}
    return ce.loss + rate_loss, parts


@dataclass
class _RunState:
    epoch: int = 0        # last completed epoch
    global_step: int = 0  # optimizer steps taken
    best_metric: float = -math.inf
    bad_epochs: int = 0
    history: list = field(default_factory=list)


def _micro_batch_pass(model, batch, scale, rate_cfg, rng):
    """Forward/backward one micro-batch; returns (ce_mean, rate_loss, soft).

    All per-sample tapes stay alive until every backward ran because the
    rate penalty couples the gates across the batch.
    """
    gated, target_rate, loss_weight, per_gate = rate_cfg
    passes = []
    ce_sum = 0.0
    for patch in batch:
        res = model.forward(patch.image, raw_side=patch.raw_side,
                            mode="train", rng=rng)
        ce = softmax_cross_entropy(res.logits, patch.labels)
        ce_sum += ce.loss
        passes.append((res, ce))
    b = len(batch)
    rate_loss = 0.0
    soft_grads = None
    if gated:
        soft = np.stack([res.trace.soft for res, _ in passes])  # (b, L)
        L = soft.shape[1]
        if per_gate:
            mean_per_block = soft.mean(axis=0)
            rate_loss = loss_weight * float(
                ((mean_per_block - target_rate) ** 2).mean())
            soft_grads = loss_weight * 2.0 * (mean_per_block - target_rate) / (L * b)
        else:
            mean = float(soft.mean())
            rate_loss = loss_weight * (mean - target_rate) ** 2
            soft_grads = np.full(L, loss_weight * 2.0 * (mean - target_rate) / (L * b))
    for res, ce in passes:
        model.backward(ce.grad * (scale / b), res.tape,
                       None if soft_grads is None else soft_grads * scale)
    return ce_sum / b, rate_loss, soft_grads


def _optimizer_step(model, lrs, momentum):
    groups = model.param_groups()
    for params in groups.values():  # abort before moving anything
        for p in params:
            if not np.all(np.isfinite(p.grad)):
                raise GradientError(f"non-finite gradient in {p.name}")
    for name, params in groups.items():
        sgd_step(params, lrs[name], momentum)


def _validate(model, val_scene_sets, config):
    num_classes = model.config.num_classes
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    rates = []
    for scene, aset in val_scene_sets:
        grid = make_grid(scene.shape, config.val_patch, config.val_stride)
        result = sliding_infer(scene.image, aset, model, grid)
        confusion += confusion_matrix(result.labels, scene.labels, num_classes)
        rates.append(result.gate_rate)
    report = metrics_from_confusion(confusion)
    return {"val_miou": report.miou,
            "val_pixel_accuracy": report.pixel_accuracy,
            "val_gate_rate": float(np.mean(rates))}


def fit(model, train_patches, val_scene_sets, config: TrainConfig,
        out_dir=None, resume=None, stop_after=None):
    """Train in place; returns (model, history).

    ``out_dir`` receives history.jsonl plus checkpoint.sinf after every
    epoch and best.sinf whenever validation improves. ``resume`` restores
    weights, momentum, and the gate-noise stream from a checkpoint so the
    continued run matches an uninterrupted one step for step. ``stop_after``
    pauses once that many epochs completed (the checkpoint then resumes
    under the original schedule; the decay clock keeps counting config.epochs).
    """
    if not train_patches:
        raise ConfigError("training set is empty")
    if config.diffusion_scalar_init is not None:
        model.diffusion.reinit(config.diffusion_scalar_init)

    n = len(train_patches)
    batches_per_epoch = math.ceil(n / config.batch_size)
    steps_per_epoch = math.ceil(batches_per_epoch / config.grad_accum_steps)
    max_steps = config.epochs * steps_per_epoch

    rng = np.random.default_rng(np.random.SeedSequence(entropy=(config.seed, 977)))
    state = _RunState()
    if resume is not None:
        with open(resume, "rb") as fh:
            header, records = ckpt.deserialize(fh.read())
        want = ckpt.config_hash(model.config.to_dict())
        if header["config_hash"] != want:
            raise ckpt.CheckpointHashError(
                "resume checkpoint does not match the model configuration")
        ckpt.restore_model(model, header, records)
        extra = header["extra"]
        state.epoch = int(extra["epoch"])
        state.global_step = int(extra["global_step"])
        state.best_metric = float(extra["best_metric"])
        state.bad_epochs = int(extra["bad_epochs"])
        rng.bit_generator.state = json.loads(extra["rng_state"])

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume is None:
            (out / "history.jsonl").write_text("")

    gated = model.config.target_rate is not None
    rate_cfg = (gated, config.target_rate, config.loss_weight, config.per_gate_rate)

    for epoch in range(state.epoch + 1, config.epochs + 1):
        order = np.random.default_rng(
            np.random.SeedSequence(entropy=(config.seed, epoch))).permutation(n)
        batches = [order[i:i + config.batch_size]
                   for i in range(0, n, config.batch_size)]
        epoch_ce, epoch_rate, n_micro = 0.0, 0.0, 0
        last_lrs = None
        for start in range(0, len(batches), config.grad_accum_steps):
            group = batches[start:start + config.grad_accum_steps]
            model.zero_grads()
            step_loss = 0.0
            for idx_batch in group:
                batch = [train_patches[i] for i in idx_batch]
                ce_mean, rate_loss, _ = _micro_batch_pass(
                    model, batch, 1.0 / len(group), rate_cfg, rng)
                step_loss += (ce_mean + rate_loss) / len(group)
                epoch_ce += ce_mean
                epoch_rate += rate_loss
                n_micro += 1
            if not math.isfinite(step_loss) or step_loss > config.divergence_threshold:
                raise GradientError(
                    f"training diverged at epoch {epoch} step {state.global_step}: "
                    f"loss {step_loss}")
            last_lrs = lr_at(config, epoch, state.global_step, max_steps)
            _optimizer_step(model, last_lrs, config.momentum)
            state.global_step += 1

        record = {"epoch": epoch,
                  "train_ce": epoch_ce / n_micro,
                  "train_rate": epoch_rate / n_micro,
                  "train_loss": (epoch_ce + epoch_rate) / n_micro,
                  "lr_base": last_lrs["base"]}
        if val_scene_sets:
            record.update(_validate(model, val_scene_sets, config))
        state.epoch = epoch

        improved = False
        if val_scene_sets:
            metric = record["val_" + config.early_stop_metric]
            if metric > state.best_metric + 1e-9:
                state.best_metric = metric
                state.bad_epochs = 0
                improved = True
            else:
                state.bad_epochs += 1
        state.history.append(record)

        if out is not None:
            with open(out / "history.jsonl", "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            extra = {"epoch": state.epoch,
                     "global_step": state.global_step,
                     "best_metric": state.best_metric,
                     "bad_epochs": state.bad_epochs,
                     "rng_state": json.dumps(rng.bit_generator.state),
                     "train_config": config.to_dict()}
            ckpt.save_model(model, out / "checkpoint.sinf", extra=extra,
                            include_momentum=True)
            if improved:
                ckpt.save_model(model, out / "best.sinf", extra=extra,
                                include_momentum=True)

        if val_scene_sets and config.early_stop_patience > 0 \
                and state.bad_epochs >= config.early_stop_patience:
            break
        if stop_after is not None and epoch >= stop_after:
            break

    return model, state.history
