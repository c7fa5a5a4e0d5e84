"""Training loop: phase-wise loss weighting, teacher-forced ROI sampling,
stateless learning-rate decay, per-epoch CSV logging, and checkpointing.

Determinism contract: every random draw comes from a stream seeded by
(config seed, epoch), so two runs with equal seeds produce byte-identical
logs, and resuming from a checkpoint rejoins the same trace.
"""

import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import box_intersects, roi_pool
from .detection import DetectionMaps, extract_detections, render_ground_truth
from .errors import EmptyCohort, NonFiniteLoss
from .heads import (
    align_to_world_points,
    local_loss,
    predict_direct_world_points,
    predict_local_points,
    world_loss,
)
from .losses import DEFAULT_LOSS_PARAMS, heatmap_focal_loss, offset_loss, radius_masked_mse
from .metrics import rmse_points
from .model import Model, load_model_checkpoint, restore_optimizer, save_model_checkpoint

LOG_HEADER = "epoch,lh,lr_loss,lo,ll,lw,total,val_rmse_world,val_rmse_local,lr"

COMPONENT_NAMES = ("lh", "lr", "lo", "ll", "lw")


@dataclass
class LossWeightSchedule:
    """Phase-wise weights: detection only, then local, then world."""

    base_heat: float = 1.0
    base_radius: float = 0.01
    base_offset: float = 1.0
    ramp_step: float = 0.2
    ramp_max: float = 2.0
    heat_boost: float = 40.0
    local_phase: int = 20
    world_phase: int = 40

    def weights_at(self, epoch):
        heat = self.base_heat if epoch < self.local_phase else self.heat_boost
        local = (
            0.0
            if epoch < self.local_phase
            else min(self.ramp_max, self.ramp_step * (epoch - self.local_phase))
        )
        world = (
            0.0
            if epoch < self.world_phase
            else min(self.ramp_max, self.ramp_step * (epoch - self.world_phase))
        )
        return (heat, self.base_radius, self.base_offset, local, world)


@dataclass
class TeacherForcingSchedule:
    """Linear decay of the probability of substituting ground truth."""

    box_start: int = 20
    box_end: int = 120
    local_start: int = 40
    local_end: int = 140

    @staticmethod
    def _linear(epoch, start, end):
        if epoch <= start:
            return 1.0
        if epoch >= end:
            return 0.0
        return 1.0 - (epoch - start) / (end - start)

    def p_gt_box(self, epoch):
        return self._linear(epoch, self.box_start, self.box_end)

    def p_gt_local(self, epoch):
        return self._linear(epoch, self.local_start, self.local_end)


@dataclass
class TrainConfig:
    epochs: int = 300
    learning_rate: float = 1e-4
    lr_decay_every: int = 20
    lr_decay_gamma: float = 0.9
    batch_size: int = 1
    seed: int = 0
    splat_sigma_scale: float = 1.0 / 3.0
    presence_threshold: float = 0.3
    fallback_to_gt_box: bool = True
    detach_world_gradient: bool = False
    loss_params: object = field(default_factory=lambda: DEFAULT_LOSS_PARAMS)
    weights: LossWeightSchedule = field(default_factory=LossWeightSchedule)
    teacher: TeacherForcingSchedule = field(default_factory=TeacherForcingSchedule)

    def __post_init__(self):
        if self.epochs < 1 or self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("epochs, learning rate, and batch size must be positive")

    def to_json(self):
        return {
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "lr_decay_every": self.lr_decay_every,
            "lr_decay_gamma": self.lr_decay_gamma,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "splat_sigma_scale": self.splat_sigma_scale,
            "presence_threshold": self.presence_threshold,
            "fallback_to_gt_box": self.fallback_to_gt_box,
            "detach_world_gradient": self.detach_world_gradient,
        }

    @classmethod
    def from_json(cls, doc):
        known = {k: doc[k] for k in cls().to_json() if k in doc}
        return cls(**known)


def learning_rate_at(epoch, config):
    """Stateless step decay: lr * gamma^(epoch // step)."""
    return config.learning_rate * config.lr_decay_gamma ** (epoch // config.lr_decay_every)


def schedule_at(epoch, weights=None, teacher=None):
    """(lambda_h, lambda_r, lambda_o, lambda_l, lambda_w, p_gt_box, p_gt_local)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    weights = weights or LossWeightSchedule()
    teacher = teacher or TeacherForcingSchedule()
    return weights.weights_at(epoch) + (teacher.p_gt_box(epoch), teacher.p_gt_local(epoch))


def combined_loss(components, weights):
    """Weighted sum; zero-weight components are excluded from the graph."""
    total = None
    for name, weight in zip(COMPONENT_NAMES, weights):
        value = components[name]
        scalar = float(value.detach() if torch.is_tensor(value) else value)
        if not np.isfinite(scalar):
            raise NonFiniteLoss(component=name, value=scalar)
        if weight == 0.0:
            continue
        term = weight * value
        total = term if total is None else total + term
    if total is None:
        total = torch.zeros(())
    return total


class _SampleCache:
    """Per-sample constants reused across epochs: tensors of the volume,
    ground-truth maps, and per-anatomy correspondence targets."""

    def __init__(self, record, num_classes, stride, sigma_scale):
        self.record = record
        self.volume = torch.as_tensor(record.volume, dtype=torch.float32)
        boxes = [rec.box for rec in record.anatomies.values()]
        maps = render_ground_truth(
            boxes, record.volume.shape, num_classes, stride, sigma_scale
        )
        self.heat = torch.as_tensor(maps.heatmap, dtype=torch.float32)
        self.radius = torch.as_tensor(maps.radius_map, dtype=torch.float32)
        self.offset = torch.as_tensor(maps.offset_map, dtype=torch.float32)
        self.center_mask = torch.as_tensor(maps.center_mask)
        self.gt_local = {
            k: torch.as_tensor(rec.local.points, dtype=torch.float32)
            for k, rec in record.anatomies.items()
        }
        self.gt_world = {
            k: torch.as_tensor(rec.world.points, dtype=torch.float32)
            for k, rec in record.anatomies.items()
        }


def _decode_boxes(heat, radius, offset, stride, threshold):
    """Detached detection decoding from an already-computed forward pass."""
    maps = DetectionMaps(
        heatmap=heat.detach().numpy().astype(float),
        radius_map=radius.detach().numpy().astype(float),
        offset_map=offset.detach().numpy().astype(float),
        stride=stride,
    )
    return {b.anatomy: b for b in extract_detections(maps, threshold)}


def sample_losses(cache, model, templates, epoch, rng, config, counters):
    """All five component losses for one sample (correspondence terms
    averaged over present anatomies)."""
    pyramid, heat, radius, offset = model(cache.volume)
    components = {
        "lh": heatmap_focal_loss(heat, cache.heat, config.loss_params),
        "lr": radius_masked_mse(radius, cache.radius, cache.center_mask),
        "lo": offset_loss(offset, cache.offset, cache.center_mask, config.loss_params),
    }
    _, _, _, _, _, p_box, p_local = schedule_at(epoch, config.weights, config.teacher)
    predicted_boxes = None
    local_terms, world_terms = [], []
    for template in templates:
        k = template.anatomy
        if k not in cache.record.anatomies:
            continue
        use_gt_box = bool(rng.random() < p_box)
        use_gt_local = bool(rng.random() < p_local)
        if use_gt_box:
            box = cache.record.anatomies[k].box
        else:
            if predicted_boxes is None:
                predicted_boxes = _decode_boxes(
                    heat, radius, offset, model.config.stride, config.presence_threshold
                )
            box = predicted_boxes.get(k)
            if box is not None and not box_intersects(box, cache.volume.shape):
                box = None  # decoded box unusable for pooling; treat as a miss
            if box is None:
                if config.fallback_to_gt_box:
                    counters["forced_fallback"] = counters.get("forced_fallback", 0) + 1
                    box = cache.record.anatomies[k].box
                else:
                    counters["skipped"] = counters.get("skipped", 0) + 1
                    continue
        roi = roi_pool(pyramid, box, model.config.pool_grid, model.config.num_classes)
        local_pts = predict_local_points(
            model.local_head, roi, box.center, box.radii, template.local_template.points
        )
        local_terms.append(local_loss(local_pts, cache.gt_local[k], config.loss_params))
        world_in = cache.gt_local[k] if use_gt_local else local_pts
        if config.detach_world_gradient and not use_gt_local:
            world_in = world_in.detach()
        if model.config.direct_world:
            world_pts = predict_direct_world_points(
                model.world_head, roi, box.radii, template.world_template.points
            )
        else:
            world_pts = align_to_world_points(
                world_in, template.world_template.points, counters
            )
        world_terms.append(world_loss(world_pts, cache.gt_world[k], config.loss_params))
    zero = torch.zeros(())
    components["ll"] = sum(local_terms) / len(local_terms) if local_terms else zero
    components["lw"] = sum(world_terms) / len(world_terms) if world_terms else zero
    return components


def train_step(batch, model, optimizer, epoch, rng, config, templates, counters):
    """One optimizer update over a batch of cached samples; returns the
    per-component means and the weighted total."""
    model.train()
    weights = config.weights.weights_at(epoch)
    sums = {name: 0.0 for name in COMPONENT_NAMES}
    total_loss = None
    for cache in batch:
        components = sample_losses(cache, model, templates, epoch, rng, config, counters)
        loss = combined_loss(components, weights)
        total_loss = loss if total_loss is None else total_loss + loss
        for name in COMPONENT_NAMES:
            value = components[name]
            sums[name] += float(value.detach() if torch.is_tensor(value) else value)
    total_loss = total_loss / len(batch)
    optimizer.zero_grad()
    if total_loss.requires_grad:
        total_loss.backward()
        optimizer.step()
    metrics = {name: sums[name] / len(batch) for name in COMPONENT_NAMES}
    metrics["total"] = float(total_loss.detach())
    return metrics


def validation_rmse(model, caches, templates, config):
    """Mean world / local RMSE over a validation set.

    Detection misses fall back to the ground-truth box so the metric stays
    defined from the first epoch; misses are reported separately at eval.
    """
    model.eval()
    world_errors, local_errors = [], []
    with torch.no_grad():
        for cache in caches:
            pyramid, heat, radius, offset = model(cache.volume)
            found = _decode_boxes(
                heat, radius, offset, model.config.stride, config.presence_threshold
            )
            for template in templates:
                k = template.anatomy
                if k not in cache.record.anatomies:
                    continue
                box = found.get(k)
                if box is None or not box_intersects(box, cache.volume.shape):
                    box = cache.record.anatomies[k].box
                roi = roi_pool(pyramid, box, model.config.pool_grid, model.config.num_classes)
                local_pts = predict_local_points(
                    model.local_head, roi, box.center, box.radii, template.local_template.points
                )
                if model.config.direct_world:
                    world_pts = predict_direct_world_points(
                        model.world_head, roi, box.radii, template.world_template.points
                    )
                else:
                    world_pts = align_to_world_points(local_pts, template.world_template.points)
                local_errors.append(
                    rmse_points(local_pts.numpy(), cache.record.anatomies[k].local.points)
                )
                world_errors.append(
                    rmse_points(world_pts.numpy(), cache.record.anatomies[k].world.points)
                )
    if not world_errors:
        return float("nan"), float("nan")
    return float(np.mean(world_errors)), float(np.mean(local_errors))


def prepare_resume(checkpoint_path, config, expected_config=None):
    """Load a checkpoint into a fresh model/optimizer positioned at the epoch
    after the saved one; pass the result as fit(..., resume=...)."""
    model, epoch, manifest = load_model_checkpoint(checkpoint_path, expected_config)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    restore_optimizer(optimizer, model, manifest)
    return model, epoch + 1, optimizer


@dataclass
class FitResult:
    best_epoch: int
    best_val_rmse_world: float
    log_path: str
    best_checkpoint: str
    last_checkpoint: str
    counters: dict


def fit(train_records, val_records, templates, model_config, config, out_dir, resume=None):
    """Full training run; writes log.csv, best.ckpt, last.ckpt under out_dir.

    resume: (model, start_epoch, optimizer) to continue an earlier run; the
    log file is then appended to instead of rewritten.
    """
    if not train_records:
        raise EmptyCohort("training set is empty")
    os.makedirs(out_dir, exist_ok=True)
    torch.manual_seed(config.seed)
    if resume is None:
        model = Model(model_config)
        optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
        start_epoch = 0
    else:
        model, start_epoch, optimizer = resume
    train_caches = [
        _SampleCache(r, model.config.num_classes, model.config.stride, config.splat_sigma_scale)
        for r in train_records
    ]
    val_caches = [
        _SampleCache(r, model.config.num_classes, model.config.stride, config.splat_sigma_scale)
        for r in val_records
    ]
    log_path = os.path.join(out_dir, "log.csv")
    best_path = os.path.join(out_dir, "best.ckpt")
    last_path = os.path.join(out_dir, "last.ckpt")
    counters = {}
    best_val = float("inf")
    best_epoch = -1
    mode = "a" if start_epoch > 0 else "w"
    with open(log_path, mode) as log:
        if start_epoch == 0:
            log.write(LOG_HEADER + "\n")
        for epoch in range(start_epoch, config.epochs):
            rng = np.random.default_rng([config.seed, epoch])
            lr = learning_rate_at(epoch, config)
            for group in optimizer.param_groups:
                group["lr"] = lr
            order = rng.permutation(len(train_caches))
            epoch_sums = {name: 0.0 for name in COMPONENT_NAMES}
            epoch_sums["total"] = 0.0
            n_batches = 0
            try:
                for start in range(0, len(order), config.batch_size):
                    batch = [train_caches[i] for i in order[start : start + config.batch_size]]
                    metrics = train_step(
                        batch, model, optimizer, epoch, rng, config, templates, counters
                    )
                    for name, value in metrics.items():
                        epoch_sums[name] += value
                    n_batches += 1
            except NonFiniteLoss:
                # Leave the last good checkpoint in place and stop.
                raise
            val_world, val_local = validation_rmse(model, val_caches, templates, config)
            row = [epoch] + [repr(epoch_sums[n] / n_batches) for n in COMPONENT_NAMES]
            row.append(repr(epoch_sums["total"] / n_batches))
            row += [repr(val_world), repr(val_local), repr(lr)]
            log.write(",".join(str(v) for v in row) + "\n")
            log.flush()
            save_model_checkpoint(last_path, model, epoch, optimizer)
            if np.isfinite(val_world) and val_world < best_val:
                best_val = val_world
                best_epoch = epoch
                save_model_checkpoint(best_path, model, epoch, optimizer)
    return FitResult(
        best_epoch=best_epoch,
        best_val_rmse_world=best_val,
        log_path=log_path,
        best_checkpoint=best_path,
        last_checkpoint=last_path,
        counters=counters,
    )
