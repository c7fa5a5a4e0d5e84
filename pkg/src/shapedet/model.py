"""Full pipeline assembly: backbone + detection heads + correspondence heads,
single-sample inference, and checkpoint packing."""

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .backbone import (
    DEFAULT_POOL_GRID,
    DEFAULT_PYRAMID_WIDTH,
    DEFAULT_STAGE_CHANNELS,
    Backbone,
    DetectionHeadSet,
    box_intersects,
    roi_feature_length,
    roi_pool,
)
from .detection import (
    DEFAULT_PRESENCE_THRESHOLD,
    DEFAULT_STRIDE,
    DetectionMaps,
    extract_detections,
)
from .errors import ConfigMismatch
from .fileio import config_hash, load_checkpoint, save_checkpoint
from .heads import (
    DirectWorldHead,
    LocalHead,
    align_to_world_points,
    predict_direct_world_points,
    predict_local,
    predict_world,
)


@dataclass
class ModelConfig:
    num_classes: int = 3
    num_points: int = 128
    stride: int = DEFAULT_STRIDE
    stage_channels: tuple = DEFAULT_STAGE_CHANNELS
    pyramid_width: int = DEFAULT_PYRAMID_WIDTH
    pool_grid: int = DEFAULT_POOL_GRID
    hidden_width: int = 512
    direct_world: bool = False  # ablation: regress world points, skip alignment

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if self.stride not in tuple(2 ** (i + 1) for i in range(len(self.stage_channels))):
            raise ConfigMismatch(
                f"stride {self.stride} is not among the encoder strides "
                f"for {len(self.stage_channels)} stages"
            )

    @property
    def roi_length(self):
        return roi_feature_length(len(self.stage_channels), self.pyramid_width, self.pool_grid)

    def to_json(self):
        return {
            "num_classes": self.num_classes,
            "num_points": self.num_points,
            "stride": self.stride,
            "stage_channels": list(self.stage_channels),
            "pyramid_width": self.pyramid_width,
            "pool_grid": self.pool_grid,
            "hidden_width": self.hidden_width,
            "direct_world": self.direct_world,
        }

    @classmethod
    def from_json(cls, doc):
        return cls(
            num_classes=int(doc["num_classes"]),
            num_points=int(doc["num_points"]),
            stride=int(doc["stride"]),
            stage_channels=tuple(doc["stage_channels"]),
            pyramid_width=int(doc["pyramid_width"]),
            pool_grid=int(doc["pool_grid"]),
            hidden_width=int(doc["hidden_width"]),
            direct_world=bool(doc["direct_world"]),
        )

    @property
    def digest(self):
        return config_hash(self.to_json())


class Model(nn.Module):
    """Backbone, detection heads, shared local head, optional ablation head."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.backbone = Backbone(
            stage_channels=config.stage_channels, pyramid_width=config.pyramid_width
        )
        self.detection = DetectionHeadSet(config.num_classes, pyramid_width=config.pyramid_width)
        self.local_head = LocalHead(
            config.roi_length, config.num_classes, config.num_points, config.hidden_width
        )
        self.world_head = (
            DirectWorldHead(
                config.roi_length, config.num_classes, config.num_points, config.hidden_width
            )
            if config.direct_world
            else None
        )

    def forward(self, volume):
        """volume: (H, W, D) tensor -> (pyramid, heat, radius, offset)."""
        pyramid = self.backbone(volume)
        heat, radius, offset = self.detection(pyramid.level_at_stride(self.config.stride))
        return pyramid, heat, radius, offset

    def predicted_maps(self, volume):
        """Detached numpy DetectionMaps for the codec/extraction path."""
        with torch.no_grad():
            _, heat, radius, offset = self(volume)
        return DetectionMaps(
            heatmap=heat.numpy().astype(float),
            radius_map=radius.numpy().astype(float),
            offset_map=offset.numpy().astype(float),
            stride=self.config.stride,
        )


@dataclass
class AnatomyPrediction:
    box: object
    local: object
    world: object


def infer_sample(model, volume, templates, presence_threshold=DEFAULT_PRESENCE_THRESHOLD):
    """Detection -> bounded local prediction -> world alignment for one volume.

    Returns {anatomy: AnatomyPrediction} for every anatomy whose heatmap
    peak clears the presence threshold; absent anatomies are simply missing
    from the dict.
    """
    model.eval()
    if isinstance(volume, np.ndarray):
        volume = torch.as_tensor(volume, dtype=next(model.parameters()).dtype)
    by_anatomy = {t.anatomy: t for t in templates}
    with torch.no_grad():
        pyramid, heat, radius, offset = model(volume)
        maps = DetectionMaps(
            heatmap=heat.numpy().astype(float),
            radius_map=radius.numpy().astype(float),
            offset_map=offset.numpy().astype(float),
            stride=model.config.stride,
        )
        predictions = {}
        for box in extract_detections(maps, presence_threshold):
            if not box_intersects(box, tuple(volume.shape)):
                continue  # unusable stray detection counts as a miss
            template = by_anatomy[box.anatomy]
            roi = roi_pool(
                pyramid, box, model.config.pool_grid, num_classes=model.config.num_classes
            )
            local = predict_local(model.local_head, roi, box, template)
            if model.config.direct_world:
                world_pts = predict_direct_world_points(
                    model.world_head, roi, box.radii, template.world_template.points
                )
                world = template.world_template.with_points(world_pts.numpy().astype(float))
            else:
                world = predict_world(local, template)
            predictions[box.anatomy] = AnatomyPrediction(box=box, local=local, world=world)
    return predictions


# -- checkpoint packing --


def model_arrays(model, optimizer=None):
    """Named float32 arrays for the checkpoint: parameters plus Adam moments."""
    arrays = {}
    for name, param in model.named_parameters():
        arrays[f"param.{name}"] = param.detach().cpu().numpy()
    steps = {}
    if optimizer is not None:
        lookup = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                state = optimizer.state.get(p)
                if not state:
                    continue
                name = lookup[id(p)]
                arrays[f"adam.exp_avg.{name}"] = state["exp_avg"].cpu().numpy()
                arrays[f"adam.exp_avg_sq.{name}"] = state["exp_avg_sq"].cpu().numpy()
                steps[name] = int(state["step"].item() if torch.is_tensor(state["step"]) else state["step"])
    return arrays, steps


def save_model_checkpoint(path, model, epoch, optimizer=None, extra=None):
    arrays, steps = model_arrays(model, optimizer)
    payload = {"config": model.config.to_json(), "adam_steps": steps}
    payload.update(extra or {})
    save_checkpoint(path, model.config.digest, epoch, arrays, extra=payload)


def load_model_checkpoint(path, expected_config=None):
    """Returns (model, epoch, manifest); Adam state is re-attachable via
    restore_optimizer."""
    expected_digest = expected_config.digest if expected_config is not None else None
    manifest, arrays = load_checkpoint(path, expected_digest)
    config = ModelConfig.from_json(manifest["extra"]["config"])
    model = Model(config)
    state = {}
    for name, param in model.named_parameters():
        key = f"param.{name}"
        if key not in arrays:
            raise ConfigMismatch(f"checkpoint is missing parameter {name}")
        state[name] = torch.as_tensor(arrays[key])
    model.load_state_dict(state)
    model._checkpoint_arrays = arrays
    return model, int(manifest["epoch"]), manifest


def restore_optimizer(optimizer, model, manifest):
    """Rebuild Adam moments saved by save_model_checkpoint."""
    arrays = getattr(model, "_checkpoint_arrays", None)
    if arrays is None:
        raise ConfigMismatch("model was not loaded from a checkpoint")
    steps = manifest["extra"].get("adam_steps", {})
    by_name = dict(model.named_parameters())
    for group in optimizer.param_groups:
        for p in group["params"]:
            name = next(n for n, q in by_name.items() if q is p)
            key_m = f"adam.exp_avg.{name}"
            if key_m not in arrays:
                continue
            optimizer.state[p] = {
                "step": torch.tensor(float(steps.get(name, 0))),
                "exp_avg": torch.as_tensor(arrays[key_m]),
                "exp_avg_sq": torch.as_tensor(arrays[f"adam.exp_avg_sq.{name}"]),
            }
