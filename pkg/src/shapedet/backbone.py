"""3D convolutional encoder with feature-pyramid fusion and ROI pooling.

The encoder is a stack of stride-2 stages (conv 3x3x3, group normalization,
SiLU, average-pool downsample).  Lateral 1x1 convolutions project every stage
onto a common pyramid width and a top-down pass adds upsampled coarser levels,
so each pyramid level mixes its own resolution with everything above it.  The
detection heads read the stride-4 level; ROI features are pooled from every
fused level and concatenated into a fixed-length vector.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .detection import BoundingBox
from .errors import BadDims, EmptyIntersection

DEFAULT_STAGE_CHANNELS = (16, 32, 64, 128)
DEFAULT_PYRAMID_WIDTH = 32
DEFAULT_POOL_GRID = 2


@dataclass
class FeaturePyramid:
    """Multi-resolution features for one volume.

    ``levels`` holds the fused maps at a common channel width, one per
    stride; ``encoder_levels`` holds the raw per-stage maps whose widths
    follow the stage config.  All tensors are unbatched (C, h, w, d).
    """

    levels: tuple
    encoder_levels: tuple
    strides: tuple
    input_dims: tuple

    def __post_init__(self):
        if len(self.levels) != len(self.strides) or len(self.encoder_levels) != len(self.strides):
            raise BadDims("one level per stride required")
        for tensor, stride in zip(self.levels, self.strides):
            expect = tuple(d // stride for d in self.input_dims)
            if tuple(tensor.shape[1:]) != expect:
                raise BadDims(
                    f"level at stride {stride} has dims {tuple(tensor.shape[1:])}, expected {expect}"
                )

    @property
    def channel_widths(self):
        return tuple(t.shape[0] for t in self.levels)

    @property
    def encoder_channel_widths(self):
        return tuple(t.shape[0] for t in self.encoder_levels)

    def level_at_stride(self, stride):
        if stride not in self.strides:
            raise BadDims(f"no pyramid level at stride {stride}; have {self.strides}")
        return self.levels[self.strides.index(stride)]


@dataclass
class RoiFeature:
    """Fixed-length pooled feature for one detected box plus its class one-hot."""

    vector: torch.Tensor
    anatomy_onehot: torch.Tensor

    def __post_init__(self):
        if self.vector.dim() != 1 or self.anatomy_onehot.dim() != 1:
            raise BadDims("roi feature tensors must be 1D")
        if int((self.anatomy_onehot == 1).sum()) != 1 or self.anatomy_onehot.sum() != 1:
            raise BadDims("anatomy one-hot must contain exactly one 1")

    @property
    def anatomy(self):
        return int(torch.argmax(self.anatomy_onehot))


def he_init(module):
    if isinstance(module, (nn.Conv3d, nn.Linear)):
        nn.init.kaiming_normal_(module.weight, nonlinearity="relu")
        if module.bias is not None:
            nn.init.zeros_(module.bias)


class Backbone(nn.Module):
    """Configurable encoder returning a FeaturePyramid for a single volume."""

    def __init__(
        self,
        stage_channels=DEFAULT_STAGE_CHANNELS,
        pyramid_width=DEFAULT_PYRAMID_WIDTH,
        in_channels=1,
    ):
        super().__init__()
        if len(stage_channels) < 1:
            raise BadDims("at least one encoder stage required")
        self.stage_channels = tuple(int(c) for c in stage_channels)
        self.pyramid_width = int(pyramid_width)
        self.strides = tuple(2 ** (i + 1) for i in range(len(self.stage_channels)))
        stages = []
        prev = in_channels
        for ch in self.stage_channels:
            stages.append(
                nn.Sequential(
                    nn.Conv3d(prev, ch, kernel_size=3, padding=1),
                    nn.GroupNorm(1, ch),
                    nn.SiLU(),
                    nn.AvgPool3d(kernel_size=2, stride=2),
                )
            )
            prev = ch
        self.stages = nn.ModuleList(stages)
        self.laterals = nn.ModuleList(
            nn.Conv3d(ch, self.pyramid_width, kernel_size=1) for ch in self.stage_channels
        )
        self.apply(he_init)

    @property
    def deepest_stride(self):
        return self.strides[-1]

    def forward(self, volume):
        """volume: (H, W, D) scalar grid -> FeaturePyramid."""
        if volume.dim() != 3:
            raise BadDims(f"expected a 3D volume, got shape {tuple(volume.shape)}")
        dims = tuple(volume.shape)
        if any(d % self.deepest_stride != 0 for d in dims):
            raise BadDims(f"dims {dims} not divisible by deepest stride {self.deepest_stride}")
        x = volume[None, None]
        encoder_levels = []
        for stage in self.stages:
            x = stage(x)
            encoder_levels.append(x)
        fused = [None] * len(encoder_levels)
        fused[-1] = self.laterals[-1](encoder_levels[-1])
        for i in range(len(encoder_levels) - 2, -1, -1):
            up = F.interpolate(fused[i + 1], scale_factor=2, mode="nearest-exact")
            fused[i] = self.laterals[i](encoder_levels[i]) + up
        return FeaturePyramid(
            levels=tuple(t[0] for t in fused),
            encoder_levels=tuple(t[0] for t in encoder_levels),
            strides=self.strides,
            input_dims=dims,
        )


class DetectionHeadSet(nn.Module):
    """1x1 convolution heads on the stride-4 pyramid level.

    Produces the class heatmap (sigmoid), per-axis radius map, and
    sub-stride offset map.
    """

    def __init__(self, num_classes, pyramid_width=DEFAULT_PYRAMID_WIDTH):
        super().__init__()
        self.num_classes = int(num_classes)
        self.heat = nn.Conv3d(pyramid_width, self.num_classes, kernel_size=1)
        self.radius = nn.Conv3d(pyramid_width, 3, kernel_size=1)
        self.offset = nn.Conv3d(pyramid_width, 3, kernel_size=1)
        self.apply(he_init)
        # Bias the heatmap toward background so early training is stable.
        nn.init.constant_(self.heat.bias, -2.0)

    def forward(self, level):
        """level: (C, h, w, d) stride-4 features -> (heat, radius, offset)."""
        x = level[None]
        heat = torch.sigmoid(self.heat(x))[0]
        radius = self.radius(x)[0]
        offset = self.offset(x)[0]
        return heat, radius, offset


def forward_backbone(backbone, volume):
    """Run the encoder over one (H, W, D) volume and return its FeaturePyramid."""
    if isinstance(volume, np.ndarray):
        volume = torch.as_tensor(volume, dtype=next(backbone.parameters()).dtype)
    return backbone(volume)


def box_intersects(box, dims):
    """True when the box overlaps the volume at all (roi_pool's predicate)."""
    lo = np.asarray(box.center, dtype=float) - np.asarray(box.radii, dtype=float)
    hi = np.asarray(box.center, dtype=float) + np.asarray(box.radii, dtype=float)
    return not (np.any(hi <= 0.0) or np.any(lo >= np.asarray(dims, dtype=float)))


def roi_pool(pyramid, box, pool_grid=DEFAULT_POOL_GRID, num_classes=None):
    """Pool the box region from every fused level into one fixed-length vector.

    Per level the box is scaled to that resolution, clamped to bounds with a
    one-voxel minimum per axis, and adaptively average-pooled to pool_grid^3
    cells; all cells are flattened and concatenated.  The class one-hot is
    carried alongside, not baked into the vector.
    """
    if pool_grid < 1:
        raise BadDims(f"pool_grid must be >= 1, got {pool_grid}")
    lo = np.asarray(box.center, dtype=float) - np.asarray(box.radii, dtype=float)
    hi = np.asarray(box.center, dtype=float) + np.asarray(box.radii, dtype=float)
    dims = np.asarray(pyramid.input_dims, dtype=float)
    if np.any(hi <= 0.0) or np.any(lo >= dims):
        raise EmptyIntersection(
            f"box [{lo.tolist()}, {hi.tolist()}] lies outside volume dims {pyramid.input_dims}"
        )
    pooled = []
    for level, stride in zip(pyramid.levels, pyramid.strides):
        shape = np.array(level.shape[1:], dtype=int)
        start = np.clip(np.floor(lo / stride).astype(int), 0, shape - 1)
        stop = np.clip(np.ceil(hi / stride).astype(int), 1, shape)
        stop = np.maximum(stop, start + 1)
        region = level[:, start[0]:stop[0], start[1]:stop[1], start[2]:stop[2]]
        cells = F.adaptive_avg_pool3d(region[None], pool_grid)[0]
        pooled.append(cells.reshape(-1))
    vector = torch.cat(pooled)
    if num_classes is None:
        return vector
    onehot = torch.zeros(num_classes, dtype=vector.dtype)
    onehot[box.anatomy] = 1.0
    return RoiFeature(vector=vector, anatomy_onehot=onehot)


def roi_feature_length(num_levels, pyramid_width, pool_grid=DEFAULT_POOL_GRID):
    return num_levels * pyramid_width * pool_grid ** 3
