"""Strided detection maps: ground-truth rendering, center decoding, peak extraction.

A center c decomposes as c = R * h + o with h the strided heatmap voxel and
o in [0, R) the sub-stride offset; rendering and extraction are exact
inverses of each other for centers inside the volume.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BadDims, CenterOutOfBounds, DuplicateClass

DEFAULT_STRIDE = 4
DEFAULT_PRESENCE_THRESHOLD = 0.3
# sigma = max(1, splat_sigma_scale * min(radii) / stride), in strided units
DEFAULT_SPLAT_SIGMA_SCALE = 1.0 / 3.0


@dataclass
class BoundingBox:
    """Axis-aligned box described by its center and per-axis half-extents."""

    anatomy: int
    center: np.ndarray  # (3,) full-resolution voxel coordinates
    radii: np.ndarray  # (3,) half-extents, voxels
    confidence: float = 1.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        self.radii = np.asarray(self.radii, dtype=float).reshape(3)
        if np.any(self.radii <= 0):
            raise ValueError(f"radii must be strictly positive, got {self.radii}")

    @property
    def max_radius(self) -> float:
        return float(self.radii.max())


@dataclass
class DetectionMaps:
    """Heatmap / radius / offset triple on the strided grid."""

    heatmap: np.ndarray  # (K, H/R, W/R, D/R) in [0, 1]
    radius_map: np.ndarray  # (3, H/R, W/R, D/R) voxels
    offset_map: np.ndarray  # (3, H/R, W/R, D/R) voxels, in [0, R) where supervised
    stride: int
    center_mask: np.ndarray = field(default=None)  # (H/R, W/R, D/R) bool, GT centers

    def __post_init__(self):
        if self.center_mask is None:
            self.center_mask = np.zeros(self.heatmap.shape[1:], dtype=bool)

    @property
    def num_classes(self) -> int:
        return self.heatmap.shape[0]

    @property
    def full_dims(self) -> tuple[int, int, int]:
        return tuple(int(d * self.stride) for d in self.heatmap.shape[1:])


def strided_shape(dims: tuple[int, int, int], stride: int) -> tuple[int, int, int]:
    for d in dims:
        if d % stride != 0:
            raise BadDims(f"dims {dims} not divisible by stride {stride}")
    return tuple(d // stride for d in dims)


def render_ground_truth(
    boxes: list[BoundingBox],
    dims: tuple[int, int, int],
    num_classes: int,
    stride: int = DEFAULT_STRIDE,
    splat_sigma_scale: float = DEFAULT_SPLAT_SIGMA_SCALE,
) -> DetectionMaps:
    """Render boxes into supervision maps.

    Each box paints an unnormalized Gaussian splat on its class channel,
    peaking at exactly 1.0 at the strided center voxel floor(c / R).  Radii
    and sub-stride offsets are written at that voxel only, and the center
    mask marks it as supervised.
    """
    grid = strided_shape(dims, stride)
    heat = np.zeros((num_classes,) + grid)
    radius = np.zeros((3,) + grid)
    offset = np.zeros((3,) + grid)
    mask = np.zeros(grid, dtype=bool)
    seen = set()
    axes = [np.arange(g, dtype=float) for g in grid]
    for box in boxes:
        if box.anatomy in seen:
            raise DuplicateClass(f"two boxes for anatomy {box.anatomy}")
        seen.add(box.anatomy)
        if np.any(box.center < 0) or np.any(box.center >= np.asarray(dims)):
            raise CenterOutOfBounds(f"center {box.center} outside dims {dims}")
        peak = np.floor(box.center / stride).astype(int)
        sigma = max(1.0, splat_sigma_scale * box.radii.min() / stride)
        sq = sum(
            ((ax - peak[i]) ** 2)[tuple(slice(None) if j == i else np.newaxis for j in range(3))]
            for i, ax in enumerate(axes)
        )
        splat = np.exp(-sq / (2.0 * sigma**2))
        heat[box.anatomy] = np.maximum(heat[box.anatomy], splat)
        idx = tuple(peak)
        radius[(slice(None),) + idx] = box.radii
        offset[(slice(None),) + idx] = box.center - stride * peak
        mask[idx] = True
    return DetectionMaps(heat, radius, offset, stride, mask)


def decode_center(heat_voxel, offset, stride: int) -> np.ndarray:
    """Full-resolution center from a strided voxel and its offset."""
    return np.asarray(heat_voxel, dtype=float) * stride + np.asarray(offset, dtype=float)


def extract_detections(
    maps: DetectionMaps, presence_threshold: float = DEFAULT_PRESENCE_THRESHOLD
) -> list[BoundingBox]:
    """Per-class argmax peak decoding.

    An anatomy is reported only when its channel's peak value reaches the
    presence threshold; radii are read from the radius map at the peak and
    clamped to at least one voxel.
    """
    out = []
    for k in range(maps.num_classes):
        channel = maps.heatmap[k]
        flat = int(np.argmax(channel))
        peak = np.unravel_index(flat, channel.shape)
        value = float(channel[peak])
        if value < presence_threshold:
            continue
        center = decode_center(peak, maps.offset_map[(slice(None),) + peak], maps.stride)
        radii = np.maximum(maps.radius_map[(slice(None),) + peak], 1.0)
        out.append(BoundingBox(anatomy=k, center=center, radii=radii, confidence=value))
    return out


def dump_maps(maps: DetectionMaps, path) -> None:
    """Debug dump: header ``K H W D R`` then channel-major ASCII floats.

    Channels are written heatmap (K), then radius (3), then offset (3),
    each flattened in C order, one channel per line.
    """
    h, w, d = maps.full_dims
    with open(path, "w") as f:
        f.write(f"{maps.num_classes} {h} {w} {d} {maps.stride}\n")
        for channel in list(maps.heatmap) + list(maps.radius_map) + list(maps.offset_map):
            f.write(" ".join(repr(float(v)) for v in channel.ravel()) + "\n")


def load_maps(path) -> DetectionMaps:
    """Inverse of dump_maps.  The center mask is not stored; it is rebuilt
    as the set of voxels with a nonzero radius entry."""
    with open(path) as f:
        k, h, w, d, stride = (int(v) for v in f.readline().split())
        grid = strided_shape((h, w, d), stride)
        n = grid[0] * grid[1] * grid[2]
        channels = []
        for _ in range(k + 6):
            row = np.array(f.readline().split(), dtype=float)
            if row.size != n:
                raise ValueError(f"expected {n} values per channel, got {row.size}")
            channels.append(row.reshape(grid))
    heat = np.stack(channels[:k])
    radius = np.stack(channels[k : k + 3])
    offset = np.stack(channels[k + 3 :])
    mask = radius.max(axis=0) > 0
    return DetectionMaps(heat, radius, offset, stride, mask)
