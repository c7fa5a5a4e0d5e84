"""Synthetic multi-anatomy volumes with analytic ground truth.

Each class is an ellipsoid family: per sample the generator jitters the
semi-axes, center, and orientation, voxelizes the ellipsoid into the volume,
and maps a fixed Fibonacci-sphere direction set through the ellipsoid map
p = c + Q (radii * u).  Because every sample uses the same directions in the
same order, point m corresponds across the whole cohort by construction.

World correspondences are each sample's locals rigidly aligned onto the
class's canonical frame: the medoid sample's centered locals.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull
from scipy.spatial.transform import Rotation

from .detection import BoundingBox, extract_detections, render_ground_truth
from .errors import CorruptFile, SpecInfeasible
from .fileio import read_mask, read_particles, read_volume, write_mask, write_particles, write_volume
from .geometry import (
    CorrespondenceSet,
    Frame,
    TemplateShape,
    TriangleMesh,
    rigid_align_points,
    select_medoid,
)

DEFAULT_SPLIT_COUNTS = {"train": 200, "val": 20, "test": 20}


@dataclass
class EllipsoidClassSpec:
    """One anatomy family: jittered ellipsoids plus an intensity level."""

    base_radii: tuple
    radii_jitter: float  # relative, per-axis factor drawn from U(1-j, 1+j)
    center_low: tuple
    center_high: tuple
    rotation_jitter: float  # max |Euler angle| in radians, per axis
    foreground: float

    def __post_init__(self):
        self.base_radii = tuple(float(r) for r in self.base_radii)
        self.center_low = tuple(float(c) for c in self.center_low)
        self.center_high = tuple(float(c) for c in self.center_high)
        if min(self.base_radii) <= 0:
            raise SpecInfeasible(f"base radii must be positive, got {self.base_radii}")
        if not 0 <= self.radii_jitter < 1:
            raise SpecInfeasible(f"radii jitter must lie in [0, 1), got {self.radii_jitter}")
        if any(h < l for l, h in zip(self.center_low, self.center_high)):
            raise SpecInfeasible("center region has high < low")

    def max_half_extent(self):
        """Axis-aligned bound on the ellipsoid half-extent over all jitter."""
        worst = np.array(self.base_radii) * (1.0 + self.radii_jitter)
        if self.rotation_jitter > 0:
            return np.full(3, float(np.linalg.norm(worst)))
        return worst


@dataclass
class SyntheticSpec:
    dims: tuple = (64, 64, 64)
    num_points: int = 128
    classes: list = field(default_factory=list)
    background: float = 0.0
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)

    @property
    def num_classes(self):
        return len(self.classes)

    def validate(self):
        if not self.classes:
            raise SpecInfeasible("spec has no anatomy classes")
        dims = np.array(self.dims, dtype=float)
        for k, cls in enumerate(self.classes):
            bound = cls.max_half_extent()
            low = np.array(cls.center_low) - bound
            high = np.array(cls.center_high) + bound
            if np.any(low < 0) or np.any(high > dims):
                raise SpecInfeasible(
                    f"class {k} ellipsoid can leave the volume: needs "
                    f"[{low.tolist()}, {high.tolist()}] inside {self.dims}"
                )


def default_spec(seed=0, dims=(64, 64, 64), num_points=128):
    """Three overlapping-region ellipsoid families inside the given dims."""
    scale = min(dims) / 64.0
    lo, hi = 20.0 * scale, (min(dims) - 20.0 * scale)

    def region():
        return (lo, lo, lo), (hi, hi, hi)

    classes = [
        EllipsoidClassSpec((10 * scale, 7 * scale, 5 * scale), 0.2, *region(), 0.4, 1.0),
        EllipsoidClassSpec((6 * scale, 9 * scale, 7 * scale), 0.2, *region(), 0.4, 1.6),
        EllipsoidClassSpec((8 * scale, 5 * scale, 8 * scale), 0.2, *region(), 0.4, 2.2),
    ]
    return SyntheticSpec(dims=dims, num_points=num_points, classes=classes, seed=seed)


def spec_to_json(spec):
    return {
        "dims": list(spec.dims),
        "num_points": spec.num_points,
        "background": spec.background,
        "noise_sigma": spec.noise_sigma,
        "seed": spec.seed,
        "classes": [
            {
                "base_radii": list(c.base_radii),
                "radii_jitter": c.radii_jitter,
                "center_low": list(c.center_low),
                "center_high": list(c.center_high),
                "rotation_jitter": c.rotation_jitter,
                "foreground": c.foreground,
            }
            for c in spec.classes
        ],
    }


def spec_from_json(doc):
    """Explicit classes win; without them the built-in families are used,
    scaled to whatever dims the document asks for."""
    dims = tuple(doc.get("dims", (64, 64, 64)))
    if "classes" in doc:
        classes = [
            EllipsoidClassSpec(
                base_radii=c["base_radii"],
                radii_jitter=c["radii_jitter"],
                center_low=c["center_low"],
                center_high=c["center_high"],
                rotation_jitter=c["rotation_jitter"],
                foreground=c["foreground"],
            )
            for c in doc["classes"]
        ]
    else:
        classes = default_spec(dims=dims).classes
    return SyntheticSpec(
        dims=dims,
        num_points=int(doc.get("num_points", 128)),
        classes=classes,
        background=float(doc.get("background", 0.0)),
        noise_sigma=float(doc.get("noise_sigma", 0.1)),
        seed=int(doc.get("seed", 0)),
    )


def fibonacci_sphere(m):
    """m near-uniform unit directions; index order is the correspondence."""
    i = np.arange(m, dtype=float)
    z = 1.0 - 2.0 * (i + 0.5) / m
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    golden = np.pi * (3.0 - np.sqrt(5.0))
    theta = golden * i
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


@dataclass
class AnatomyRecord:
    box: BoundingBox
    local: CorrespondenceSet
    world: CorrespondenceSet  # filled after the canonical frame is known
    mask: np.ndarray


@dataclass
class SampleRecord:
    sample_id: str
    volume: np.ndarray  # float32 (H, W, D)
    anatomies: dict  # anatomy index -> AnatomyRecord


def _sample_pose(cls_spec, rng):
    radii = np.array(cls_spec.base_radii) * rng.uniform(
        1.0 - cls_spec.radii_jitter, 1.0 + cls_spec.radii_jitter, size=3
    )
    center = rng.uniform(cls_spec.center_low, cls_spec.center_high)
    angles = rng.uniform(-cls_spec.rotation_jitter, cls_spec.rotation_jitter, size=3)
    rotation = Rotation.from_euler("xyz", angles).as_matrix()
    return radii, center, rotation


def _voxelize(dims, center, radii, rotation):
    grids = np.meshgrid(*(np.arange(d, dtype=float) for d in dims), indexing="ij")
    delta = np.stack([g - c for g, c in zip(grids, center)], axis=-1)
    body = delta @ rotation  # rows are Q^T (v - c)
    return (np.square(body / radii).sum(axis=-1)) <= 1.0


def _analytic_box(anatomy, center, radii, rotation):
    half = np.sqrt(np.square(rotation * radii[None, :]).sum(axis=1))
    return BoundingBox(anatomy=anatomy, center=center.copy(), radii=half)


def generate_sample(spec, directions, index):
    rng = np.random.default_rng([spec.seed, index])
    volume = np.full(spec.dims, spec.background, dtype=np.float64)
    anatomies = {}
    for k, cls_spec in enumerate(spec.classes):
        radii, center, rotation = _sample_pose(cls_spec, rng)
        mask = _voxelize(spec.dims, center, radii, rotation)
        volume += cls_spec.foreground * mask
        local_pts = center + (directions * radii) @ rotation.T
        anatomies[k] = AnatomyRecord(
            box=_analytic_box(k, center, radii, rotation),
            local=CorrespondenceSet(local_pts, Frame.LOCAL, k),
            world=None,
            mask=mask,
        )
    if spec.noise_sigma > 0:
        volume += rng.normal(scale=spec.noise_sigma, size=spec.dims)
    return SampleRecord(
        sample_id=f"sample_{index:04d}",
        volume=volume.astype(np.float32),
        anatomies=anatomies,
    )


def _canonical_frame(records, anatomy):
    """Medoid sample's centered locals define the class's world frame."""
    masks = [r.anatomies[anatomy].mask for r in records]
    medoid = select_medoid(masks)
    locals_ = records[medoid.index].anatomies[anatomy].local.points
    return medoid.index, locals_ - locals_.mean(axis=0)


def _template_mesh(canonical_points, directions):
    # Triangulate the unit sphere once; the hull connectivity carries over
    # to the warped points because indices are shared.
    faces = ConvexHull(directions).simplices
    return TriangleMesh(canonical_points.copy(), faces)


def generate_dataset(spec, n_samples):
    """Returns (records, templates); worlds and templates share one frame."""
    spec.validate()
    if n_samples < 1:
        raise SpecInfeasible(f"need at least one sample, got {n_samples}")
    directions = fibonacci_sphere(spec.num_points)
    records = [generate_sample(spec, directions, i) for i in range(n_samples)]
    templates = []
    for k in range(spec.num_classes):
        medoid_index, canonical = _canonical_frame(records, k)
        for record in records:
            local_pts = record.anatomies[k].local.points
            rotation, translation = rigid_align_points(local_pts, canonical)
            record.anatomies[k].world = CorrespondenceSet(
                local_pts @ rotation.T + translation, Frame.WORLD, k
            )
        templates.append(
            TemplateShape(
                anatomy=k,
                local_template=CorrespondenceSet(canonical.copy(), Frame.LOCAL, k),
                world_template=CorrespondenceSet(canonical.copy(), Frame.WORLD, k),
                surface_mesh=_template_mesh(canonical, directions),
            )
        )
    return records, templates


# -- dataset directory layout --


def write_dataset(records, out_dir, spec=None, splits=None):
    """Layout: manifest.json + one directory per sample holding the volume,
    per-anatomy masks, and per-anatomy local/world particle files."""
    os.makedirs(out_dir, exist_ok=True)
    sample_entries = []
    for record in records:
        sub = os.path.join(out_dir, record.sample_id)
        os.makedirs(sub, exist_ok=True)
        write_volume(record.volume, os.path.join(sub, "volume.raw"))
        anatomy_entries = {}
        for k, rec in sorted(record.anatomies.items()):
            write_mask(rec.mask, os.path.join(sub, f"anatomy_{k}.mask"))
            write_particles(rec.local, os.path.join(sub, f"anatomy_{k}.local.particles"))
            write_particles(rec.world, os.path.join(sub, f"anatomy_{k}.world.particles"))
            anatomy_entries[str(k)] = {
                "center": [float(v) for v in rec.box.center],
                "radii": [float(v) for v in rec.box.radii],
            }
        sample_entries.append({"id": record.sample_id, "anatomies": anatomy_entries})
    manifest = {
        "num_classes": len(records[0].anatomies) if records else 0,
        "num_points": records[0].anatomies[0].local.num_points if records else 0,
        "dims": list(records[0].volume.shape) if records else [],
        "samples": sample_entries,
        "splits": splits or {},
    }
    if spec is not None:
        manifest["spec"] = spec_to_json(spec)
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)


def read_dataset(data_dir):
    manifest_path = os.path.join(data_dir, "manifest.json")
    try:
        with open(manifest_path, "r") as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise CorruptFile(f"missing manifest.json under {data_dir}", offset=0) from None
    except ValueError as exc:
        raise CorruptFile(f"bad manifest: {exc}", offset=0) from exc
    records = []
    for entry in manifest["samples"]:
        sub = os.path.join(data_dir, entry["id"])
        volume, _ = read_volume(os.path.join(sub, "volume.raw"))
        anatomies = {}
        for key, meta in sorted(entry["anatomies"].items(), key=lambda kv: int(kv[0])):
            k = int(key)
            mask, _ = read_mask(os.path.join(sub, f"anatomy_{k}.mask"))
            local = read_particles(os.path.join(sub, f"anatomy_{k}.local.particles"), Frame.LOCAL, k)
            world = read_particles(os.path.join(sub, f"anatomy_{k}.world.particles"), Frame.WORLD, k)
            anatomies[k] = AnatomyRecord(
                box=BoundingBox(
                    anatomy=k,
                    center=np.array(meta["center"], dtype=float),
                    radii=np.array(meta["radii"], dtype=float),
                ),
                local=local,
                world=world,
                mask=mask,
            )
        records.append(SampleRecord(sample_id=entry["id"], volume=volume, anatomies=anatomies))
    return records, manifest


def split_records(records, manifest, split):
    wanted = set(manifest.get("splits", {}).get(split, []))
    return [r for r in records if r.sample_id in wanted]
