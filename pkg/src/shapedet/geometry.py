"""Correspondence containers and rigid alignment.

Points live in ordered M x 3 arrays; the ordering is semantic (index m is
the same anatomical location across samples) and no operation here ever
reorders it.  Alignment is rigid-only: rotation + translation, reflections
rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import (
    DegenerateConfiguration,
    EmptyCohort,
    EmptyMask,
    MismatchedCardinality,
    NearDegenerateSpectrum,
)

# Relative gap below which the second singular value is treated as zero
# (collinear / coincident point sets).
_RANK_TOL = 1e-9

# Minimum pairwise singular-value separation for the closed-form alignment
# gradient; below this the caller should use the detached-transform fallback.
SPECTRUM_GAP_TOL = 1e-6


class Frame(Enum):
    LOCAL = "local"
    WORLD = "world"


@dataclass
class CorrespondenceSet:
    """Ordered set of M 3D points for one anatomy of one sample."""

    points: np.ndarray  # (M, 3) float
    frame: Frame
    anatomy: int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or self.points.shape[0] == 0:
            raise ValueError(f"points must be (M, 3) with M > 0, got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("points must be finite")

    @property
    def num_points(self) -> int:
        return self.points.shape[0]

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def with_points(self, points: np.ndarray, frame: Frame | None = None) -> "CorrespondenceSet":
        return CorrespondenceSet(points, self.frame if frame is None else frame, self.anatomy)


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float
    faces: np.ndarray  # (F, 3) int, indices into vertices

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.faces = np.asarray(self.faces, dtype=int)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3 or len(self.vertices) < 4:
            raise ValueError("mesh needs at least 4 vertices of dimension 3")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValueError("faces must be (F, 3)")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")


@dataclass
class TemplateShape:
    """Per-anatomy template: medoid correspondences plus a surface mesh.

    local_template is stored centered at the origin so it can be re-centered
    at any predicted anatomy center via center_at.
    """

    anatomy: int
    local_template: CorrespondenceSet
    world_template: CorrespondenceSet
    surface_mesh: TriangleMesh

    def __post_init__(self):
        if self.local_template.num_points != self.world_template.num_points:
            raise MismatchedCardinality(
                f"local template has {self.local_template.num_points} points, "
                f"world template has {self.world_template.num_points}"
            )
        if np.linalg.norm(self.local_template.centroid()) > 1e-9:
            raise ValueError("local template must be centered at the origin")

    @property
    def num_points(self) -> int:
        return self.local_template.num_points


@dataclass
class RigidTransform:
    """Proper rigid transform p -> rotation @ p + translation."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-9:
            raise ValueError(f"rotation is not orthonormal (residual {err:.2e})")
        det = np.linalg.det(self.rotation)
        if abs(det - 1.0) > 1e-9:
            raise ValueError(f"rotation must be proper (det {det:.12f}); reflections rejected")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))


def procrustes_align(source: CorrespondenceSet, target: CorrespondenceSet) -> RigidTransform:
    """Least-squares rigid alignment of source onto target (Kabsch).

    Minimizes sum_m ||R s_m + t - t_m||^2 over proper rotations R.  The sign
    of the last column of V is flipped when det(V U^T) < 0 so that the result
    is always a rotation, never a reflection.
    """
    if source.num_points != target.num_points:
        raise MismatchedCardinality(
            f"source has {source.num_points} points, target has {target.num_points}"
        )
    rotation, translation = rigid_align_points(source.points, target.points)
    return RigidTransform(rotation, translation)


def rigid_align_points(source_points: np.ndarray, target_points: np.ndarray):
    """Array-level Kabsch solution: (rotation, translation) mapping source onto target."""
    src = np.asarray(source_points, dtype=float)
    tgt = np.asarray(target_points, dtype=float)
    if src.shape != tgt.shape:
        raise MismatchedCardinality(f"point sets {src.shape} vs {tgt.shape}")
    rotation, _, _ = _kabsch_rotation(src, tgt)
    translation = tgt.mean(axis=0) - rotation @ src.mean(axis=0)
    return rotation, translation


def _kabsch_rotation(src: np.ndarray, tgt: np.ndarray):
    """Rotation part of the Kabsch solution plus the SVD factors of the
    centered cross-covariance (needed by the backward pass)."""
    src_c = src - src.mean(axis=0)
    tgt_c = tgt - tgt.mean(axis=0)
    cov = src_c.T @ tgt_c
    u, sig, vt = np.linalg.svd(cov)
    if sig[0] <= 0.0 or sig[1] <= _RANK_TOL * sig[0]:
        raise DegenerateConfiguration(
            "centered covariance has rank < 2 (collinear or coincident points)"
        )
    d = np.sign(np.linalg.det(vt.T @ u.T))
    signs = np.array([1.0, 1.0, d])
    rotation = (vt.T * signs) @ u.T
    return rotation, (u, sig, vt), signs


def apply_transform(t: RigidTransform, pts: CorrespondenceSet, frame: Frame | None = None) -> CorrespondenceSet:
    """Map every point to rotation @ p + translation, preserving ordering."""
    out = pts.points @ t.rotation.T + t.translation
    return pts.with_points(out, frame=frame)


def procrustes_backward(
    source: CorrespondenceSet | np.ndarray,
    target: CorrespondenceSet | np.ndarray,
    upstream_gradient: np.ndarray,
) -> np.ndarray:
    """Gradient of the aligned output w.r.t. the source points.

    The aligned output is y_m = R x_m + tbar where x_m are the centered
    source points, tbar the target centroid, and R the Kabsch rotation of
    the centered covariance H = X^T Z.  Differentiating R through the SVD
    of H gives, for each singular-value pair (i, j):

        omega_U[i,j] = (s_j dP[i,j] + s_i dP[j,i]) / (s_j^2 - s_i^2)
        omega_V[i,j] = (s_i dP[i,j] + s_j dP[j,i]) / (s_j^2 - s_i^2)

    with dP = U^T dH V, which is transposed here into a backward rule for
    dL/dH.  Raises NearDegenerateSpectrum when two singular values are
    closer than SPECTRUM_GAP_TOL; callers should then fall back to the
    detached-transform gradient upstream_gradient @ R.
    """
    src = source.points if isinstance(source, CorrespondenceSet) else np.asarray(source, dtype=float)
    tgt = target.points if isinstance(target, CorrespondenceSet) else np.asarray(target, dtype=float)
    grad_out = np.asarray(upstream_gradient, dtype=float)
    if src.shape != tgt.shape or grad_out.shape != src.shape:
        raise MismatchedCardinality(
            f"shapes disagree: source {src.shape}, target {tgt.shape}, upstream {grad_out.shape}"
        )

    rotation, (u, sig, vt), signs = _kabsch_rotation(src, tgt)
    gaps = [abs(sig[0] - sig[1]), abs(sig[0] - sig[2]), abs(sig[1] - sig[2])]
    if min(gaps) < SPECTRUM_GAP_TOL:
        raise NearDegenerateSpectrum(
            f"singular value gap {min(gaps):.3e} below {SPECTRUM_GAP_TOL:.0e}"
        )

    x_c = src - src.mean(axis=0)
    z_c = tgt - tgt.mean(axis=0)
    v = vt.T

    # dL/dR from y = X R^T + 1 tbar^T (tbar does not depend on the source).
    grad_rot = grad_out.T @ x_c  # (3, 3)

    # Transpose the SVD differential: R = V D U^T with D = diag(signs)
    # constant, so dR = V (omega_V D - D omega_U) U^T.
    w_hat = v.T @ grad_rot @ u
    wd = w_hat * signs[np.newaxis, :]  # w_hat @ D
    dw = signs[:, np.newaxis] * w_hat  # D @ w_hat
    a_skew = wd - wd.T
    b_skew = dw - dw.T

    grad_p = np.zeros((3, 3))
    for i in range(3):
        for j in range(i + 1, 3):
            denom = sig[j] ** 2 - sig[i] ** 2
            grad_p[i, j] = (a_skew[i, j] * sig[i] - b_skew[i, j] * sig[j]) / denom
            grad_p[j, i] = (a_skew[i, j] * sig[j] - b_skew[i, j] * sig[i]) / denom
    grad_cov = u @ grad_p @ v.T

    # Direct path (R fixed) plus the path through H = X^T Z, then back
    # through the centering projector I - 11^T / M.
    grad_x = grad_out @ rotation + z_c @ grad_cov.T
    return grad_x - grad_x.mean(axis=0)


def detached_transform_gradient(rotation: np.ndarray, upstream_gradient: np.ndarray) -> np.ndarray:
    """Gradient of y = R s + t w.r.t. s with the transform held constant."""
    return np.asarray(upstream_gradient, dtype=float) @ rotation


def center_at(template_local: CorrespondenceSet, center: np.ndarray) -> CorrespondenceSet:
    """Translate an origin-centered template to the given center."""
    c = np.linalg.norm(template_local.centroid())
    if c > 1e-6:
        raise ValueError(f"template is not centered at the origin (centroid norm {c:.2e})")
    return template_local.with_points(template_local.points + np.asarray(center, dtype=float))


@dataclass
class MedoidResult:
    index: int
    distances: np.ndarray = field(repr=False)  # per-shape L2 distance to the mean mask


def select_medoid(masks: list[np.ndarray]) -> MedoidResult:
    """Index of the cohort shape nearest to the cohort's average segmentation.

    Each binary mask is translated (integer voxel shift, zero fill) so its
    centroid sits at the grid center, the voxelwise mean mask is computed,
    and the shape minimizing the L2 distance to that mean wins.  No
    rotational pre-alignment is applied.
    """
    if len(masks) == 0:
        raise EmptyCohort("need at least one shape to pick a medoid")
    dims = np.asarray(masks[0].shape)
    centered = []
    for i, mask in enumerate(masks):
        mask = np.asarray(mask)
        if mask.shape != tuple(dims):
            raise ValueError(f"mask {i} has shape {mask.shape}, expected {tuple(dims)}")
        fg = np.argwhere(mask > 0)
        if fg.size == 0:
            raise EmptyMask(f"mask {i} has no foreground voxels")
        shift = np.round((dims - 1) / 2.0 - fg.mean(axis=0)).astype(int)
        centered.append(_integer_shift(mask.astype(float), shift))
    mean_mask = np.mean(centered, axis=0)
    distances = np.array([np.linalg.norm(m - mean_mask) for m in centered])
    return MedoidResult(index=int(np.argmin(distances)), distances=distances)


def _integer_shift(vol: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """Shift a volume by integer voxels, filling with zeros (no wraparound)."""
    out = np.zeros_like(vol)
    src_slices, dst_slices = [], []
    for axis, s in enumerate(shift):
        n = vol.shape[axis]
        if abs(s) >= n:
            return out
        if s >= 0:
            src_slices.append(slice(0, n - s))
            dst_slices.append(slice(s, n))
        else:
            src_slices.append(slice(-s, n))
            dst_slices.append(slice(0, n + s))
    out[tuple(dst_slices)] = vol[tuple(src_slices)]
    return out


def convex_hull_mesh(points: np.ndarray) -> TriangleMesh:
    """Triangulate a point set in convex position into a surface mesh."""
    from scipy.spatial import ConvexHull

    hull = ConvexHull(np.asarray(points, dtype=float))
    return TriangleMesh(vertices=np.asarray(points, dtype=float), faces=hull.simplices)


def template_from_cohort(
    masks: list[np.ndarray],
    local_sets: list[CorrespondenceSet],
    world_sets: list[CorrespondenceSet],
) -> tuple[int, TemplateShape]:
    """Pick the medoid sample and package it as the anatomy's template.

    The medoid's local correspondences are re-centered to the origin; its
    world correspondences become the alignment target, and the template
    surface is the convex hull of those world points (valid for the convex
    shapes this package generates; supply your own mesh otherwise).
    """
    if not (len(masks) == len(local_sets) == len(world_sets)):
        raise ValueError("masks, local_sets, world_sets must have equal length")
    medoid = select_medoid(masks)
    loc = local_sets[medoid.index]
    world = world_sets[medoid.index]
    local_template = CorrespondenceSet(
        loc.points - loc.centroid(), Frame.LOCAL, loc.anatomy
    )
    template = TemplateShape(
        anatomy=loc.anatomy,
        local_template=local_template,
        world_template=world,
        surface_mesh=convex_hull_mesh(world.points),
    )
    return medoid.index, template
