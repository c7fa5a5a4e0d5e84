"""Evaluation metrics: coordinate RMSE, template-mesh warping, and sampled
symmetric surface-to-surface distance."""

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import RBFInterpolator
from scipy.spatial import cKDTree

from .errors import ConfigMismatch, EmptyMesh, MismatchedCardinality, SingularTps
from .geometry import CorrespondenceSet, Frame, TriangleMesh
from .model import infer_sample

DEFAULT_S2S_SAMPLES = 10000
DEFAULT_S2S_CANDIDATES = 64
COINCIDENT_POINT_TOL = 1e-9


def rmse_points(pred, gt):
    """Root mean squared error over all 3M coordinates."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise MismatchedCardinality(f"point sets {pred.shape} vs {gt.shape}")
    return float(np.sqrt(np.mean((pred - gt) ** 2)))


def rmse(pred, gt):
    """RMSE between two correspondence sets (per-dimension averaging)."""
    a = pred.points if isinstance(pred, CorrespondenceSet) else pred
    b = gt.points if isinstance(gt, CorrespondenceSet) else gt
    return rmse_points(a, b)


def reconstruct_mesh(correspondences, template):
    """Warp the template surface by a thin-plate-spline displacement field.

    The field is fitted from the template's correspondences (world or local,
    by the input's frame) to the given correspondences; mesh connectivity is
    unchanged.
    """
    source = (
        template.local_template
        if correspondences.frame is Frame.LOCAL
        else template.world_template
    )
    if correspondences.num_points != source.num_points:
        raise MismatchedCardinality(
            f"{correspondences.num_points} correspondences vs "
            f"{source.num_points} template points"
        )
    # The dense solve does not reliably detect exact duplicates (partial
    # pivoting can still produce a finite garbage solution), so reject
    # coincident control points up front.
    nearest, _ = cKDTree(source.points).query(source.points, k=2)
    if float(nearest[:, 1].min()) < COINCIDENT_POINT_TOL:
        raise SingularTps("coincident control points in the template")
    displacement = correspondences.points - source.points
    try:
        interp = RBFInterpolator(
            source.points, displacement, kernel="thin_plate_spline", degree=1, smoothing=0.0
        )
        warped = template.surface_mesh.vertices + interp(template.surface_mesh.vertices)
    except np.linalg.LinAlgError as exc:
        raise SingularTps(f"thin-plate-spline system is singular: {exc}") from exc
    return TriangleMesh(warped, template.surface_mesh.faces.copy())


def _triangle_areas(mesh):
    tri = mesh.vertices[mesh.faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    return 0.5 * np.linalg.norm(cross, axis=1)


def sample_surface(mesh, n, rng):
    """n area-weighted uniform samples on the mesh surface."""
    areas = _triangle_areas(mesh)
    total = areas.sum()
    if len(mesh.faces) == 0 or total <= 0.0:
        raise EmptyMesh("mesh has no positive-area faces")
    face_idx = rng.choice(len(areas), size=n, p=areas / total)
    tri = mesh.vertices[mesh.faces[face_idx]]
    u = rng.uniform(size=(n, 1))
    v = rng.uniform(size=(n, 1))
    flip = (u + v) > 1.0
    u = np.where(flip, 1.0 - u, u)
    v = np.where(flip, 1.0 - v, v)
    return tri[:, 0] + u * (tri[:, 1] - tri[:, 0]) + v * (tri[:, 2] - tri[:, 0])


def _closest_distance_to_triangles(points, tri):
    """Exact point-to-triangle distances.

    points: (P, 3); tri: (P, C, 3, 3) candidate triangles per point.
    Returns (P,) min distance over each point's candidates.
    """
    p = points[:, None, :]
    a, b, c = tri[:, :, 0], tri[:, :, 1], tri[:, :, 2]
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("pcd,pcd->pc", ab, ap)
    d2 = np.einsum("pcd,pcd->pc", ac, ap)
    bp = p - b
    d3 = np.einsum("pcd,pcd->pc", ab, bp)
    d4 = np.einsum("pcd,pcd->pc", ac, bp)
    cp = p - c
    d5 = np.einsum("pcd,pcd->pc", ab, cp)
    d6 = np.einsum("pcd,pcd->pc", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    eps = 1e-300
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / np.where(np.abs(d1 - d3) < eps, eps, d1 - d3)
        t_ac = d2 / np.where(np.abs(d2 - d6) < eps, eps, d2 - d6)
        bc_num = d4 - d3
        bc_den = bc_num + (d5 - d6)
        t_bc = bc_num / np.where(np.abs(bc_den) < eps, eps, bc_den)
        denom = va + vb + vc
        denom = np.where(np.abs(denom) < eps, eps, denom)
        v_in = vb / denom
        w_in = vc / denom
    on_a = (d1 <= 0) & (d2 <= 0)
    on_b = (d3 >= 0) & (d4 <= d3)
    on_c = (d6 >= 0) & (d5 <= d6)
    on_ab = ~on_a & ~on_b & (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    on_ac = ~on_a & ~on_c & (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    on_bc = ~on_b & ~on_c & (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    closest = a + v_in[..., None] * ab + w_in[..., None] * ac
    closest = np.where(on_bc[..., None], b + t_bc[..., None] * (c - b), closest)
    closest = np.where(on_ac[..., None], a + t_ac[..., None] * ac, closest)
    closest = np.where(on_ab[..., None], a + t_ab[..., None] * ab, closest)
    closest = np.where(on_c[..., None], c, closest)
    closest = np.where(on_b[..., None], b, closest)
    closest = np.where(on_a[..., None], a, closest)
    return np.linalg.norm(points[:, None, :] - closest, axis=2).min(axis=1)


def point_to_mesh_distances(points, mesh, candidates=DEFAULT_S2S_CANDIDATES):
    """Distance from each point to the mesh surface (candidate triangles
    found via a centroid spatial index, then measured exactly)."""
    if len(mesh.faces) == 0:
        raise EmptyMesh("mesh has no faces")
    tri = mesh.vertices[mesh.faces]
    centroids = tri.mean(axis=1)
    k = min(candidates, len(tri))
    _, idx = cKDTree(centroids).query(points, k=k)
    if k == 1:
        idx = idx[:, None]
    return _closest_distance_to_triangles(np.asarray(points, dtype=float), tri[idx])


def surface_to_surface(mesh_a, mesh_b, samples=DEFAULT_S2S_SAMPLES, seed=0,
                       candidates=DEFAULT_S2S_CANDIDATES):
    """Symmetric sampled surface distance: (mean of directed means, max of
    directed maxes)."""
    rng_a = np.random.default_rng([seed, 0])
    rng_b = np.random.default_rng([seed, 1])
    pts_a = sample_surface(mesh_a, samples, rng_a)
    pts_b = sample_surface(mesh_b, samples, rng_b)
    d_ab = point_to_mesh_distances(pts_a, mesh_b, candidates)
    d_ba = point_to_mesh_distances(pts_b, mesh_a, candidates)
    mean = 0.5 * (d_ab.mean() + d_ba.mean())
    peak = max(d_ab.max(), d_ba.max())
    return float(mean), float(peak)


EVAL_COLUMNS = (
    "sample",
    "anatomy",
    "local_rmse",
    "world_rmse",
    "center_err",
    "radius_err",
    "s2s_mean",
    "s2s_max",
    "missed",
)

_METRIC_KEYS = ("local_rmse", "world_rmse", "center_err", "radius_err", "s2s_mean", "s2s_max")


@dataclass
class EvalReport:
    rows: list  # one dict per (sample, anatomy)
    aggregates: dict  # "overall" plus str(anatomy) -> mean metrics
    missed_detections: int
    predictions: list = None  # (sample_id, {anatomy: (pred_world, gt_world)}) when kept


def _aggregate(rows):
    hit = [r for r in rows if not r["missed"]]
    out = {"count": len(hit)}
    for key in _METRIC_KEYS:
        values = [r[key] for r in hit if r[key] is not None]
        out[key] = float(np.mean(values)) if values else float("nan")
    return out


def evaluate(
    model,
    records,
    templates,
    presence_threshold=0.3,
    s2s_samples=DEFAULT_S2S_SAMPLES,
    s2s_seed=0,
    compute_s2s=True,
    keep_predictions=False,
):
    """Full inference + metrics over a dataset split.

    radius_err is the mean absolute per-axis radius error; s2s compares the
    meshes reconstructed from predicted and ground-truth world particles.
    Missed detections produce a row with missed=1 and no metric values, and
    are excluded from aggregates.
    """
    if model.config.num_classes != len(templates):
        raise ConfigMismatch(
            f"model has {model.config.num_classes} classes, bundle has {len(templates)}"
        )
    for template in templates:
        if template.num_points != model.config.num_points:
            raise ConfigMismatch(
                f"model predicts {model.config.num_points} points, template "
                f"{template.anatomy} has {template.num_points}"
            )
    rows = []
    missed_total = 0
    kept = [] if keep_predictions else None
    by_anatomy = {t.anatomy: t for t in templates}
    for record in records:
        predictions = infer_sample(model, record.volume, templates, presence_threshold)
        if keep_predictions:
            kept.append(
                (
                    record.sample_id,
                    {
                        k: (predictions[k].world, rec.world)
                        for k, rec in record.anatomies.items()
                        if k in predictions
                    },
                )
            )
        for k, rec in sorted(record.anatomies.items()):
            if k not in predictions:
                missed_total += 1
                rows.append(
                    {"sample": record.sample_id, "anatomy": k, "missed": 1}
                    | {key: None for key in _METRIC_KEYS}
                )
                continue
            pred = predictions[k]
            row = {
                "sample": record.sample_id,
                "anatomy": k,
                "missed": 0,
                "local_rmse": rmse(pred.local, rec.local),
                "world_rmse": rmse(pred.world, rec.world),
                "center_err": float(np.linalg.norm(pred.box.center - rec.box.center)),
                "radius_err": float(np.mean(np.abs(pred.box.radii - rec.box.radii))),
            }
            if compute_s2s:
                template = by_anatomy[k]
                pred_mesh = reconstruct_mesh(pred.world, template)
                gt_mesh = reconstruct_mesh(rec.world, template)
                s2s_mean, s2s_max = surface_to_surface(
                    pred_mesh, gt_mesh, samples=s2s_samples, seed=s2s_seed
                )
                row["s2s_mean"] = s2s_mean
                row["s2s_max"] = s2s_max
            else:
                row["s2s_mean"] = None
                row["s2s_max"] = None
            rows.append(row)
    aggregates = {"overall": _aggregate(rows)}
    for k in sorted(by_anatomy):
        aggregates[str(k)] = _aggregate([r for r in rows if r["anatomy"] == k])
    return EvalReport(
        rows=rows,
        aggregates=aggregates,
        missed_detections=missed_total,
        predictions=kept,
    )
