import math

import numpy as np
import pytest
import torch
from scipy.spatial import ConvexHull
from scipy.spatial.transform import Rotation

from shapedet.errors import ConfigMismatch, EmptyMesh, MismatchedCardinality, SingularTps
from shapedet.geometry import CorrespondenceSet, Frame, TemplateShape, TriangleMesh
from shapedet.metrics import (
    EVAL_COLUMNS,
    evaluate,
    point_to_mesh_distances,
    reconstruct_mesh,
    rmse,
    rmse_points,
    sample_surface,
    surface_to_surface,
)
from shapedet.model import Model, ModelConfig
from shapedet.synth import EllipsoidClassSpec, SyntheticSpec, fibonacci_sphere, generate_dataset

torch.set_num_threads(1)


# -- rmse --


def test_rmse_single_point_oracle():
    pred = np.array([[3.0, 0.0, 4.0]])
    gt = np.zeros((1, 3))
    assert rmse_points(pred, gt) == pytest.approx(math.sqrt(25.0 / 3.0), abs=1e-12)


def test_rmse_zero_on_identical():
    pts = np.random.default_rng(0).normal(size=(17, 3))
    assert rmse_points(pts, pts.copy()) == 0.0


def test_rmse_symmetric():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(9, 3))
    b = rng.normal(size=(9, 3))
    assert rmse_points(a, b) == pytest.approx(rmse_points(b, a), abs=1e-15)


def test_rmse_averages_over_all_coordinates():
    # one coordinate off by 6 among 4 points -> sqrt(36 / 12)
    pred = np.zeros((4, 3))
    pred[2, 1] = 6.0
    assert rmse_points(pred, np.zeros((4, 3))) == pytest.approx(math.sqrt(3.0), abs=1e-12)


def test_rmse_rejects_mismatched_shapes():
    with pytest.raises(MismatchedCardinality):
        rmse_points(np.zeros((4, 3)), np.zeros((5, 3)))


def test_rmse_accepts_correspondence_sets():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(8, 3))
    b = rng.normal(size=(8, 3))
    ca = CorrespondenceSet(a, Frame.WORLD, 0)
    cb = CorrespondenceSet(b, Frame.WORLD, 0)
    assert rmse(ca, cb) == pytest.approx(rmse_points(a, b), abs=1e-15)


# -- mesh warping --


def ellipsoid_template(num_points=64, radii=(9.0, 6.0, 4.0), anatomy=0):
    dirs = fibonacci_sphere(num_points)
    pts = dirs * np.asarray(radii, dtype=float)
    pts = pts - pts.mean(axis=0)
    faces = ConvexHull(dirs).simplices
    return TemplateShape(
        anatomy=anatomy,
        local_template=CorrespondenceSet(pts.copy(), Frame.LOCAL, anatomy),
        world_template=CorrespondenceSet(pts.copy(), Frame.WORLD, anatomy),
        surface_mesh=TriangleMesh(pts.copy(), faces),
    )


def test_reconstruct_identity_reproduces_template():
    tmpl = ellipsoid_template()
    same = CorrespondenceSet(tmpl.world_template.points.copy(), Frame.WORLD, 0)
    mesh = reconstruct_mesh(same, tmpl)
    assert np.abs(mesh.vertices - tmpl.surface_mesh.vertices).max() < 1e-9
    assert np.array_equal(mesh.faces, tmpl.surface_mesh.faces)


def test_reconstruct_reproduces_rigid_motion():
    tmpl = ellipsoid_template()
    rotation = Rotation.from_euler("xyz", [0.3, -0.5, 0.2]).as_matrix()
    translation = np.array([12.0, -3.0, 7.0])
    moved = tmpl.world_template.points @ rotation.T + translation
    mesh = reconstruct_mesh(CorrespondenceSet(moved, Frame.WORLD, 0), tmpl)
    expected = tmpl.surface_mesh.vertices @ rotation.T + translation
    assert np.abs(mesh.vertices - expected).max() < 1e-6


def test_reconstruct_reproduces_general_affine():
    # a degree-1 polynomial tail makes the warp exact on any affine map
    tmpl = ellipsoid_template()
    affine = Rotation.from_euler("xyz", [0.1, 0.7, -0.4]).as_matrix() @ np.diag(
        [1.1, 0.9, 1.25]
    )
    translation = np.array([4.0, -2.0, 1.0])
    moved = tmpl.world_template.points @ affine.T + translation
    mesh = reconstruct_mesh(CorrespondenceSet(moved, Frame.WORLD, 0), tmpl)
    expected = tmpl.surface_mesh.vertices @ affine.T + translation
    assert np.abs(mesh.vertices - expected).max() < 1e-6


def test_reconstruct_uses_local_template_for_local_frame():
    dirs = fibonacci_sphere(48)
    base = dirs * np.array([5.0, 7.0, 3.0])
    base = base - base.mean(axis=0)
    rotation = Rotation.from_euler("xyz", [0.4, 0.1, -0.2]).as_matrix()
    world = base @ rotation.T
    world = world - world.mean(axis=0)
    tmpl = TemplateShape(
        anatomy=0,
        local_template=CorrespondenceSet(base.copy(), Frame.LOCAL, 0),
        world_template=CorrespondenceSet(world.copy(), Frame.WORLD, 0),
        surface_mesh=TriangleMesh(world.copy(), ConvexHull(dirs).simplices),
    )
    # identical-to-local input must produce zero displacement of the mesh
    mesh = reconstruct_mesh(CorrespondenceSet(base.copy(), Frame.LOCAL, 0), tmpl)
    assert np.abs(mesh.vertices - tmpl.surface_mesh.vertices).max() < 1e-9


def test_reconstruct_rejects_coincident_control_points():
    tmpl = ellipsoid_template()
    dup = tmpl.world_template.points.copy()
    dup[5] = dup[0]
    dup = dup - dup.mean(axis=0)
    bad = TemplateShape(
        anatomy=0,
        local_template=CorrespondenceSet(dup.copy(), Frame.LOCAL, 0),
        world_template=CorrespondenceSet(dup.copy(), Frame.WORLD, 0),
        surface_mesh=tmpl.surface_mesh,
    )
    with pytest.raises(SingularTps):
        reconstruct_mesh(CorrespondenceSet(dup.copy(), Frame.WORLD, 0), bad)


def test_reconstruct_rejects_wrong_cardinality():
    tmpl = ellipsoid_template(num_points=64)
    short = CorrespondenceSet(tmpl.world_template.points[:32].copy(), Frame.WORLD, 0)
    with pytest.raises(MismatchedCardinality):
        reconstruct_mesh(short, tmpl)


# -- point-to-surface distance --


def right_triangle_mesh():
    # fourth vertex is unreferenced padding (meshes require >= 4 vertices)
    vertices = np.array(
        [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [50.0, 50.0, 50.0]]
    )
    return TriangleMesh(vertices, np.array([[0, 1, 2]]))


def test_point_to_triangle_hand_oracles():
    mesh = right_triangle_mesh()
    points = np.array(
        [
            [0.25, 0.25, 1.0],  # face region, straight above
            [-1.0, -1.0, 0.0],  # vertex a
            [2.0, 0.0, 0.0],  # vertex b
            [0.0, 3.0, 0.0],  # vertex c
            [0.5, -1.0, 0.0],  # edge ab
            [1.0, 1.0, 0.0],  # edge bc midpoint
            [0.5, 0.25, -2.0],  # face region, below
            [0.25, 0.25, 0.0],  # on the surface
        ]
    )
    expected = np.array(
        [1.0, math.sqrt(2.0), 1.0, 2.0, 1.0, math.sqrt(0.5), 2.0, 0.0]
    )
    got = point_to_mesh_distances(points, mesh)
    assert np.abs(got - expected).max() < 1e-12


def test_point_to_mesh_picks_nearest_of_several():
    vertices = np.array(
        [
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [10.0, 0.0, 0.0],
            [11.0, 0.0, 0.0],
            [10.0, 1.0, 0.0],
        ]
    )
    faces = np.array([[0, 1, 2], [3, 4, 5]])
    mesh = TriangleMesh(vertices, faces)
    got = point_to_mesh_distances(np.array([[10.2, 0.2, 0.5], [0.2, 0.2, 0.3]]), mesh)
    assert got == pytest.approx([0.5, 0.3], abs=1e-12)


def test_sample_surface_points_lie_on_mesh():
    tmpl = ellipsoid_template()
    mesh = tmpl.surface_mesh
    pts = sample_surface(mesh, 500, np.random.default_rng(3))
    assert pts.shape == (500, 3)
    assert point_to_mesh_distances(pts, mesh).max() < 1e-9


def test_sample_surface_deterministic_under_seed():
    mesh = ellipsoid_template().surface_mesh
    a = sample_surface(mesh, 200, np.random.default_rng(11))
    b = sample_surface(mesh, 200, np.random.default_rng(11))
    assert np.array_equal(a, b)


def test_sample_surface_rejects_empty_mesh():
    empty = TriangleMesh(np.zeros((4, 3)), np.zeros((0, 3), dtype=int))
    with pytest.raises(EmptyMesh):
        sample_surface(empty, 10, np.random.default_rng(0))


def test_zero_area_mesh_rejected():
    # collinear vertices: faces exist but total area is zero
    vertices = np.array(
        [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]]
    )
    degenerate = TriangleMesh(vertices, np.array([[0, 1, 2]]))
    with pytest.raises(EmptyMesh):
        sample_surface(degenerate, 10, np.random.default_rng(0))


# -- symmetric surface distance --


def sphere_mesh(radius, num_points=200):
    dirs = fibonacci_sphere(num_points)
    return TriangleMesh(radius * dirs, ConvexHull(dirs).simplices)


def test_concentric_spheres_distance():
    mean, peak = surface_to_surface(sphere_mesh(10.0), sphere_mesh(12.0))
    assert mean == pytest.approx(2.0, abs=0.05)
    assert peak == pytest.approx(2.0, abs=0.1)


def test_surface_distance_order_insensitive():
    ab = surface_to_surface(sphere_mesh(10.0), sphere_mesh(12.0))
    ba = surface_to_surface(sphere_mesh(12.0), sphere_mesh(10.0))
    assert ab[0] == pytest.approx(ba[0], abs=0.01)


def test_identical_meshes_distance_zero():
    mesh = sphere_mesh(10.0)
    mean, peak = surface_to_surface(mesh, mesh)
    assert mean < 1e-12
    assert peak < 1e-12


def test_surface_distance_deterministic():
    a = surface_to_surface(sphere_mesh(10.0), sphere_mesh(12.0), samples=500, seed=4)
    b = surface_to_surface(sphere_mesh(10.0), sphere_mesh(12.0), samples=500, seed=4)
    assert a == b


# -- dataset evaluation --


def eval_fixture():
    classes = [
        EllipsoidClassSpec((6.0, 4.0, 5.0), 0.1, (11, 11, 11), (21, 21, 21), 0.3, 1.0),
        EllipsoidClassSpec((4.0, 6.0, 4.0), 0.1, (11, 11, 11), (21, 21, 21), 0.3, 2.0),
    ]
    spec = SyntheticSpec(dims=(32, 32, 32), num_points=32, classes=classes, seed=5)
    records, templates = generate_dataset(spec, 2)
    config = ModelConfig(
        num_classes=2,
        num_points=32,
        stage_channels=(4, 8, 16, 32),
        pyramid_width=8,
        hidden_width=16,
    )
    torch.manual_seed(0)
    model = Model(config)
    return records, templates, model


def test_evaluate_counts_missed_detections():
    records, templates, model = eval_fixture()
    with torch.no_grad():
        model.detection.heat.weight.zero_()
        model.detection.heat.bias.fill_(-5.0)  # sigmoid ~ 0.007, under threshold
    report = evaluate(model, records, templates, compute_s2s=False)
    assert report.missed_detections == 4
    assert all(row["missed"] == 1 for row in report.rows)
    assert all(row["local_rmse"] is None for row in report.rows)
    assert report.aggregates["overall"]["count"] == 0
    assert math.isnan(report.aggregates["overall"]["world_rmse"])


def test_evaluate_reports_metrics_when_detected():
    records, templates, model = eval_fixture()
    with torch.no_grad():
        model.detection.heat.bias.fill_(5.0)  # sigmoid ~ 0.99, every class fires
    report = evaluate(model, records, templates, s2s_samples=500)
    assert report.missed_detections == 0
    assert len(report.rows) == 4
    for row in report.rows:
        assert row["missed"] == 0
        for key in ("local_rmse", "world_rmse", "center_err", "radius_err", "s2s_mean", "s2s_max"):
            assert np.isfinite(row[key])
    assert set(EVAL_COLUMNS) == set(report.rows[0]) | {"sample", "anatomy"}
    assert report.aggregates["overall"]["count"] == 4
    assert report.aggregates["0"]["count"] == 2
    assert report.aggregates["1"]["count"] == 2
    mean_world = np.mean([r["world_rmse"] for r in report.rows])
    assert report.aggregates["overall"]["world_rmse"] == pytest.approx(mean_world, abs=1e-12)


def test_evaluate_rejects_class_count_mismatch():
    records, templates, model = eval_fixture()
    with pytest.raises(ConfigMismatch):
        evaluate(model, records, templates[:1])


def test_evaluate_rejects_point_count_mismatch():
    records, templates, model = eval_fixture()
    small = ellipsoid_template(num_points=16, anatomy=0)
    with pytest.raises(ConfigMismatch):
        evaluate(model, records, [small, templates[1]])
