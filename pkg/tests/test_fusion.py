import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from polarsplat import core, fusion, synth
from polarsplat.errors import ConfigError, DimensionError


def _sphere_volume(r=0.5, vs=0.02, trunc=0.06):
    vol = fusion.TsdfVolume.from_bounds([-r] * 3, [r] * 3, vs, trunc)
    idx = np.stack(np.meshgrid(*[np.arange(d) for d in vol.dims], indexing="ij"), axis=-1)
    P = vol.world_coords(idx)
    vol.tsdf[:] = np.clip((np.linalg.norm(P, axis=-1) - r) / trunc, -1, 1)
    vol.weight[:] = 1.0
    return vol


def test_fronto_parallel_plane_zero_crossing():
    cam = core.CameraModel(50.0, 50.0, 15.5, 15.5, 32, 32)  # looks down +z from the origin
    vol = fusion.TsdfVolume.from_bounds([-0.1, -0.1, 1.8], [0.1, 0.1, 2.2], 0.01, 0.05)
    fusion.integrate_depth(vol, np.full((32, 32), 2.0), cam)
    i, j = vol.dims[0] // 2, vol.dims[1] // 2
    col = vol.tsdf[i, j]
    z = vol.world_coords(np.column_stack([np.full(vol.dims[2], i), np.full(vol.dims[2], j),
                                          np.arange(vol.dims[2])]))[:, 2]
    obs = vol.weight[i, j] > 0
    np.testing.assert_allclose(col[obs], np.clip((2.0 - z[obs]) / 0.05, -1, 1), atol=1e-6)
    # nothing is written more than one truncation behind the surface
    assert not obs[z > 2.0 + 0.05 + 1e-9].any()


def test_integration_is_idempotent_for_repeated_maps():
    cam = core.CameraModel(50.0, 50.0, 15.5, 15.5, 32, 32)
    vol = fusion.TsdfVolume.from_bounds([-0.1, -0.1, 1.8], [0.1, 0.1, 2.2], 0.01, 0.05)
    fusion.integrate_depth(vol, np.full((32, 32), 2.0), cam)
    once = vol.tsdf.copy()
    fusion.integrate_depth(vol, np.full((32, 32), 2.0), cam)
    np.testing.assert_array_equal(vol.tsdf, once)
    assert set(np.unique(vol.weight)) <= {0.0, 2.0}


@settings(max_examples=15, deadline=None)
@given(st.lists(st.floats(1.9, 2.1), min_size=1, max_size=4))
def test_weights_never_decrease(depths):
    cam = core.CameraModel(50.0, 50.0, 7.5, 7.5, 16, 16)
    vol = fusion.TsdfVolume.from_bounds([-0.05, -0.05, 1.8], [0.05, 0.05, 2.2], 0.02, 0.06)
    prev = vol.weight.copy()
    for d in depths:
        fusion.integrate_depth(vol, np.full((16, 16), d), cam)
        assert np.all(vol.weight >= prev)
        assert np.all(np.abs(vol.tsdf) <= 1.0)
        prev = vol.weight.copy()


def test_depth_edges_are_not_integrated():
    cam = core.CameraModel(50.0, 50.0, 15.5, 15.5, 32, 32)
    depth = np.full((32, 32), 2.0)
    depth[:, 16:] = 3.0
    vol = fusion.TsdfVolume.from_bounds([-0.2, -0.2, 1.8], [0.2, 0.2, 3.2], 0.01, 0.05)
    fusion.integrate_depth(vol, depth, cam)
    # voxels projecting onto columns 15/16 see a jump and stay unobserved
    P = vol.world_coords(np.argwhere(vol.weight > 0))
    u = np.floor(50.0 * P[:, 0] / P[:, 2] + 15.5 + 0.5)
    assert not np.isin(u, [15, 16]).any()


def test_integrate_shape_mismatch():
    cam = core.CameraModel(50.0, 50.0, 15.5, 15.5, 32, 32)
    vol = fusion.TsdfVolume.from_bounds([0, 0, 0], [1, 1, 1], 0.1, 0.2)
    with pytest.raises(DimensionError):
        fusion.integrate_depth(vol, np.ones((8, 8)), cam)
    with pytest.raises(ConfigError):
        fusion.TsdfVolume.from_bounds([0, 0, 0], [1, 1, 1], 0.1, 0.05)


def test_analytic_sphere_mesh():
    vol = _sphere_volume()
    mesh = fusion.extract_mesh(vol)
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert np.sqrt(np.mean((r - 0.5) ** 2)) < 0.5 * vol.voxel_size
    assert mesh.euler_characteristic() == 2
    # normals face free space
    assert np.all(np.sum(mesh.normals * mesh.vertices, axis=1) > 0)
    P, N = fusion.sample_surface(mesh, 2000)
    assert np.mean(np.sum(N * P, axis=1) > 0) > 0.99


def test_negated_volume_flips_orientation():
    vol = _sphere_volume()
    vol.tsdf *= -1
    mesh = fusion.extract_mesh(vol)
    assert np.all(np.sum(mesh.normals * mesh.vertices, axis=1) < 0)
    P, N = fusion.sample_surface(mesh, 2000)
    assert np.mean(np.sum(N * P, axis=1) < 0) > 0.99


def test_no_crossing_gives_empty_mesh():
    vol = _sphere_volume()
    vol.tsdf[:] = 0.5
    assert fusion.extract_mesh(vol).is_empty
    vol.weight[:] = 0
    assert fusion.extract_mesh(vol).is_empty


def test_unobserved_cells_produce_no_faces():
    vol = _sphere_volume()
    vol.weight[: vol.dims[0] // 2] = 0.0
    mesh = fusion.extract_mesh(vol)
    x_cut = vol.world_coords([vol.dims[0] // 2, 0, 0])[0]
    assert mesh.vertices[:, 0].min() >= x_cut - 1e-9
    assert not mesh.is_empty


def test_mesh_ply_round_trip(tmp_path):
    mesh = fusion.extract_mesh(_sphere_volume())
    fusion.save_mesh(tmp_path / "m.ply", mesh)
    back = fusion.load_mesh(tmp_path / "m.ply")
    np.testing.assert_array_equal(back.triangles, mesh.triangles)
    np.testing.assert_allclose(back.vertices, mesh.vertices, atol=1e-6)


def test_remove_degenerate_drops_zero_area():
    m = fusion.TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0.0]]),
                            np.array([[0, 1, 2], [0, 1, 3]]))
    out = fusion.remove_degenerate(m)
    assert len(out) == 1 and len(out.vertices) == 3


def test_chamfer_examples():
    a = np.array([[0.0, 0, 0]])
    assert fusion.chamfer_distance(a, a + [0.3, 0, 0]) == pytest.approx(0.3)
    mesh = fusion.extract_mesh(_sphere_volume())
    assert fusion.chamfer_distance(mesh, mesh, n_samples=5000) == 0.0
    with pytest.raises(DimensionError):
        fusion.chamfer_distance(np.zeros((0, 3)), a)


def test_chamfer_of_concentric_spheres():
    scene = synth.SceneSpec()
    P, _ = synth.sample_surface(scene, 100_000, seed=1)
    Q, _ = synth.sample_surface(scene, 100_000, seed=2)
    delta = 0.05
    assert fusion.chamfer_distance(P, (1 + delta) * P) == pytest.approx(delta, rel=1e-9)
    assert fusion.chamfer_distance(P, (1 + delta) * Q) == pytest.approx(delta, rel=0.05)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_chamfer_symmetry_and_rigid_invariance(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(200, 3))
    b = rng.normal(size=(150, 3))
    assert fusion.chamfer_distance(a, b) == fusion.chamfer_distance(b, a)
    R = Rotation.random(random_state=seed).as_matrix()
    t = rng.normal(size=3)
    moved = fusion.chamfer_distance(a @ R.T + t, b @ R.T + t)
    assert moved == pytest.approx(fusion.chamfer_distance(a, b), rel=1e-9)


def test_normal_mae_examples():
    gt = np.array([[0, 0, 1.0], [0, 0, 1.0]])
    pred = np.array([[0, 0, 2.0], [1.0, 0, 0]])
    assert fusion.normal_mae(pred, gt) == pytest.approx(45.0)
    assert fusion.normal_mae(pred, gt, [True, False]) == pytest.approx(0.0)
    assert fusion.normal_mae(-gt, gt) == pytest.approx(180.0)
    assert fusion.normal_mae(pred, gt, [False, False]) == 0.0


def test_fused_ground_truth_depth_recovers_the_sphere():
    cams = (synth.make_camera_ring(8, 4.0, 0.6, width=96, height=96, fov_deg=35)
            + synth.make_camera_ring(8, 4.0, -0.6, width=96, height=96, fov_deg=35,
                                     azimuth_offset=np.pi / 8))
    views = synth.render_views(synth.SceneSpec(), cams)
    vol = fusion.fuse_depth_maps([v.gt_depth for v in views], cams, [-1] * 3, [1] * 3,
                                 voxel_size=0.025, truncation=0.1)
    mesh = fusion.extract_mesh(vol)
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert np.abs(r - 1).mean() < 0.5 * 0.025
    P, _ = synth.sample_surface(synth.SceneSpec(), 20_000)
    assert fusion.chamfer_distance(mesh, P, n_samples=20_000) < 0.025
    assert fusion.normal_mae(mesh.normals, mesh.vertices) < 5.0
