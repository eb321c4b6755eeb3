import numpy as np
import pytest

from polarsplat import core, synth
from polarsplat.errors import ConfigError

import oracles


def _view(scene=None, w=64):
    scene = scene or synth.SceneSpec()
    cam = synth.look_at_camera((0.0, -4.0, 1.0), (0.0, 0.0, 0.0), width=w, height=w, fov_deg=40)
    return synth.render_view(scene, cam)


def test_sphere_depth_matches_ray_intersection():
    v = _view()
    cam = v.camera
    fg = v.foreground
    assert 0.2 < fg.mean() < 0.6
    P = cam.to_world(core.depth_to_points(cam, v.gt_depth))
    r = np.linalg.norm(P[fg], axis=1)
    np.testing.assert_allclose(r, 1.0, atol=1e-9)
    np.testing.assert_allclose(P[fg], v.world_points[fg], atol=1e-9)


def test_normals_face_the_camera_and_are_radial():
    v = _view()
    fg = v.foreground
    rays = core.view_rays(v.camera)
    assert np.all(np.sum(v.gt_normal[fg] * rays[fg], -1) >= -1e-12)
    n_world = -(v.gt_normal[fg] @ v.camera.R)
    np.testing.assert_allclose(n_world, v.world_points[fg], atol=1e-9)


def test_angle_images_reproduce_gt_polarization():
    v = _view(synth.SceneSpec(texture=0.3))
    pm = core.aolp_dolp(core.stokes_from_angles(v.capture))
    m = v.foreground & (v.gt_dolp > 1e-3) & ~v.overexposed_mask
    dphi = np.angle(np.exp(2j * (pm.aolp[m] - v.gt_aolp[m]))) / 2
    assert np.abs(dphi).max() < 1e-9
    np.testing.assert_allclose(pm.dolp[m], v.gt_dolp[m], atol=1e-9)


def test_diffuse_aolp_is_azimuth_mod_pi():
    v = _view()
    m = v.foreground & (v.reflect_type == 0)
    np.testing.assert_allclose(v.gt_aolp[m], np.mod(v.gt_azimuth[m], np.pi), atol=1e-12)


def test_highlight_scene_has_specular_and_overexposed_pixels():
    scene = synth.SceneSpec(specular_strength=1.0)
    cam = oracles.oblique_highlight_camera(scene, 30.0, 96)
    v = synth.render_view(scene, cam)
    assert v.specular_mask.sum() > 5
    assert v.overexposed_mask.sum() > 0
    m = v.reflect_type == 1
    np.testing.assert_allclose(v.gt_aolp[m], np.mod(v.gt_azimuth[m] + np.pi / 2, np.pi), atol=1e-12)
    # the diffuse ground truth never includes the highlight
    assert v.gt_diffuse.max() <= max(scene.albedo) + 1e-12


def test_plane_normal_and_depth():
    scene = synth.SceneSpec(shape="plane", extent=2.0)
    cam = synth.look_at_camera((0.0, 0.0, 3.0), (0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0))
    v = synth.render_view(scene, cam)
    assert v.foreground.all()
    np.testing.assert_allclose(v.gt_depth[v.camera.height // 2, v.camera.width // 2], 3.0,
                               rtol=1e-3)
    np.testing.assert_allclose(v.gt_normal[64, 64], [0, 0, 1], atol=1e-2)


def test_supershape_points_lie_on_surface():
    scene = synth.SceneSpec(shape="supershape")
    v = _view(scene, w=48)
    P = v.world_points[v.foreground]
    assert len(P) > 50
    f = synth._supershape_field(scene, P)
    assert np.abs(f).max() < 1e-6


def test_render_is_deterministic():
    a, b = _view(synth.SceneSpec(texture=0.5)), _view(synth.SceneSpec(texture=0.5))
    np.testing.assert_array_equal(a.capture.images, b.capture.images)


def test_ring_cameras_look_at_center():
    cams = synth.make_camera_ring(6, 4.0, 0.3)
    for c in cams:
        np.testing.assert_allclose(np.linalg.norm(c.center), 4.0)
        uv, z = core.project_point(c, np.zeros(3))
        np.testing.assert_allclose(uv, [c.cx, c.cy], atol=1e-9)
    with pytest.raises(ConfigError):
        synth.make_camera_ring(1, 4.0, 0.0)


def test_corrupt_depth_holes_and_noise():
    depth = np.zeros((10, 10))
    depth[2:8, 2:8] = 2.0
    out = synth.corrupt_depth(depth, 0.05, 0.25, seed=0)
    assert (out[2:8, 2:8] == 0).sum() == 9
    ok = out > 0
    assert np.all(np.abs(out[ok] / 2.0 - 1) <= 0.05)
    np.testing.assert_array_equal(out[:2], 0.0)
    np.testing.assert_array_equal(out, synth.corrupt_depth(depth, 0.05, 0.25, seed=0))
    with pytest.raises(ConfigError):
        synth.corrupt_depth(depth, -0.1, 0.0, 0)


def test_corrupt_normal_tilt_is_bounded():
    n = np.zeros((20, 20, 3))
    n[..., 2] = 1.0
    out = synth.corrupt_normal(n, 15.0, seed=1)
    ang = np.degrees(np.arccos(np.clip(out[..., 2], -1, 1)))
    assert ang.max() <= 15.0 + 1e-9
    assert ang.max() > 10.0
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), 1.0)


def test_surface_samples_and_normals():
    for shape in synth.SHAPES:
        scene = synth.SceneSpec(shape=shape)
        P, N = synth.sample_surface(scene, 500, seed=0)
        lo, hi = synth.scene_bounds(scene)
        assert np.all(P >= lo - 1e-9) and np.all(P <= hi + 1e-9)
        np.testing.assert_allclose(np.linalg.norm(N, axis=1), 1.0)
    P, N = synth.sample_surface(synth.SceneSpec(), 100)
    np.testing.assert_allclose(N, P, atol=1e-12)


def test_scene_spec_validation_and_dict_round_trip():
    s = synth.SceneSpec(shape="supershape", texture=0.2)
    assert synth.SceneSpec.from_dict(s.to_dict()) == s
    with pytest.raises(ConfigError):
        synth.SceneSpec(shape="cube")
    with pytest.raises(ConfigError):
        synth.SceneSpec(specular_strength=1.5)
    with pytest.raises(ConfigError):
        synth.SceneSpec.from_dict({"colour": 1})
