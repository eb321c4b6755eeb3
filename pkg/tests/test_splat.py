import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from polarsplat import core, splat
from polarsplat.correction import CorrectionConfig, ReflectiveMasks, reflective_loss
from polarsplat.synth import look_at_camera

import oracles


def _front_cam(w=32, h=32):
    # camera at the origin looking down +z (identity pose)
    return core.CameraModel(40.0, 40.0, (w - 1) / 2, (h - 1) / 2, w, h)


def _iso(mu, sigma, opacity, color):
    mu = np.atleast_2d(mu)
    n = len(mu)
    return splat.GaussianCloud.from_params(mu, np.tile([1.0, 0, 0, 0], (n, 1)),
                                           np.full((n, 3), sigma), np.full(n, opacity),
                                           np.atleast_2d(color))


def _hand_raster(lists, H=1, W=2, n=3):
    offsets = np.zeros(H * W + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(l) for l in lists])
    gid = np.array([g for l in lists for g, _ in l], dtype=np.int64)
    gval = np.array([v for l in lists for _, v in l], dtype=np.float64)
    return splat.Raster(H, W, offsets, gid, gval, np.arange(1.0, n + 1), np.tile([0, 0, 1.0], (n, 1)),
                        np.zeros((n, 3)), np.array([1.0, 1.0, 0.0, 0.0]))


def test_composite_matches_hand_blend():
    cloud = _iso(np.zeros((3, 3)), 0.1, 0.5, [[1, 0, 0], [0, 1, 0], [0, 0, 1]])
    cloud.opacity_logit[:] = splat._logit(np.array([0.5, 0.8, 0.25]))
    r = _hand_raster([[(0, 1.0), (1, 0.5), (2, 1.0)], [(2, 0.002)]])
    out = splat.composite(r, cloud, background=(0.1, 0.2, 0.3))
    a = [0.5, 0.4, 0.25]
    T = [1.0, 0.5, 0.3]
    want = np.array([T[0] * a[0], T[1] * a[1], T[2] * a[2]]) + 0.3 * 0.75 * np.array([0.1, 0.2, 0.3])
    np.testing.assert_allclose(out.color[0, 0], want, atol=1e-12)
    np.testing.assert_allclose(out.alpha[0, 0], 1 - 0.5 * 0.6 * 0.75)
    np.testing.assert_allclose(out.depth[0, 0], 0.5 * 1 + 0.2 * 2 + 0.075 * 3)
    # alpha below 1/255 is skipped: pure background
    np.testing.assert_allclose(out.color[0, 1], [0.1, 0.2, 0.3])
    assert out.alpha[0, 1] == 0.0


def test_alpha_is_clamped_to_099():
    cloud = _iso(np.zeros(3), 0.1, 0.999999, [1.0, 1.0, 1.0])
    r = _hand_raster([[(0, 1.0)], []], n=1)
    out = splat.composite(r, cloud)
    np.testing.assert_allclose(out.alpha[0, 0], 0.99)


def test_front_to_back_order():
    cam = _front_cam()
    near = _iso([0.0, 0.0, 2.0], 0.2, 0.6, [1.0, 0.0, 0.0])
    far = _iso([0.0, 0.0, 3.0], 0.3, 0.6, [0.0, 0.0, 1.0])
    a = splat.render(near.extend(far), cam)
    b = splat.render(far.extend(near), cam)
    np.testing.assert_array_equal(a.color, b.color)
    c = a.color[15, 15]
    assert c[0] > c[2] > 0


def test_single_gaussian_peak():
    cam = _front_cam(31, 31)
    g = _iso([0.0, 0.0, 2.0], 0.1, 0.7, [0.2, 0.4, 0.6])
    out = splat.render(g, cam)
    np.testing.assert_allclose(out.color[15, 15], 0.7 * np.array([0.2, 0.4, 0.6]), atol=1e-12)
    np.testing.assert_allclose(out.normalized_depth()[15, 15], 2.0)


def test_ewa_covariance_of_isotropic_gaussian_on_axis():
    cam = _front_cam()
    g = _iso([0.0, 0.0, 2.0], 0.1, 0.5, [1, 1, 1])
    m, cov, z, vis = splat.project_gaussian(g, 0, cam)
    np.testing.assert_allclose(m, [cam.cx, cam.cy])
    np.testing.assert_allclose(cov, ((40 * 0.1 / 2) ** 2 + splat.EWA_DILATION) * np.eye(2))
    assert z == 2.0 and vis


def test_ewa_jacobian_matches_finite_differences():
    cam = look_at_camera((2.0, -3.0, 1.0), (0.0, 0.0, 0.0), width=64, height=48)
    rng = np.random.default_rng(0)
    cloud = splat.GaussianCloud.from_params(rng.uniform(-0.5, 0.5, (5, 3)), rng.normal(size=(5, 4)),
                                            rng.uniform(0.01, 0.1, (5, 3)), np.full(5, 0.5),
                                            np.zeros((5, 3)))
    proj = splat.project_gaussians(cloud, cam, dilation=0.0)
    h = 1e-6
    for i in range(5):
        J = np.zeros((2, 3))
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            up, _ = core.project_point(cam, cloud.mu[i] + e)
            dn, _ = core.project_point(cam, cloud.mu[i] - e)
            J[:, k] = (up - dn) / (2 * h)
        want = J @ cloud.covariance()[i] @ J.T
        np.testing.assert_allclose(proj.cov2d[i], want, rtol=1e-6)


def test_behind_camera_is_invisible():
    cam = _front_cam()
    g = _iso([[0.0, 0.0, -1.0], [0.0, 0.0, 2.0]], 0.1, 0.5, [[1, 0, 0], [0, 1, 0]])
    proj = splat.project_gaussians(g, cam)
    np.testing.assert_array_equal(proj.visible, [False, True])
    assert splat.render(g, cam).color[..., 0].max() == 0.0


def test_render_empty_cloud_raises():
    with pytest.raises(splat.PolarSplatError):
        splat.render(splat.GaussianCloud.empty(), _front_cam())


def test_surfel_min_axis_is_normal():
    rng = np.random.default_rng(2)
    n = rng.normal(size=(20, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    g = splat.gaussians_from_surfels(rng.uniform(size=(20, 3)), n, np.full((20, 3), 0.5), 0.02)
    ax = g.min_axis()
    np.testing.assert_allclose(np.abs(np.sum(ax * n, axis=1)), 1.0, atol=1e-12)
    np.testing.assert_allclose(g.scale.min(axis=1), 0.002)


def test_plane_depth_is_exact_for_a_single_tilted_surfel():
    cam = _front_cam(41, 41)
    n = np.array([0.3, -0.2, -1.0])
    n /= np.linalg.norm(n)
    mu = np.array([0.05, -0.03, 2.0])
    g = splat.gaussians_from_surfels(mu[None], n[None], [[0.5, 0.5, 0.5]], 0.2, opacity=0.9)
    out = splat.render(g, cam, depth_mode="plane")
    d = out.normalized_depth(min_alpha=0.3)
    rays = core.depth_to_points(cam, np.ones(cam.shape))
    exact = (n @ mu) / (rays @ n)
    ok = d > 0
    assert ok.sum() > 50
    np.testing.assert_allclose(d[ok], exact[ok], rtol=1e-12)
    center = splat.render(g, cam).normalized_depth(min_alpha=0.3)
    np.testing.assert_allclose(center[ok], 2.0)


def test_cloud_ply_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    g = splat.GaussianCloud.from_params(rng.normal(size=(7, 3)), rng.normal(size=(7, 4)),
                                        rng.uniform(0.01, 0.1, (7, 3)), rng.uniform(0.1, 0.9, 7),
                                        rng.uniform(size=(7, 3)), rng.uniform(size=7) > 0.5)
    splat.save_cloud(tmp_path / "c.ply", g)
    b = splat.load_cloud(tmp_path / "c.ply")
    for name in ("mu", "log_scale", "opacity_logit", "color", "reflective"):
        np.testing.assert_array_equal(getattr(b, name), getattr(g, name))
    # quaternions are renormalized on construction, which may move the last bit
    np.testing.assert_allclose(b.quat, g.quat, rtol=0, atol=1e-15)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_render_is_invariant_to_storage_order(seed):
    rng = np.random.default_rng(seed)
    n = 12
    mu = np.column_stack([rng.uniform(-0.3, 0.3, (n, 2)), rng.uniform(2.0, 2.5, n)])
    params = (mu, rng.normal(size=(n, 4)), rng.uniform(0.02, 0.2, (n, 3)), rng.uniform(0.1, 0.9, n),
              rng.uniform(size=(n, 3)))
    perm = rng.permutation(n)
    a = splat.render(splat.GaussianCloud.from_params(*params), _front_cam(24, 24))
    b = splat.render(splat.GaussianCloud.from_params(*(p[perm] for p in params)), _front_cam(24, 24))
    np.testing.assert_array_equal(a.color, b.color)
    np.testing.assert_array_equal(a.depth, b.depth)


def _micro_scene(seed, n=6, size=10):
    rng = np.random.default_rng(seed)
    cam = _front_cam(size, size)
    cam = core.CameraModel(12.0, 12.0, cam.cx, cam.cy, size, size)
    mu = np.column_stack([rng.uniform(-0.3, 0.3, (n, 2)), rng.uniform(1.5, 2.5, n)])
    g = splat.GaussianCloud.from_params(mu, rng.normal(size=(n, 4)), rng.uniform(0.05, 0.2, (n, 3)),
                                        rng.uniform(0.1, 0.8, n), rng.uniform(size=(n, 3)))
    return g, cam, rng.uniform(size=(size, size, 3))


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(seed):
    g, cam, target = _micro_scene(seed)
    r = splat.rasterize(g, cam)
    bg = (0.2, 0.1, 0.3)
    W = np.random.default_rng(seed + 100).normal(size=target.shape)

    def f(color, logit):
        c = g.copy()
        c.color, c.opacity_logit = color, logit
        return float(np.sum(W * splat.composite(r, c, bg).color))

    gc, go = splat.composite_backward(r, g, W, bg)
    h = 1e-6
    for i in range(len(g)):
        for k in range(3):
            e = np.zeros_like(g.color)
            e[i, k] = h
            fd = (f(g.color + e, g.opacity_logit) - f(g.color - e, g.opacity_logit)) / (2 * h)
            np.testing.assert_allclose(gc[i, k], fd, rtol=1e-6, atol=1e-9)
        e = np.zeros(len(g))
        e[i] = h
        fd = (f(g.color, g.opacity_logit + e) - f(g.color, g.opacity_logit - e)) / (2 * h)
        np.testing.assert_allclose(go[i], fd, rtol=1e-6, atol=1e-9)


def test_loss_normal_and_depth_normal():
    a = np.zeros((4, 4, 3))
    a[..., 2] = 1.0
    b = a.copy()
    b[0, 0] = [1.0, 0.0, 0.0]
    assert splat.loss_normal(a, b) == pytest.approx(2.0 / 16)
    cam = _front_cam(8, 8)
    depth = np.full((8, 8), 2.0)
    n = np.zeros((8, 8, 3))
    n[..., 2] = 1.0
    assert splat.loss_depth_normal(depth, n, cam) == pytest.approx(0.0, abs=1e-12)
    assert splat.loss_depth_normal(depth, -n, cam) == pytest.approx(2.0)


def test_total_loss_gates_depth_normal_term():
    assert splat.total_loss(1.0, 1.0, 1.0, 0.0, step=10) == pytest.approx(1.1)
    assert splat.total_loss(1.0, 1.0, 1.0, 0.0, step=7000) == pytest.approx(1.15)
    assert splat.total_loss(0.0, 0.0, 0.0, 0.01) == pytest.approx(0.5)


def test_loss_color_shape_mismatch():
    with pytest.raises(splat.DimensionError):
        splat.loss_color(np.zeros((4, 4, 3)), np.zeros((5, 4, 3)))


def test_refine_trace_is_non_increasing_and_colors_stay_in_range():
    g, cam, target = _micro_scene(7, n=10, size=16)
    spec = np.zeros((16, 16), bool)
    spec[4:12, 4:12] = True
    masks = ReflectiveMasks(spec, np.zeros_like(spec), ~spec)
    views = [splat.RefineView(cam, target, None, masks)]
    res = splat.refine_reflective_colors(g, views, steps=15, lambda_dssim=0.2)
    assert res.flagged.any()
    assert np.all(np.diff(res.trace) <= 0)
    assert res.trace[-1] < res.trace[0]
    assert res.cloud.color.min() >= 0 and res.cloud.color.max() <= 1
    untouched = ~res.flagged
    np.testing.assert_array_equal(res.cloud.color[untouched], g.color[untouched])
    np.testing.assert_array_equal(res.cloud.mu, g.mu)


def test_refine_without_reflective_pixels_is_a_no_op():
    g, cam, target = _micro_scene(8)
    none = np.zeros((10, 10), bool)
    masks = ReflectiveMasks(none, none, ~none)
    res = splat.refine_reflective_colors(g, [splat.RefineView(cam, target, None, masks)], steps=5,
                                         lambda_dssim=0.0)
    assert len(res.trace) == 1
    np.testing.assert_array_equal(res.cloud.color, g.color)


def test_refine_pulls_highlights_to_the_color_refinement_maps():
    rendered, views, cloud = oracles.highlight_setup(n_views=4)
    l1 = CorrectionConfig(lambda_dssim=0.0)

    def masked_l1(g):
        return sum(reflective_loss(splat.render(g, v.camera, depth_mode="plane").color, v.crm,
                                   v.masks, l1) for v in views)

    res = splat.refine_reflective_colors(cloud, views, steps=200)
    assert len(res.trace) == 201
    assert masked_l1(res.cloud) < 0.2 * masked_l1(cloud)
