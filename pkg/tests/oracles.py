"""Independent reference implementations and scene builders shared by tests."""

import numpy as np

from polarsplat import core, patchmatch as pm, synth


def pm_views(scene, cams, depth_noise=0.0, hole_fraction=0.0, normal_noise=0.0, seed=0):
    """Rendered views wrapped for PatchMatch, with corrupted initial depth/normal."""
    rendered = synth.render_views(scene, cams)
    views = []
    for i, v in enumerate(rendered):
        st = core.stokes_from_angles(v.capture)
        d0 = synth.corrupt_depth(v.gt_depth, depth_noise, hole_fraction, seed + i)
        n0 = synth.corrupt_normal(v.gt_normal, normal_noise, seed + i, hole_fraction)
        views.append(pm.PmView(v.camera, core.intensity_image(st), core.aolp_dolp(st), d0, n0))
    return rendered, views


def brute_force_sweep(field, bundle, color):
    """One red-black half sweep without perturbation, as an explicit argmin.

    For each pixel of ``color`` the options are the stored best, the ten
    fixed candidates and the four neighbour planes, in that order; the
    first minimum wins.  Pixels of one color only read pixels of the other
    color, so they are evaluated against the state before the half sweep.
    """
    H, W = field.shape
    d0, n0, c0 = field.depth.copy(), field.normal.copy(), field.cost.copy()
    out_d, out_n, out_c = d0.copy(), n0.copy(), c0.copy()
    for y in range(H):
        for x in range(W):
            if (x + y) % 2 != color or not field.valid[y, x]:
                continue
            opts = [(c0[y, x], d0[y, x], n0[y, x])]
            for k in range(pm.N_CANDIDATES):
                d = field.cand_depth[y, x, k]
                if d <= 0:
                    continue
                n = field.cand_normal[y, x, k]
                opts.append((pm.pixel_cost(bundle, field, y, x, d, n), d, n))
            for qy, qx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                if not (0 <= qy < H and 0 <= qx < W) or not field.valid[qy, qx]:
                    continue
                d = pm._plane_depth(x, y, qx, qy, d0[qy, qx], n0[qy, qx], bundle.Kinv)
                if d <= 0:
                    continue
                opts.append((pm.pixel_cost(bundle, field, y, x, d, n0[qy, qx]), d, n0[qy, qx]))
            j = int(np.argmin([o[0] for o in opts]))
            out_c[y, x], out_d[y, x], out_n[y, x] = opts[j]
    field.depth[:], field.normal[:], field.cost[:] = out_d, out_n, out_c
    return field


def brute_force_propagate(field, bundle, sweeps=1):
    for _ in range(sweeps):
        for color in (0, 1):
            brute_force_sweep(field, bundle, color)
    return field


def tiny_bundle(seed=0, size=8):
    """An 8x8 textured sphere seen by a reference and two sources."""
    scene = synth.SceneSpec(texture=0.8, rng_seed=seed)
    ring = synth.make_camera_ring(24, 4.0, 0.3, width=size, height=size, fov_deg=12)
    _, views = pm_views(scene, [ring[0], ring[1], ring[23]], depth_noise=0.05,
                        hole_fraction=0.3, normal_noise=20.0, seed=seed)
    return views


def oblique_highlight_camera(scene, angle_deg=80.0, size=64):
    """Camera swung ``angle_deg`` off the light so the highlight is seen at a slant.

    Head-on highlights carry almost no polarization; oblique ones are strongly
    polarized, which is what the specular localization looks for.
    """
    L = scene.light
    perp = np.cross(L, [0.0, 1.0, 0.0])
    perp /= np.linalg.norm(perp)
    a = np.radians(angle_deg)
    return synth.look_at_camera(4.0 * (np.cos(a) * L + np.sin(a) * perp), (0, 0, 0),
                                width=size, height=size)


def highlight_setup(n_views=8, size=96, spacing=0.03, sigma=0.02, opacity=0.9):
    """Highlight scene, its CRM supervision and a surfel cloud colored from the captures.

    The cloud bakes the highlights into the colors, as a cloud fitted to
    the raw images would.
    """
    from polarsplat import correction as cr, pipeline, splat
    from polarsplat.config import CameraRig

    scene = synth.highlight_scene()
    cams = pipeline.make_cameras(CameraRig(n_views=n_views, width=size, height=size))
    rendered = synth.render_views(scene, cams)
    pts, nrm, col, views = [], [], [], []
    for v, c in zip(rendered, cams):
        masks, crm, st, _ = cr.build_crms(v.capture, foreground=v.foreground)
        inten = core.intensity_image(st)
        views.append(splat.RefineView(c, inten, crm, masks))
        ys, xs = np.nonzero(v.gt_depth > 0)
        pix = np.stack([xs, ys], -1).astype(np.float64)
        pts.append(c.to_world(core.backproject_camera(c, pix, v.gt_depth[ys, xs])))
        nrm.append(v.gt_normal[ys, xs] @ c.R)
        col.append(inten[ys, xs])
    pts, nrm, col = (np.concatenate(a) for a in (pts, nrm, col))
    _, first = np.unique(np.floor(pts / spacing).astype(np.int64), axis=0, return_index=True)
    keep = np.sort(first)
    cloud = splat.gaussians_from_surfels(pts[keep], nrm[keep], col[keep], sigma, opacity)
    return rendered, views, cloud
