"""Explicit 3D Gaussians: EWA projection, alpha-blended rendering and losses.

Rendering is exact per pixel (no tiles): every Gaussian that reaches
``1/255`` of its peak inside a pixel is listed for that pixel, lists are
kept in front-to-back order, and colors, depths and normals are blended
with transmittance ``T_i = prod_{j<i} (1 - alpha_j)``.

Only colors and opacities are optimized (:func:`refine_reflective_colors`);
positions and covariances stay fixed, so the per-pixel contributor lists
can be built once and reused for every forward/backward pass.
"""

import logging
from dataclasses import dataclass, field, replace

import numba
import numpy as np
from scipy.spatial.transform import Rotation

from . import fileio
from .core import normals_from_depth
from .correction import CorrectionConfig, region_loss, reflective_loss
from .errors import DimensionError, PolarSplatError

log = logging.getLogger(__name__)

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
EWA_DILATION = 0.3
NEAR = 1e-3
# plane depth falls back to center depth beyond ~78 degrees of incidence
PLANE_MIN_COS = 0.2


def _logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def quat_to_rotmat(q):
    """``(N, 4)`` quaternions ``(w, x, y, z)`` to ``(N, 3, 3)`` rotation matrices."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return Rotation.from_quat(q[..., [1, 2, 3, 0]]).as_matrix()


def rotmat_to_quat(R):
    xyzw = Rotation.from_matrix(R).as_quat()
    return xyzw[..., [3, 0, 1, 2]]


@dataclass
class GaussianCloud:
    """Structure-of-arrays Gaussian set.

    Scales are stored as logs and opacities as logits so that any stored
    value maps to a valid Gaussian.
    """

    mu: np.ndarray
    quat: np.ndarray
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    color: np.ndarray
    reflective: np.ndarray = None
    scene_scale: float = 1.0

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1, 3)
        n = len(self.mu)
        q = np.asarray(self.quat, dtype=np.float64).reshape(n, 4)
        self.quat = q / np.linalg.norm(q, axis=1, keepdims=True)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(n, 3)
        self.opacity_logit = np.asarray(self.opacity_logit, dtype=np.float64).reshape(n)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(n, 3)
        if self.reflective is None:
            self.reflective = np.zeros(n, dtype=bool)
        self.reflective = np.asarray(self.reflective, dtype=bool).reshape(n)

    @classmethod
    def from_params(cls, mu, quat, scale, opacity, color, reflective=None, scene_scale=1.0):
        return cls(mu, quat, np.log(scale), _logit(opacity), color, reflective, scene_scale)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))

    def __len__(self):
        return len(self.mu)

    @property
    def scale(self):
        return np.exp(self.log_scale)

    @property
    def opacity(self):
        return _sigmoid(self.opacity_logit)

    @property
    def rotation(self):
        return quat_to_rotmat(self.quat) if len(self) else np.zeros((0, 3, 3))

    def covariance(self):
        R = self.rotation
        S2 = self.scale ** 2
        return np.einsum("nij,nj,nkj->nik", R, S2, R)

    def min_axis(self):
        """World-frame unit axis of the smallest scale, one row per Gaussian."""
        R = self.rotation
        k = np.argmin(self.log_scale, axis=1)
        return R[np.arange(len(self)), :, k]

    def copy(self):
        return GaussianCloud(self.mu.copy(), self.quat.copy(), self.log_scale.copy(),
                             self.opacity_logit.copy(), self.color.copy(),
                             self.reflective.copy(), self.scene_scale)

    def subset(self, idx):
        return GaussianCloud(self.mu[idx], self.quat[idx], self.log_scale[idx],
                             self.opacity_logit[idx], self.color[idx], self.reflective[idx],
                             self.scene_scale)

    def extend(self, other):
        return GaussianCloud(np.vstack([self.mu, other.mu]), np.vstack([self.quat, other.quat]),
                             np.vstack([self.log_scale, other.log_scale]),
                             np.concatenate([self.opacity_logit, other.opacity_logit]),
                             np.vstack([self.color, other.color]),
                             np.concatenate([self.reflective, other.reflective]),
                             self.scene_scale)

    def canonical_rank(self):
        """Rank of each Gaussian under a storage-order independent sort."""
        keys = np.column_stack([self.mu, self.quat, self.log_scale, self.opacity_logit[:, None],
                                self.color])
        order = np.lexsort(keys.T[::-1])
        rank = np.empty(len(self), dtype=np.int64)
        rank[order] = np.arange(len(self))
        return rank


_PLY_FIELDS = (["x", "y", "z", "qw", "qx", "qy", "qz", "log_scale_0", "log_scale_1",
                "log_scale_2", "opacity_logit", "red", "green", "blue"])


def save_cloud(path, cloud):
    dt = [(f, "<f8") for f in _PLY_FIELDS] + [("reflective", "u1")]
    v = np.empty(len(cloud), dtype=dt)
    cols = np.column_stack([cloud.mu, cloud.quat, cloud.log_scale, cloud.opacity_logit[:, None],
                            cloud.color])
    for i, f in enumerate(_PLY_FIELDS):
        v[f] = cols[:, i]
    v["reflective"] = cloud.reflective
    fileio.write_ply(path, v)


def load_cloud(path):
    v, _ = fileio.read_ply(path)
    missing = [f for f in _PLY_FIELDS + ["reflective"] if f not in v.dtype.names]
    if missing:
        raise fileio.FormatError(f"{path}: missing Gaussian properties {missing}")
    col = lambda *names: np.column_stack([v[n].astype(np.float64) for n in names])
    return GaussianCloud(col("x", "y", "z"), col("qw", "qx", "qy", "qz"),
                         col("log_scale_0", "log_scale_1", "log_scale_2"),
                         v["opacity_logit"].astype(np.float64), col("red", "green", "blue"),
                         v["reflective"].astype(bool))


def gaussians_from_surfels(points, normals, colors, sigma, opacity=0.5, flat_ratio=0.1):
    """Flat Gaussians whose shortest axis follows ``normals``.

    Scales are ``(sigma, sigma, sigma * flat_ratio)``; ``sigma`` may be per point.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    # any vector not parallel to n seeds the tangent frame
    helper = np.where(np.abs(n[:, [0]]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    t1 = np.cross(n, helper)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    R = np.stack([t1, t2, n], axis=2)  # columns: tangent, bitangent, normal
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (len(points),))
    scale = np.stack([sigma, sigma, sigma * flat_ratio], axis=1)
    quat = rotmat_to_quat(R) if len(points) else np.zeros((0, 4))
    return GaussianCloud.from_params(points, quat, scale, np.full(len(points), opacity),
                                     np.clip(colors, 0.0, 1.0).reshape(-1, 3))


# -- projection ------------------------------------------------------------

@dataclass
class Projection:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: np.ndarray
    visible: np.ndarray


def project_gaussians(cloud, cam, dilation=EWA_DILATION):
    """EWA projection ``J W Sigma W^T J^T + dilation * I`` of every Gaussian.

    Gaussians with camera depth below a small near plane are flagged
    invisible rather than raising.
    """
    Xc = cam.to_camera(cloud.mu)
    z = Xc[:, 2]
    visible = z > NEAR
    zs = np.where(visible, z, 1.0)
    mean2d = np.stack([cam.fx * Xc[:, 0] / zs + cam.cx, cam.fy * Xc[:, 1] / zs + cam.cy], axis=1)
    J = np.zeros((len(cloud), 2, 3))
    J[:, 0, 0] = cam.fx / zs
    J[:, 0, 2] = -cam.fx * Xc[:, 0] / zs ** 2
    J[:, 1, 1] = cam.fy / zs
    J[:, 1, 2] = -cam.fy * Xc[:, 1] / zs ** 2
    M = J @ cam.R
    cov2d = M @ cloud.covariance() @ np.transpose(M, (0, 2, 1))
    cov2d = 0.5 * (cov2d + np.transpose(cov2d, (0, 2, 1))) + dilation * np.eye(2)
    return Projection(mean2d, cov2d, z, visible)


def project_gaussian(cloud, index, cam, dilation=EWA_DILATION):
    """``(mean2d, cov2d, depth, visible)`` for a single Gaussian of ``cloud``."""
    p = project_gaussians(cloud.subset([index]), cam, dilation)
    return p.mean2d[0], p.cov2d[0], float(p.depth[0]), bool(p.visible[0])


# -- rasterization ---------------------------------------------------------

@numba.njit(cache=True)
def _raster_pass(order, mean2d, conic, bbox, H, W, counts, offsets, gid, gval, fill):
    for k in range(order.shape[0]):
        i = order[k]
        mx, my = mean2d[i, 0], mean2d[i, 1]
        a, b, c = conic[i, 0], conic[i, 1], conic[i, 2]
        for y in range(bbox[i, 1], bbox[i, 3]):
            dy = y - my
            for x in range(bbox[i, 0], bbox[i, 2]):
                dx = x - mx
                q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                g = np.exp(-0.5 * q)
                if g < 1.0 / 255.0:
                    continue
                p = y * W + x
                if fill:
                    j = offsets[p] + counts[p]
                    gid[j] = i
                    gval[j] = g
                counts[p] += 1


@dataclass
class Raster:
    """Per-pixel front-to-back contributor lists for one view (CSR layout)."""

    height: int
    width: int
    offsets: np.ndarray
    gid: np.ndarray
    gval: np.ndarray
    depth: np.ndarray   # per Gaussian camera depth
    normal: np.ndarray  # per Gaussian camera-frame normal
    center: np.ndarray = None  # per Gaussian camera-frame center
    intrinsics: np.ndarray = None  # fx, fy, cx, cy

    @property
    def n_entries(self):
        return len(self.gid)

    def gaussians_hitting(self, mask):
        """Indices of Gaussians listed at any pixel of ``mask``."""
        pix = np.flatnonzero(np.asarray(mask).reshape(-1))
        if pix.size == 0:
            return np.zeros(0, dtype=np.int64)
        starts, ends = self.offsets[pix], self.offsets[pix + 1]
        idx = np.concatenate([self.gid[s:e] for s, e in zip(starts, ends)]) if pix.size else []
        return np.unique(idx).astype(np.int64)


def rasterize(cloud, cam, dilation=EWA_DILATION):
    H, W = cam.shape
    n = len(cloud)
    proj = project_gaussians(cloud, cam, dilation) if n else None
    if n == 0:
        return Raster(H, W, np.zeros(H * W + 1, dtype=np.int64), np.zeros(0, dtype=np.int64),
                      np.zeros(0), np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3)),
                      np.array([cam.fx, cam.fy, cam.cx, cam.cy]))
    cov = proj.cov2d
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
    ok = proj.visible & (det > 0)
    det = np.where(ok, det, 1.0)
    conic = np.stack([cov[:, 1, 1] / det, -cov[:, 0, 1] / det, cov[:, 0, 0] / det], axis=1)
    mid = 0.5 * (cov[:, 0, 0] + cov[:, 1, 1])
    lam = mid + np.sqrt(np.maximum(mid ** 2 - det, 0.0))
    r = np.ceil(3.0 * np.sqrt(lam))
    m = proj.mean2d
    fin = ok & np.all(np.isfinite(m), axis=1) & np.isfinite(r)
    m = np.where(fin[:, None], m, 0.0)
    r = np.where(fin, r, 0.0)
    bbox = np.stack([np.floor(m[:, 0] - r), np.floor(m[:, 1] - r),
                     np.ceil(m[:, 0] + r) + 1, np.ceil(m[:, 1] + r) + 1], axis=1)
    bbox[:, [0, 2]] = np.clip(bbox[:, [0, 2]], 0, W)
    bbox[:, [1, 3]] = np.clip(bbox[:, [1, 3]], 0, H)
    bbox = bbox.astype(np.int64)
    vis = np.flatnonzero(fin & (bbox[:, 2] > bbox[:, 0]) & (bbox[:, 3] > bbox[:, 1]))
    rank = cloud.canonical_rank()
    order = vis[np.lexsort((rank[vis], proj.depth[vis]))].astype(np.int64)

    counts = np.zeros(H * W, dtype=np.int64)
    dummy_i = np.zeros(0, dtype=np.int64)
    dummy_f = np.zeros(0)
    _raster_pass(order, m, conic, bbox, H, W, counts, dummy_i, dummy_i, dummy_f, False)
    offsets = np.zeros(H * W + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    gid = np.empty(offsets[-1], dtype=np.int64)
    gval = np.empty(offsets[-1])
    counts[:] = 0
    _raster_pass(order, m, conic, bbox, H, W, counts, offsets, gid, gval, True)

    # shortest axis in the camera frame, oriented along the line of sight
    nc = cloud.min_axis() @ cam.R.T
    Xc = cam.to_camera(cloud.mu)
    flip = np.sum(nc * Xc, axis=1) < 0
    nc[flip] *= -1
    return Raster(H, W, offsets, gid, gval, proj.depth.copy(), nc, Xc,
                  np.array([cam.fx, cam.fy, cam.cx, cam.cy]))


@numba.njit(cache=True)
def _composite(offsets, gid, gval, opacity, color, depth, normal, bg, out_c, out_d, out_n, out_a,
               plane, center, intr, W):
    npix = offsets.shape[0] - 1
    for p in range(npix):
        rx = (p % W - intr[2]) / intr[0]
        ry = (p // W - intr[3]) / intr[1]
        rn = np.sqrt(rx * rx + ry * ry + 1.0)
        T = 1.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        d = 0.0
        n0 = 0.0
        n1 = 0.0
        n2 = 0.0
        for j in range(offsets[p], offsets[p + 1]):
            i = gid[j]
            a = opacity[i] * gval[j]
            if a > 0.99:
                a = 0.99
            if a < 1.0 / 255.0:
                continue
            w = T * a
            c0 += w * color[i, 0]
            c1 += w * color[i, 1]
            c2 += w * color[i, 2]
            di = depth[i]
            if plane:
                # depth where the pixel ray meets the Gaussian's tangent plane
                nr = normal[i, 0] * rx + normal[i, 1] * ry + normal[i, 2]
                if nr > PLANE_MIN_COS * rn:
                    di = (normal[i, 0] * center[i, 0] + normal[i, 1] * center[i, 1]
                          + normal[i, 2] * center[i, 2]) / nr
            d += w * di
            n0 += w * normal[i, 0]
            n1 += w * normal[i, 1]
            n2 += w * normal[i, 2]
            T *= 1.0 - a
        out_c[p, 0] = c0 + T * bg[0]
        out_c[p, 1] = c1 + T * bg[1]
        out_c[p, 2] = c2 + T * bg[2]
        out_d[p] = d
        out_n[p, 0] = n0
        out_n[p, 1] = n1
        out_n[p, 2] = n2
        out_a[p] = 1.0 - T


@numba.njit(cache=True)
def _composite_backward(offsets, gid, gval, opacity, color, bg, dldc, g_color, g_opacity):
    npix = offsets.shape[0] - 1
    maxk = 0
    for p in range(npix):
        k = offsets[p + 1] - offsets[p]
        if k > maxk:
            maxk = k
    ids = np.empty(maxk, dtype=np.int64)
    al = np.empty(maxk)
    Ts = np.empty(maxk)
    gv = np.empty(maxk)
    for p in range(npix):
        if dldc[p, 0] == 0.0 and dldc[p, 1] == 0.0 and dldc[p, 2] == 0.0:
            continue
        T = 1.0
        m = 0
        for j in range(offsets[p], offsets[p + 1]):
            i = gid[j]
            a = opacity[i] * gval[j]
            if a > 0.99:
                a = 0.99
            if a < 1.0 / 255.0:
                continue
            ids[m] = i
            al[m] = a
            Ts[m] = T
            gv[m] = gval[j]
            m += 1
            T *= 1.0 - a
        # suffix sum of everything composited behind entry k, background included
        s0 = T * bg[0]
        s1 = T * bg[1]
        s2 = T * bg[2]
        for k in range(m - 1, -1, -1):
            i = ids[k]
            a = al[k]
            w = Ts[k] * a
            g_color[i, 0] += w * dldc[p, 0]
            g_color[i, 1] += w * dldc[p, 1]
            g_color[i, 2] += w * dldc[p, 2]
            inv = 1.0 / (1.0 - a)
            da = (dldc[p, 0] * (Ts[k] * color[i, 0] - s0 * inv)
                  + dldc[p, 1] * (Ts[k] * color[i, 1] - s1 * inv)
                  + dldc[p, 2] * (Ts[k] * color[i, 2] - s2 * inv))
            if opacity[i] * gv[k] < 0.99:
                g_opacity[i] += da * gv[k]
            s0 += w * color[i, 0]
            s1 += w * color[i, 1]
            s2 += w * color[i, 2]


@dataclass
class SplatRender:
    """Blended color, depth, normal and accumulated alpha.

    ``depth`` and ``normal`` are the raw blends ``sum_i T_i alpha_i x_i``;
    :meth:`normalized_depth` and :meth:`normalized_normal` divide out the
    accumulated alpha.
    """

    color: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    alpha: np.ndarray
    raster: Raster = field(default=None, repr=False)

    def normalized_depth(self, min_alpha=0.5):
        ok = self.alpha >= min_alpha
        return np.where(ok, self.depth / np.where(ok, self.alpha, 1.0), 0.0)

    def normalized_normal(self, min_alpha=0.5):
        nrm = np.linalg.norm(self.normal, axis=-1, keepdims=True)
        ok = (self.alpha >= min_alpha)[..., None] & (nrm > 1e-12)
        return np.where(ok, self.normal / np.where(ok, nrm, 1.0), 0.0)


def composite(raster, cloud, background=(0.0, 0.0, 0.0), opacity=None, color=None,
              depth_mode="center"):
    """Blend the contributors of ``raster``.

    ``depth_mode="center"`` blends each Gaussian's center depth;
    ``"plane"`` blends the depth at which the pixel ray meets the
    Gaussian's tangent plane, falling back to the center depth at grazing
    incidence.
    """
    if depth_mode not in ("center", "plane"):
        raise ValueError(f"unknown depth_mode {depth_mode!r}")
    H, W = raster.height, raster.width
    opacity = cloud.opacity if opacity is None else opacity
    color = cloud.color if color is None else color
    out_c = np.zeros((H * W, 3))
    out_d = np.zeros(H * W)
    out_n = np.zeros((H * W, 3))
    out_a = np.zeros(H * W)
    _composite(raster.offsets, raster.gid, raster.gval, np.ascontiguousarray(opacity),
               np.ascontiguousarray(color), raster.depth, np.ascontiguousarray(raster.normal),
               np.asarray(background, dtype=np.float64), out_c, out_d, out_n, out_a,
               depth_mode == "plane", np.ascontiguousarray(raster.center), raster.intrinsics, W)
    return SplatRender(out_c.reshape(H, W, 3), out_d.reshape(H, W), out_n.reshape(H, W, 3),
                       out_a.reshape(H, W), raster)


def composite_backward(raster, cloud, dl_dcolor, background=(0.0, 0.0, 0.0)):
    """Gradients of a loss w.r.t. Gaussian colors and opacity logits.

    ``dl_dcolor`` is the ``(H, W, 3)`` gradient w.r.t. the rendered color.
    """
    o = cloud.opacity
    g_color = np.zeros((len(cloud), 3))
    g_op = np.zeros(len(cloud))
    _composite_backward(raster.offsets, raster.gid, raster.gval, o, np.ascontiguousarray(cloud.color),
                        np.asarray(background, dtype=np.float64),
                        np.ascontiguousarray(dl_dcolor.reshape(-1, 3), dtype=np.float64), g_color, g_op)
    return g_color, g_op * o * (1.0 - o)


def render(cloud, cam, background=(0.0, 0.0, 0.0), depth_mode="center"):
    """Render color, depth, normal and alpha of ``cloud`` seen from ``cam``."""
    if len(cloud) == 0:
        raise PolarSplatError("cannot render an empty Gaussian cloud")
    return composite(rasterize(cloud, cam), cloud, background, depth_mode=depth_mode)


# -- losses ----------------------------------------------------------------

def loss_color(render_color, target, crm=None, masks=None, lambda_ref=1.0, lambda_dssim=0.2,
               want_grad=False):
    """Non-reflective photometric loss plus ``lambda_ref`` times the CRM loss.

    Without masks the whole image counts as non-reflective.
    """
    render_color = np.asarray(render_color, dtype=np.float64)
    if render_color.shape != np.shape(target):
        raise DimensionError(f"render {render_color.shape} vs target {np.shape(target)}")
    non = np.ones(render_color.shape[:2], dtype=bool) if masks is None else masks.non_reflective
    out = region_loss(render_color, target, non, lambda_dssim, want_grad)
    if masks is None or crm is None or lambda_ref == 0:
        return out
    cfg = CorrectionConfig(lambda_dssim=lambda_dssim)
    ref = reflective_loss(render_color, crm, masks, cfg, want_grad)
    if not want_grad:
        return out + lambda_ref * ref
    return out[0] + lambda_ref * ref[0], out[1] + lambda_ref * ref[1]


def loss_normal(render_normal, n_opt, valid=None):
    """Mean over valid pixels of the per-pixel L1 distance summed over xyz."""
    a = np.asarray(render_normal, dtype=np.float64)
    b = np.asarray(n_opt, dtype=np.float64)
    if valid is None:
        valid = np.linalg.norm(b, axis=-1) > 0
    if not valid.any():
        return 0.0
    return float(np.abs(a - b).sum(axis=-1)[valid].mean())


def loss_depth_normal(depth, normal, cam, valid=None):
    """Mean of ``1 - n_depth . n`` where ``n_depth`` comes from neighbor depths.

    Pixels without right/down neighbours or without a rendered normal are skipped.
    """
    nd = normals_from_depth(cam, depth)
    nrm = np.linalg.norm(normal, axis=-1, keepdims=True)
    n = np.where(nrm > 1e-12, normal / np.where(nrm > 1e-12, nrm, 1.0), 0.0)
    ok = (np.linalg.norm(nd, axis=-1) > 0) & (nrm[..., 0] > 1e-12)
    if valid is not None:
        ok &= valid
    if not ok.any():
        return 0.0
    return float((1.0 - np.sum(nd * n, axis=-1))[ok].mean())


def loss_scale(cloud):
    if len(cloud) == 0:
        return 0.0
    return float(cloud.scale.min(axis=1).mean())


def total_loss(l_color, l_normal, l_depth_normal, l_scale, alpha=0.1, beta=0.05, gamma=50.0,
               step=None, depth_normal_start=7000):
    """Weighted sum; the depth-normal term is off before ``depth_normal_start``."""
    gate = 1.0 if step is None or step >= depth_normal_start else 0.0
    return l_color + alpha * l_normal + beta * gate * l_depth_normal + gamma * l_scale


# -- color / opacity refinement -------------------------------------------

@dataclass
class RefineView:
    """Supervision for one view: camera, observed image, CRMs and masks."""

    camera: object
    target: np.ndarray
    crm: object = None
    masks: object = None


@dataclass
class RefineResult:
    cloud: GaussianCloud
    trace: list
    flagged: np.ndarray


def flag_reflective(cloud, rasters, views):
    """Gaussians contributing to any reflective pixel of any view."""
    hit = np.zeros(len(cloud), dtype=bool)
    for r, v in zip(rasters, views):
        if v.masks is not None:
            hit[r.gaussians_hitting(v.masks.reflective)] = True
    return hit


def _views_loss(cloud, rasters, views, lambda_ref, lambda_dssim, want_grad):
    total = 0.0
    g_c = np.zeros((len(cloud), 3))
    g_o = np.zeros(len(cloud))
    for r, v in zip(rasters, views):
        img = composite(r, cloud).color
        res = loss_color(img, v.target, v.crm, v.masks, lambda_ref, lambda_dssim, want_grad)
        if want_grad:
            total += res[0]
            gc, go = composite_backward(r, cloud, res[1])
            g_c += gc
            g_o += go
        else:
            total += res
    return (total, g_c, g_o) if want_grad else total


def color_loss_and_grad(cloud, views, lambda_ref=1.0, lambda_dssim=0.2, rasters=None):
    """Summed :func:`loss_color` over ``views`` and its gradients.

    Returns ``(loss, d/d color, d/d opacity_logit)``; geometry is held fixed.
    """
    if rasters is None:
        rasters = [rasterize(cloud, v.camera) for v in views]
    return _views_loss(cloud, rasters, views, lambda_ref, lambda_dssim, True)


def refine_reflective_colors(cloud, views, steps=200, lr=1.0, lambda_ref=1.0, lambda_dssim=0.2,
                             flagged=None):
    """Projected gradient descent on colors and opacities of reflective Gaussians.

    Each step backtracks until the summed loss does not increase, so the
    returned trace is non-increasing.  Colors stay in ``[0, 1]``.
    """
    rasters = [rasterize(cloud, v.camera) for v in views]
    if flagged is None:
        flagged = flag_reflective(cloud, rasters, views)
    cloud = cloud.copy()
    cloud.reflective = cloud.reflective | flagged
    idx = np.flatnonzero(flagged)
    if idx.size == 0:
        log.warning("no reflective Gaussians; color refinement skipped")
        loss = _views_loss(cloud, rasters, views, lambda_ref, lambda_dssim, False)
        return RefineResult(cloud, [loss], flagged)
    loss, g_c, g_o = _views_loss(cloud, rasters, views, lambda_ref, lambda_dssim, True)
    trace = [loss]
    step = lr
    for _ in range(steps):
        g_c, g_o = g_c[idx], g_o[idx]
        if float(np.sum(g_c ** 2) + np.sum(g_o ** 2)) == 0.0:
            break
        accepted = False
        for _ in range(30):
            trial = cloud.copy()
            trial.color[idx] = np.clip(cloud.color[idx] - step * g_c, 0.0, 1.0)
            trial.opacity_logit[idx] = cloud.opacity_logit[idx] - step * g_o
            # the gradient at the trial point is kept for the next step when it is accepted
            new, t_c, t_o = _views_loss(trial, rasters, views, lambda_ref, lambda_dssim, True)
            if new <= loss:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        cloud, loss, g_c, g_o = trial, new, t_c, t_o
        trace.append(loss)
        step *= 1.25
    return RefineResult(cloud, trace, flagged)
