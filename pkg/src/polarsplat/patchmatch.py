"""Polarization-aided PatchMatch for depth/normal densification.

Each reference pixel keeps ten depth/normal hypotheses built from the
rendered depth and normal, a perturbed depth and four normals rebuilt
from the AoLP branches.  Red-black propagation minimizes

    cost = S_c + lambda1 * S_a + lambda2 * S_nd

with S_c a bilateral NCC through the plane-induced homography, S_a the
azimuth agreement with the nearest AoLP branch and S_nd the agreement
with the normal implied by neighbouring depths.  Surviving pixels after a
geometric and a polarimetric consistency check become new Gaussians.

Normals are camera-frame unit vectors oriented along the line of sight
(``n . ray >= 0``), so ``n_z >= 0`` on anything the camera can see.
"""

import logging
from dataclasses import dataclass

import numba
import numpy as np
from scipy import ndimage

from .core import backproject_camera, luminance, pixel_grid
from .errors import ConfigError, DimensionError, InitializationError
from .splat import gaussians_from_surfels

log = logging.getLogger(__name__)

N_CANDIDATES = 10
ZENITH_MAX = np.pi / 2 - 1e-3
ZENITH_FALLBACK = np.pi / 4


@dataclass
class PmConfig:
    tau: float = 0.1
    sigma: float = 0.5
    lambda1: float = 0.2
    lambda2: float = 0.05
    ncc_window: int = 11
    ncc_step: int = 2
    ncc_sigma_spatial: float = 3.0
    ncc_sigma_color: float = 0.1
    sweeps: int = 3
    perturb_rel: float = 0.05
    geo_px_thresh: float = 1.0
    geo_depth_rel_thresh: float = 0.01
    polar_eps_thresh: float = 0.2
    min_consistent_views: int = 2
    n_sources: int = 4
    azimuth_mode: str = "multiview"
    crm_pixel_threshold: int = 10
    seed: int = 0

    def __post_init__(self):
        pos = ("tau", "sigma", "ncc_sigma_spatial", "ncc_sigma_color", "geo_px_thresh",
               "geo_depth_rel_thresh", "polar_eps_thresh")
        for k in pos:
            if getattr(self, k) <= 0:
                raise ConfigError(f"patchmatch.{k} must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0 or self.perturb_rel < 0:
            raise ConfigError("lambda weights and perturb_rel must be non-negative")
        if self.ncc_window < 3 or self.ncc_window % 2 == 0 or self.ncc_step < 1:
            raise ConfigError("ncc_window must be odd and >= 3, ncc_step >= 1")
        if self.sweeps < 0 or self.min_consistent_views < 1 or self.n_sources < 1:
            raise ConfigError("sweeps >= 0, min_consistent_views >= 1, n_sources >= 1")
        if self.azimuth_mode not in ("reference", "multiview"):
            raise ConfigError("azimuth_mode must be 'reference' or 'multiview'")


@dataclass
class PmView:
    """One calibrated view as seen by PatchMatch.

    ``image`` is the (possibly CRM-substituted) color image used for
    matching; ``crm`` optionally replaces it wherever an NCC window holds
    more than ``crm_pixel_threshold`` reflective pixels.
    """

    camera: object
    image: np.ndarray
    polar: object
    init_depth: np.ndarray = None
    init_normal: np.ndarray = None
    crm: np.ndarray = None
    reflective: np.ndarray = None


@dataclass
class HypothesisField:
    cand_depth: np.ndarray   # (H, W, K)
    cand_normal: np.ndarray  # (H, W, K, 3)
    depth: np.ndarray        # best depth (0 where invalid)
    normal: np.ndarray       # best normal
    cost: np.ndarray
    valid: np.ndarray

    @property
    def shape(self):
        return self.depth.shape


# -- AoLP geometry ---------------------------------------------------------

def aolp_candidates(phi):
    """The four azimuths compatible with an AoLP: phi - pi/2, phi, phi + pi/2, phi + pi."""
    phi = np.asarray(phi, dtype=np.float64)
    offs = np.array([-0.5 * np.pi, 0.0, 0.5 * np.pi, np.pi])
    return np.mod(phi[..., None] + offs, 2 * np.pi)


def normal_from_aolp(phi, theta):
    """Unit normal with azimuth ``phi`` and zenith ``theta`` (camera frame)."""
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(theta < 0) or np.any(theta > np.pi / 2 + 1e-12):
        raise ConfigError("zenith must lie in [0, pi/2]")
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta) * np.ones_like(phi)], axis=-1)


def dolp_weight(rho, sigma=0.5):
    """``exp(-(1-rho)^2 / 2 sigma^2) + exp(-rho^2 / 2 sigma^2)``."""
    rho = np.asarray(rho, dtype=np.float64)
    return np.exp(-(1 - rho) ** 2 / (2 * sigma ** 2)) + np.exp(-rho ** 2 / (2 * sigma ** 2))


@numba.njit(cache=True)
def _wrap(a):
    """Wrap to (-pi, pi]."""
    w = a - 2.0 * np.pi * np.floor((a + np.pi) / (2.0 * np.pi))
    if w <= -np.pi:
        w += 2.0 * np.pi
    return w


@numba.njit(cache=True)
def _azimuth_score(nx, ny, phi, rho, tau, sigma):
    """``(score, branch)``: min over the four AoLP branches of omega * exp(delta^2 / tau)."""
    az = np.arctan2(ny, nx)
    omega = np.exp(-(1.0 - rho) ** 2 / (2.0 * sigma * sigma)) + np.exp(-rho * rho / (2.0 * sigma * sigma))
    best = np.inf
    branch = -1
    for i in range(4):
        cand = phi + (i - 1) * 0.5 * np.pi
        dlt = _wrap(az - cand)
        s = omega * np.exp(dlt * dlt / tau)
        if s < best:
            best = s
            branch = i
    return best, branch


def score_azimuth(n_star, aolp, dolp, valid=True, tau=0.1, sigma=0.5):
    """Azimuth score of a camera-frame normal against one AoLP sample.

    Returns ``(score, branch)`` with ``branch`` indexing
    :func:`aolp_candidates`; an invalid sample scores 0 with branch -1.
    """
    if not valid:
        return 0.0, -1
    n = np.asarray(n_star, dtype=np.float64)
    s, b = _azimuth_score(n[0], n[1], float(aolp), float(dolp), tau, sigma)
    return float(s), int(b)


def azimuth_branches(normals, polar, tau=0.1, sigma=0.5):
    """Per-pixel branch chosen by :func:`score_azimuth` (-1 where AoLP is invalid)."""
    H, W = polar.aolp.shape
    out = np.full((H, W), -1, dtype=np.int64)
    for y, x in zip(*np.nonzero(polar.aolp_valid)):
        out[y, x] = _azimuth_score(normals[y, x, 0], normals[y, x, 1], polar.aolp[y, x],
                                   polar.dolp[y, x], tau, sigma)[1]
    return out


def true_branch(azimuth, aolp):
    """Index of the AoLP branch closest to a known azimuth."""
    c = aolp_candidates(aolp)
    d = np.abs(np.angle(np.exp(1j * (c - np.asarray(azimuth)[..., None]))))
    return np.argmin(d, axis=-1)


# -- scoring kernels -------------------------------------------------------

@numba.njit(cache=True)
def _sample_bilinear(img, x, y):
    H, W = img.shape
    x0 = int(np.floor(x))
    y0 = int(np.floor(y))
    if x0 < 0 or y0 < 0 or x0 > W - 1 or y0 > H - 1:
        return np.nan
    fx = x - x0
    fy = y - y0
    x1 = min(x0 + 1, W - 1)
    y1 = min(y0 + 1, H - 1)
    if (fx > 0 and x0 + 1 > W - 1) or (fy > 0 and y0 + 1 > H - 1):
        return np.nan
    return ((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x1])
            + fy * ((1 - fx) * img[y1, x0] + fx * img[y1, x1]))


@numba.njit(cache=True)
def _photometric(y, x, d, n0, n1, n2, gray, crmg, usecrm, K, Kinv, Rrel, trel, prm):
    """Mean over sources of 1 - bilateral NCC through the plane homography."""
    V, H, W = gray.shape
    sig_s = prm[4]
    sig_c = prm[5]
    half = int(prm[6])
    step = int(prm[7])
    rx = Kinv[0, 0, 0] * x + Kinv[0, 0, 1] * y + Kinv[0, 0, 2]
    ry = Kinv[0, 1, 0] * x + Kinv[0, 1, 1] * y + Kinv[0, 1, 2]
    rz = Kinv[0, 2, 0] * x + Kinv[0, 2, 1] * y + Kinv[0, 2, 2]
    c = d * (n0 * rx + n1 * ry + n2 * rz)
    if V < 2:
        return 1.0
    if c <= 1e-12:
        return 2.0
    ref = crmg[0] if usecrm[0, y, x] else gray[0]
    center = ref[y, x]
    Hm = np.empty((3, 3))
    M = np.empty((3, 3))
    total = 0.0
    for s in range(1, V):
        for i in range(3):
            for j in range(3):
                M[i, j] = Rrel[s, i, j] + trel[s, i] * (n0, n1, n2)[j] / c
        # Hm = K_s M Kinv_ref
        for i in range(3):
            for j in range(3):
                acc = 0.0
                for k in range(3):
                    for l in range(3):
                        acc += K[s, i, k] * M[k, l] * Kinv[0, l, j]
                Hm[i, j] = acc
        qz = Hm[2, 0] * x + Hm[2, 1] * y + Hm[2, 2]
        if qz <= 1e-12:
            total += 2.0
            continue
        qx = (Hm[0, 0] * x + Hm[0, 1] * y + Hm[0, 2]) / qz
        qy = (Hm[1, 0] * x + Hm[1, 1] * y + Hm[1, 2]) / qz
        cxi = int(np.floor(qx + 0.5))
        cyi = int(np.floor(qy + 0.5))
        if cxi < 0 or cyi < 0 or cxi >= W or cyi >= H:
            total += 2.0
            continue
        src = crmg[s] if usecrm[s, cyi, cxi] else gray[s]
        sw = 0.0
        sa = 0.0
        sb = 0.0
        saa = 0.0
        sbb = 0.0
        sab = 0.0
        out = False
        for dy in range(-half, half + 1, step):
            yy = y + dy
            if yy < 0 or yy >= H:
                continue
            for dx in range(-half, half + 1, step):
                xx = x + dx
                if xx < 0 or xx >= W:
                    continue
                a = ref[yy, xx]
                wz = Hm[2, 0] * xx + Hm[2, 1] * yy + Hm[2, 2]
                if wz <= 1e-12:
                    out = True
                    break
                b = _sample_bilinear(src, (Hm[0, 0] * xx + Hm[0, 1] * yy + Hm[0, 2]) / wz,
                                     (Hm[1, 0] * xx + Hm[1, 1] * yy + Hm[1, 2]) / wz)
                if np.isnan(b):
                    out = True
                    break
                dc = a - center
                w = np.exp(-(dx * dx + dy * dy) / (2.0 * sig_s * sig_s) - dc * dc / (2.0 * sig_c * sig_c))
                sw += w
                sa += w * a
                sb += w * b
                saa += w * a * a
                sbb += w * b * b
                sab += w * a * b
            if out:
                break
        if out or sw <= 0.0:
            total += 2.0
            continue
        ma = sa / sw
        mb = sb / sw
        va = saa / sw - ma * ma
        vb = sbb / sw - mb * mb
        if va < 1e-10 or vb < 1e-10:
            total += 1.0
            continue
        ncc = (sab / sw - ma * mb) / np.sqrt(va * vb)
        cost = 1.0 - ncc
        if cost < 0.0:
            cost = 0.0
        elif cost > 2.0:
            cost = 2.0
        total += cost
    return total / (V - 1)


@numba.njit(cache=True)
def _azimuth_term(y, x, d, n0, n1, n2, aolp, dolp, aval, K, Kinv, Rrel, trel, prm):
    tau = prm[2]
    sigma = prm[3]
    if prm[8] < 0.5:
        if not aval[0, y, x]:
            return 0.0
        return _azimuth_score(n0, n1, aolp[0, y, x], dolp[0, y, x], tau, sigma)[0]
    # multi-view average: rotate the normal into each view, read that view's AoLP
    V, H, W = aolp.shape
    rx = d * (Kinv[0, 0, 0] * x + Kinv[0, 0, 1] * y + Kinv[0, 0, 2])
    ry = d * (Kinv[0, 1, 0] * x + Kinv[0, 1, 1] * y + Kinv[0, 1, 2])
    rz = d
    acc = 0.0
    cnt = 0
    for s in range(V):
        if s == 0:
            px = np.int64(x)
            py = np.int64(y)
            m0, m1 = n0, n1
        else:
            X0 = Rrel[s, 0, 0] * rx + Rrel[s, 0, 1] * ry + Rrel[s, 0, 2] * rz + trel[s, 0]
            X1 = Rrel[s, 1, 0] * rx + Rrel[s, 1, 1] * ry + Rrel[s, 1, 2] * rz + trel[s, 1]
            X2 = Rrel[s, 2, 0] * rx + Rrel[s, 2, 1] * ry + Rrel[s, 2, 2] * rz + trel[s, 2]
            if X2 <= 1e-12:
                continue
            px = int(np.floor(K[s, 0, 0] * X0 / X2 + K[s, 0, 2] + 0.5))
            py = int(np.floor(K[s, 1, 1] * X1 / X2 + K[s, 1, 2] + 0.5))
            if px < 0 or py < 0 or px >= W or py >= H:
                continue
            m0 = Rrel[s, 0, 0] * n0 + Rrel[s, 0, 1] * n1 + Rrel[s, 0, 2] * n2
            m1 = Rrel[s, 1, 0] * n0 + Rrel[s, 1, 1] * n1 + Rrel[s, 1, 2] * n2
        if not aval[s, py, px]:
            continue
        acc += _azimuth_score(m0, m1, aolp[s, py, px], dolp[s, py, px], tau, sigma)[0]
        cnt += 1
    if cnt == 0:
        return 0.0
    return acc / cnt


@numba.njit(cache=True)
def _nd_term(y, x, d, n0, n1, n2, best_d, Kinv):
    """1 - cos between the candidate normal and the normal of its right/down neighbors."""
    H, W = best_d.shape
    if x + 1 >= W or y + 1 >= H:
        return 1.0
    dr = best_d[y, x + 1]
    dd = best_d[y + 1, x]
    if dr <= 0.0 or dd <= 0.0:
        return 1.0
    P = np.empty(3)
    A = np.empty(3)
    B = np.empty(3)
    for i in range(3):
        P[i] = d * (Kinv[0, i, 0] * x + Kinv[0, i, 1] * y + Kinv[0, i, 2])
        A[i] = dr * (Kinv[0, i, 0] * (x + 1) + Kinv[0, i, 1] * y + Kinv[0, i, 2]) - P[i]
        B[i] = dd * (Kinv[0, i, 0] * x + Kinv[0, i, 1] * (y + 1) + Kinv[0, i, 2]) - P[i]
    c0 = A[1] * B[2] - A[2] * B[1]
    c1 = A[2] * B[0] - A[0] * B[2]
    c2 = A[0] * B[1] - A[1] * B[0]
    nrm = np.sqrt(c0 * c0 + c1 * c1 + c2 * c2)
    if nrm <= 0.0:
        return 1.0
    return 1.0 - (c0 * n0 + c1 * n1 + c2 * n2) / nrm


@numba.njit(cache=True)
def _total_cost(y, x, d, n0, n1, n2, gray, crmg, usecrm, aolp, dolp, aval, best_d,
                K, Kinv, Rrel, trel, prm):
    c = _photometric(y, x, d, n0, n1, n2, gray, crmg, usecrm, K, Kinv, Rrel, trel, prm)
    if prm[0] != 0.0:
        c += prm[0] * _azimuth_term(y, x, d, n0, n1, n2, aolp, dolp, aval, K, Kinv, Rrel, trel, prm)
    if prm[1] != 0.0:
        c += prm[1] * _nd_term(y, x, d, n0, n1, n2, best_d, Kinv)
    return c


@numba.njit(cache=True)
def _plane_depth(x, y, qx, qy, dq, nq, Kinv):
    """Depth at pixel (x, y) of the plane through pixel (qx, qy) at depth dq with normal nq."""
    c = 0.0
    den = 0.0
    for i in range(3):
        rq = Kinv[0, i, 0] * qx + Kinv[0, i, 1] * qy + Kinv[0, i, 2]
        rp = Kinv[0, i, 0] * x + Kinv[0, i, 1] * y + Kinv[0, i, 2]
        c += nq[i] * dq * rq
        den += nq[i] * rp
    if den <= 1e-8:
        return -1.0
    return c / den


@numba.njit(cache=True)
def _init_best(cand_d, cand_n, valid, best_d, best_c, gray, crmg, usecrm, aolp, dolp,
               aval, K, Kinv, Rrel, trel, prm):
    H, W, _ = cand_d.shape
    ctx_d = best_d.copy()
    for y in range(H):
        for x in range(W):
            if not valid[y, x]:
                continue
            best_c[y, x] = _total_cost(y, x, cand_d[y, x, 0], cand_n[y, x, 0, 0], cand_n[y, x, 0, 1],
                                       cand_n[y, x, 0, 2], gray, crmg, usecrm, aolp, dolp, aval,
                                       ctx_d, K, Kinv, Rrel, trel, prm)


@numba.njit(cache=True, parallel=True)
def _sweep(color, cand_d, cand_n, valid, best_d, best_n, best_c, rnd, pscale, use_perturb,
           gray, crmg, usecrm, aolp, dolp, aval, K, Kinv, Rrel, trel, prm):
    H, W, NC = cand_d.shape
    nb_y = np.array([-1, 1, 0, 0])
    nb_x = np.array([0, 0, -1, 1])
    for y in numba.prange(H):
        for x in range((y + color) % 2, W, 2):
            if not valid[y, x]:
                continue
            bd = best_d[y, x]
            bn0 = best_n[y, x, 0]
            bn1 = best_n[y, x, 1]
            bn2 = best_n[y, x, 2]
            bc = best_c[y, x]
            for k in range(NC):
                d = cand_d[y, x, k]
                if d <= 0.0:
                    continue
                c = _total_cost(y, x, d, cand_n[y, x, k, 0], cand_n[y, x, k, 1], cand_n[y, x, k, 2],
                                gray, crmg, usecrm, aolp, dolp, aval, best_d, K, Kinv, Rrel, trel, prm)
                if c < bc:
                    bc = c
                    bd = d
                    bn0 = cand_n[y, x, k, 0]
                    bn1 = cand_n[y, x, k, 1]
                    bn2 = cand_n[y, x, k, 2]
            for m in range(4):
                qy = y + nb_y[m]
                qx = x + nb_x[m]
                if qy < 0 or qy >= H or qx < 0 or qx >= W or not valid[qy, qx]:
                    continue
                d = _plane_depth(x, y, qx, qy, best_d[qy, qx], best_n[qy, qx], Kinv)
                if d <= 0.0:
                    continue
                c = _total_cost(y, x, d, best_n[qy, qx, 0], best_n[qy, qx, 1], best_n[qy, qx, 2],
                                gray, crmg, usecrm, aolp, dolp, aval, best_d, K, Kinv, Rrel, trel, prm)
                if c < bc:
                    bc = c
                    bd = d
                    bn0 = best_n[qy, qx, 0]
                    bn1 = best_n[qy, qx, 1]
                    bn2 = best_n[qy, qx, 2]
            if use_perturb:
                d = bd * (1.0 + pscale * rnd[y, x, 0])
                p0 = bn0 + pscale * rnd[y, x, 1]
                p1 = bn1 + pscale * rnd[y, x, 2]
                p2 = bn2 + pscale * rnd[y, x, 3]
                nrm = np.sqrt(p0 * p0 + p1 * p1 + p2 * p2)
                if d > 0.0 and nrm > 0.0:
                    p0 /= nrm
                    p1 /= nrm
                    p2 /= nrm
                    if p2 < 0.0:
                        p0 = -p0
                        p1 = -p1
                        p2 = -p2
                    c = _total_cost(y, x, d, p0, p1, p2, gray, crmg, usecrm, aolp, dolp, aval,
                                    best_d, K, Kinv, Rrel, trel, prm)
                    if c < bc:
                        bc = c
                        bd = d
                        bn0 = p0
                        bn1 = p1
                        bn2 = p2
            best_d[y, x] = bd
            best_n[y, x, 0] = bn0
            best_n[y, x, 1] = bn1
            best_n[y, x, 2] = bn2
            best_c[y, x] = bc


# -- bundle preparation ----------------------------------------------------

@dataclass
class PreparedBundle:
    """Stacked per-view arrays in the layout the kernels expect (view 0 = reference)."""

    gray: np.ndarray
    crmg: np.ndarray
    usecrm: np.ndarray
    aolp: np.ndarray
    dolp: np.ndarray
    aval: np.ndarray
    K: np.ndarray
    Kinv: np.ndarray
    Rrel: np.ndarray
    trel: np.ndarray
    prm: np.ndarray


def _params(cfg):
    half = cfg.ncc_window // 2
    return np.array([cfg.lambda1, cfg.lambda2, cfg.tau, cfg.sigma, cfg.ncc_sigma_spatial,
                     cfg.ncc_sigma_color, half, cfg.ncc_step,
                     1.0 if cfg.azimuth_mode == "multiview" else 0.0])


def prepare_bundle(ref, sources, cfg):
    """Stack reference and source views for the scoring kernels."""
    views = [ref] + list(sources)
    shape = ref.camera.shape
    for v in views:
        if v.camera.shape != shape or v.image.shape[:2] != shape:
            raise DimensionError("all views of a bundle must share one image size")
    gray = np.stack([luminance(v.image) for v in views])
    crmg = np.stack([luminance(v.crm) if v.crm is not None else luminance(v.image) for v in views])
    use = np.zeros(gray.shape, dtype=bool)
    for i, v in enumerate(views):
        if v.crm is not None and v.reflective is not None:
            box = ndimage.uniform_filter(v.reflective.astype(np.float64), size=cfg.ncc_window,
                                         mode="constant") * cfg.ncc_window ** 2
            use[i] = np.round(box) > cfg.crm_pixel_threshold
    aolp = np.stack([v.polar.aolp for v in views])
    dolp = np.stack([v.polar.dolp for v in views])
    aval = np.stack([v.polar.aolp_valid for v in views])
    K = np.stack([v.camera.K for v in views])
    Kinv = np.stack([np.linalg.inv(k) for k in K])
    T = [ref.camera.relative_to(v.camera) for v in views]
    Rrel = np.stack([t[:3, :3] for t in T])
    trel = np.stack([t[:3, 3] for t in T])
    return PreparedBundle(gray, crmg, use, aolp, dolp, aval, K, Kinv, Rrel, trel, _params(cfg))


def select_sources(cams, ref_index, n):
    """Indices of the ``n`` cameras closest to the reference camera center."""
    c = cams[ref_index].center
    d = np.array([np.linalg.norm(cam.center - c) if i != ref_index else np.inf
                  for i, cam in enumerate(cams)])
    return [int(i) for i in np.argsort(d, kind="stable")[:min(n, len(cams) - 1)]]


# -- hypotheses and propagation -------------------------------------------

def init_hypotheses(ref, cfg, rng=None):
    """Ten depth/normal candidates per pixel from the initial depth, normal and AoLP.

    Candidates: (d, n), (d_prt, n), then (d, n_i) and (d_prt, n_i) for the
    four AoLP branches.  Holes draw d uniformly from the valid depth range;
    pixels without a usable initial normal use zenith pi/4 and a
    fronto-parallel ``n``.  Dark pixels are not processed.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    depth = np.asarray(ref.init_depth, dtype=np.float64)
    H, W = depth.shape
    good = depth > 0
    if not good.any():
        raise InitializationError("initial depth map has no valid pixels")
    lo, hi = depth[good].min(), depth[good].max()
    hole_d = rng.uniform(lo, hi, size=(H, W)) if hi > lo else np.full((H, W), lo)
    d = np.where(good, depth, hole_d)
    u = rng.uniform(-cfg.perturb_rel, cfg.perturb_rel, size=(H, W))
    d_prt = d * (1.0 + u)

    if ref.init_normal is None:
        n = np.zeros((H, W, 3))
    else:
        n = np.asarray(ref.init_normal, dtype=np.float64)
    nrm = np.linalg.norm(n, axis=-1)
    has_n = nrm > 1e-9
    n = np.where(has_n[..., None], n / np.where(has_n, nrm, 1.0)[..., None], 0.0)
    theta = np.where(has_n, np.arccos(np.clip(np.abs(n[..., 2]), -1.0, 1.0)), ZENITH_FALLBACK)
    theta = np.clip(theta, 0.0, ZENITH_MAX)
    n = np.where(has_n[..., None], n * np.where(n[..., 2:3] < 0, -1.0, 1.0),
                 np.array([0.0, 0.0, 1.0]))

    phis = aolp_candidates(ref.polar.aolp)
    n_aolp = normal_from_aolp(phis, np.repeat(theta[..., None], 4, axis=-1))

    cand_d = np.empty((H, W, N_CANDIDATES))
    cand_n = np.empty((H, W, N_CANDIDATES, 3))
    cand_d[..., 0], cand_n[..., 0, :] = d, n
    cand_d[..., 1], cand_n[..., 1, :] = d_prt, n
    for i in range(4):
        cand_d[..., 2 + 2 * i], cand_n[..., 2 + 2 * i, :] = d, n_aolp[..., i, :]
        cand_d[..., 3 + 2 * i], cand_n[..., 3 + 2 * i, :] = d_prt, n_aolp[..., i, :]

    valid = ref.polar.valid.copy()
    cand_d[~valid] = 0.0
    best_d = np.where(valid, d, 0.0)
    best_n = np.where(valid[..., None], n, 0.0)
    return HypothesisField(cand_d, cand_n, best_d, best_n, np.full((H, W), np.inf), valid)


def evaluate_initial(field, bundle):
    """Cost of candidate 0 at every valid pixel; neighbours use the initial depths."""
    b = bundle
    _init_best(field.cand_depth, field.cand_normal, field.valid, field.depth, field.cost, b.gray, b.crmg, b.usecrm,
               b.aolp, b.dolp, b.aval, b.K, b.Kinv, b.Rrel, b.trel, b.prm)
    return field


def perturbation_noise(shape, sweeps, seed):
    """Pre-drawn perturbation offsets, one ``(H, W, 4)`` block per sweep."""
    rng = np.random.default_rng(seed + 7919)
    return rng.uniform(-1.0, 1.0, size=(sweeps,) + tuple(shape) + (4,))


def propagate(field, bundle, cfg, perturb=True, sweeps=None):
    """Red-black PatchMatch sweeps; updates ``field`` in place and returns it.

    A pixel's stored best cost only changes when a candidate beats it, so
    the stored costs never increase.
    """
    sweeps = cfg.sweeps if sweeps is None else sweeps
    b = bundle
    if np.isinf(field.cost[field.valid]).any():
        evaluate_initial(field, b)
    noise = perturbation_noise(field.shape, max(sweeps, 1), cfg.seed)
    for s in range(sweeps):
        scale = cfg.perturb_rel * 0.5 ** s
        for color in (0, 1):
            _sweep(color, field.cand_depth, field.cand_normal, field.valid, field.depth, field.normal,
                   field.cost, noise[s], scale, perturb and scale > 0, b.gray, b.crmg, b.usecrm,
                   b.aolp, b.dolp, b.aval, b.K, b.Kinv, b.Rrel, b.trel, b.prm)
    return field


def pixel_cost(bundle, field, y, x, d, n):
    """Total cost of hypothesis ``(d, n)`` at pixel ``(x, y)`` given the field's current depths."""
    b = bundle
    return _total_cost(int(y), int(x), float(d), float(n[0]), float(n[1]), float(n[2]), b.gray, b.crmg,
                       b.usecrm, b.aolp, b.dolp, b.aval, field.depth, b.K, b.Kinv, b.Rrel, b.trel, b.prm)


def score_photometric(bundle, y, x, d, n):
    b = bundle
    return _photometric(int(y), int(x), float(d), float(n[0]), float(n[1]), float(n[2]), b.gray,
                        b.crmg, b.usecrm, b.K, b.Kinv, b.Rrel, b.trel, b.prm)


def score_nd(d_star, n_star, depth, cam, y, x):
    """``1 - n_grad . n_star`` with ``n_grad`` from the right/down neighbours of ``depth``."""
    Kinv = np.linalg.inv(cam.K)[None]
    n = np.asarray(n_star, dtype=np.float64)
    return _nd_term(int(y), int(x), float(d_star), n[0], n[1], n[2],
                    np.asarray(depth, dtype=np.float64), Kinv)


def run_patchmatch(ref, sources, cfg, perturb=True):
    bundle = prepare_bundle(ref, sources, cfg)
    field = init_hypotheses(ref, cfg)
    evaluate_initial(field, bundle)
    return propagate(field, bundle, cfg, perturb=perturb), bundle


# -- consistency checks ----------------------------------------------------

def _sample_depth(depth, q):
    """Bilinear depth lookup when all four neighbours are valid, else nearest; 0 if unusable."""
    H, W = depth.shape
    x, y = q[..., 0], q[..., 1]
    inside = (x >= -0.5) & (y >= -0.5) & (x <= W - 0.5) & (y <= H - 0.5) & np.isfinite(x) & np.isfinite(y)
    xs = np.where(inside, x, 0.0)
    ys = np.where(inside, y, 0.0)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, W - 1)
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, H - 1)
    x1 = np.clip(x0 + 1, 0, W - 1)
    y1 = np.clip(y0 + 1, 0, H - 1)
    fx = np.clip(xs - x0, 0.0, 1.0)
    fy = np.clip(ys - y0, 0.0, 1.0)
    d00, d01, d10, d11 = depth[y0, x0], depth[y0, x1], depth[y1, x0], depth[y1, x1]
    bil = (1 - fy) * ((1 - fx) * d00 + fx * d01) + fy * ((1 - fx) * d10 + fx * d11)
    all4 = (d00 > 0) & (d01 > 0) & (d10 > 0) & (d11 > 0)
    xn = np.clip(np.round(xs).astype(np.int64), 0, W - 1)
    yn = np.clip(np.round(ys).astype(np.int64), 0, H - 1)
    out = np.where(all4, bil, depth[yn, xn])
    return np.where(inside, out, 0.0)


def _project(cam, Xc_world):
    Xc = cam.to_camera(Xc_world)
    z = Xc[..., 2]
    zs = np.where(z > 1e-12, z, 1.0)
    q = np.stack([cam.fx * Xc[..., 0] / zs + cam.cx, cam.fy * Xc[..., 1] / zs + cam.cy], axis=-1)
    return q, z


def geometric_check(depth_ref, cam_ref, depths_src, cams_src, cfg, return_counts=False):
    """Forward-backward reprojection test against each source depth map.

    A pixel passes a source if the round trip lands within
    ``geo_px_thresh`` pixels and the source depth agrees to
    ``geo_depth_rel_thresh``; it is valid when it passes at least
    ``min(min_consistent_views, n_sources)`` sources.
    """
    H, W = depth_ref.shape
    ok_ref = depth_ref > 0
    p = pixel_grid(H, W)
    X = cam_ref.to_world(backproject_camera(cam_ref, p, depth_ref))
    count = np.zeros((H, W), dtype=np.int64)
    for dsrc, cam in zip(depths_src, cams_src):
        q, z = _project(cam, X)
        ds = _sample_depth(dsrc, q)
        good = ok_ref & (z > 1e-12) & (ds > 0)
        Xb = cam.to_world(backproject_camera(cam, q, np.where(good, ds, 1.0)))
        pb, zb = _project(cam_ref, Xb)
        err = np.linalg.norm(pb - p, axis=-1)
        rel = np.abs(ds - z) / np.where(z > 1e-12, z, 1.0)
        good &= (zb > 1e-12) & (err <= cfg.geo_px_thresh) & (rel <= cfg.geo_depth_rel_thresh)
        count += good
    need = min(cfg.min_consistent_views, max(len(cams_src), 1))
    mask = ok_ref & (count >= need)
    return (mask, count) if return_counts else mask


def polarimetric_residuals(n_view, aolp):
    """Branch-minimized residuals of a camera-frame normal against one AoLP.

    ``eps`` measures the normal's component along the tangent direction
    ``(-sin phi, cos phi, 0)`` and ``eps_hat`` along ``(cos phi, sin phi, 0)``;
    each is minimized over the four AoLP branches.
    """
    phis = aolp_candidates(aolp)
    c, s = np.cos(phis), np.sin(phis)
    nx, ny = n_view[..., 0:1], n_view[..., 1:2]
    eps = np.abs(-s * nx + c * ny).min(axis=-1)
    eps_hat = np.abs(c * nx + s * ny).min(axis=-1)
    return eps, eps_hat


def polarimetric_check(n_opt, depth_ref, cam_ref, views, cfg, depths=None, return_eps=False):
    """Average polarimetric residual over the views that see each pixel.

    ``views`` is a list of ``(camera, PolarMaps)`` starting with the
    reference.  A view counts for a pixel when the point projects inside
    it onto a valid AoLP sample and, if ``depths`` are given, the view's
    depth agrees within ``geo_depth_rel_thresh``.  Pixels seen by no view
    are kept (nothing to test against).
    """
    H, W = depth_ref.shape
    n = np.asarray(n_opt, dtype=np.float64)
    ok = (depth_ref > 0) & (np.linalg.norm(n, axis=-1) > 0)
    X = cam_ref.to_world(backproject_camera(cam_ref, pixel_grid(H, W), np.where(ok, depth_ref, 1.0)))
    n_world = n @ cam_ref.R
    total = np.zeros((H, W))
    f = np.zeros((H, W), dtype=np.int64)
    for k, (cam, polar) in enumerate(views):
        q, z = _project(cam, X)
        xi = np.round(q[..., 0]).astype(np.int64)
        yi = np.round(q[..., 1]).astype(np.int64)
        inside = ok & (z > 1e-12) & (xi >= 0) & (yi >= 0) & (xi < cam.width) & (yi < cam.height)
        xi, yi = np.where(inside, xi, 0), np.where(inside, yi, 0)
        use = inside & polar.aolp_valid[yi, xi]
        if depths is not None and depths[k] is not None:
            dv = depths[k][yi, xi]
            use &= (dv > 0) & (np.abs(dv - z) <= cfg.geo_depth_rel_thresh * np.abs(z))
        n_view = n_world @ cam.R.T
        eps, eps_hat = polarimetric_residuals(n_view, polar.aolp[yi, xi])
        total += np.where(use, eps + eps_hat, 0.0)
        f += use
    eps = np.where(f > 0, total / (2.0 * np.maximum(f, 1)), 0.0)
    if np.any(ok & (f == 0)):
        log.debug("%d pixels seen by no polarized view; polarimetric check skipped there",
                  int(np.sum(ok & (f == 0))))
    mask = ok & (eps <= cfg.polar_eps_thresh)
    return (mask, eps) if return_eps else mask


# -- back-projection -------------------------------------------------------

def backproject_to_gaussians(depth, normal, mask, image, cam, voxel=None, opacity=0.5):
    """New flat Gaussians at the surviving pixels.

    Centers are the back-projected pixels, the shortest axis follows the
    normal, tangential scale is the pixel footprint ``d * sqrt(2) / f`` and
    colors come from ``image``.  With ``voxel`` set, only the first
    surviving pixel (row-major) per voxel is kept.  Pixels without a
    normal are skipped.
    """
    normal = np.asarray(normal, dtype=np.float64)
    ys, xs = np.nonzero(mask & (depth > 0) & (np.linalg.norm(normal, axis=-1) > 0))
    d = depth[ys, xs]
    pix = np.stack([xs, ys], axis=-1).astype(np.float64)
    Xw = cam.to_world(backproject_camera(cam, pix, d))
    nw = normal[ys, xs] @ cam.R
    if voxel:
        keys = np.floor(Xw / voxel).astype(np.int64)
        _, first = np.unique(keys, axis=0, return_index=True)
        keep = np.sort(first)
        Xw, nw, d, ys, xs = Xw[keep], nw[keep], d[keep], ys[keep], xs[keep]
    f = 0.5 * (cam.fx + cam.fy)
    sigma = d * np.sqrt(2.0) / f
    return gaussians_from_surfels(Xw, nw, np.asarray(image)[ys, xs], sigma, opacity)


def coverage(alpha, foreground, min_alpha=0.5):
    """Fraction of foreground pixels whose accumulated alpha reaches ``min_alpha``."""
    fg = np.asarray(foreground, dtype=bool)
    if not fg.any():
        return 1.0
    return float(np.mean(alpha[fg] >= min_alpha))


def densify_schedule(step, start=1000, stop=7000, interval=100):
    return bool(start <= step <= stop and step % interval == 0)
