"""Polarization-guided photometric correction.

Reflective pixels are found from DoLP and brightness, a reflection-invariant
chromatic key (max minus min over RGB) guides a diffuse-color transfer from
non-reflective neighbours, and the resulting color refinement maps (CRMs)
supervise the rendered colors through a masked L1 + D-SSIM loss.
"""

import functools
import logging
from dataclasses import dataclass

import numba
import numpy as np
from scipy import ndimage, sparse

from .core import aolp_dolp, intensity_image, stokes_from_angles, angle_stack
from .errors import CorrectionUnavailableError, DimensionError, ConfigError

log = logging.getLogger(__name__)


@dataclass
class CorrectionConfig:
    dolp_spec_min: float = 0.3
    dolp_over_max: float = 0.1
    intensity_min: float = 160.0 / 255.0
    mahalanobis_max: float = 0.8
    rho_d: float = 1.0
    search_radius: int = 64
    lambda_dssim: float = 0.2
    lambda_ref: float = 1.0
    reflective_pixel_threshold: int = 10
    opening_size: int = 3

    def __post_init__(self):
        if not 0 <= self.dolp_over_max < self.dolp_spec_min <= 1:
            raise ConfigError("need 0 <= dolp_over_max < dolp_spec_min <= 1")
        if not 0 <= self.intensity_min <= 1:
            raise ConfigError("intensity_min must lie in [0, 1]")
        if self.mahalanobis_max <= 0 or self.search_radius < 1:
            raise ConfigError("mahalanobis_max and search_radius must be positive")
        if not 0 <= self.lambda_dssim <= 1 or self.lambda_ref < 0 or self.rho_d < 0:
            raise ConfigError("loss weights out of range")
        if self.reflective_pixel_threshold < 0 or self.opening_size < 1:
            raise ConfigError("reflective_pixel_threshold/opening_size out of range")


@dataclass
class ReflectiveMasks:
    specular: np.ndarray
    overexposed: np.ndarray
    non_reflective: np.ndarray

    @property
    def reflective(self):
        return self.specular | self.overexposed

    @property
    def shape(self):
        return self.specular.shape


@dataclass
class CrmSet:
    pri: np.ndarray
    i_diff: np.ndarray
    i_chro: np.ndarray
    i_prop: np.ndarray
    prop_valid: np.ndarray


# -- localization and keys -------------------------------------------------

def localize_reflective(polar, intensity, cfg=None, foreground=None):
    """Specular (high DoLP, bright) and overexposed (low DoLP, bright) masks.

    ``foreground`` defaults to the non-dark pixels of ``polar``.  Both masks
    are cleaned by a binary opening of size ``cfg.opening_size``.
    """
    cfg = cfg or CorrectionConfig()
    intensity = np.asarray(intensity, dtype=np.float64)
    bright_src = intensity.max(axis=-1) if intensity.ndim == 3 else intensity
    if bright_src.shape != polar.dolp.shape:
        raise DimensionError(f"intensity {bright_src.shape} vs polar maps {polar.dolp.shape}")
    fg = polar.valid if foreground is None else np.asarray(foreground, dtype=bool)
    rho = polar.dolp
    bright = (bright_src >= cfg.intensity_min) & (bright_src <= 1.0 + 1e-9)
    spec = fg & bright & (rho >= cfg.dolp_spec_min) & (rho <= 1.0)
    over = fg & bright & (rho >= 0.0) & (rho <= cfg.dolp_over_max)
    if cfg.opening_size > 1:
        k = np.ones((cfg.opening_size, cfg.opening_size), dtype=bool)
        spec = ndimage.binary_opening(spec, structure=k)
        over = ndimage.binary_opening(over, structure=k)
    return ReflectiveMasks(spec, over, fg & ~spec & ~over)


def compute_pri(capture):
    """Max-minus-min over RGB, averaged uniformly over the four angle images."""
    imgs = angle_stack(capture)
    return (imgs.max(axis=-1) - imgs.min(axis=-1)).mean(axis=0)


def compute_idiff(stokes):
    """Diffuse estimate ``(s0 - (I_max - I_min)) / 2`` per channel, clamped at 0.

    ``I_max``/``I_min`` are the extremes of the Malus sinusoid through the
    four angle images, so ``I_max - I_min = sqrt(s1^2 + s2^2)``.  The raw
    max/min of the four samples would fall short of that by up to a factor
    ``1/sqrt(2)`` depending on the AoLP.
    """
    amp = np.hypot(stokes.s1, stokes.s2)
    return np.maximum(0.5 * (stokes.s0 - amp), 0.0)


def _ring_offsets(radius):
    r = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(r, r, indexing="ij")
    dy, dx = dy.ravel(), dx.ravel()
    keep = (dy != 0) | (dx != 0)
    dy, dx = dy[keep], dx[keep]
    order = np.lexsort((dx, dy, dy * dy + dx * dx))
    return dy[order].astype(np.int64), dx[order].astype(np.int64)


@numba.njit(cache=True)
def _propagate_kernel(i_diff, pri, reflective, donor, dy, dx, inv_std, thresh):
    H, W = pri.shape
    i_prop = np.zeros_like(i_diff)
    valid = np.zeros((H, W), dtype=np.bool_)
    for y in range(H):
        for x in range(W):
            if not reflective[y, x]:
                continue
            p = pri[y, x]
            for k in range(dy.shape[0]):
                yy = y + dy[k]
                xx = x + dx[k]
                if yy < 0 or yy >= H or xx < 0 or xx >= W or not donor[yy, xx]:
                    continue
                if abs(pri[yy, xx] - p) * inv_std < thresh:
                    for c in range(i_diff.shape[2]):
                        i_prop[y, x, c] = i_diff[yy, xx, c]
                    valid[y, x] = True
                    break
    return i_prop, valid


def propagate_diffuse(i_diff, pri, masks, cfg=None):
    """Copy ``i_diff`` from the nearest PRI-similar non-reflective pixel.

    Similarity is the one-dimensional Mahalanobis distance in PRI using the
    spread of non-reflective PRI values.  Returns ``(i_prop, prop_valid)``;
    both are zero/false outside the reflective masks.
    """
    cfg = cfg or CorrectionConfig()
    donor = masks.non_reflective
    if not donor.any():
        raise CorrectionUnavailableError("no non-reflective pixels to propagate from")
    std = float(np.std(pri[donor]))
    inv_std = 1.0 / max(std, 1e-6)
    dy, dx = _ring_offsets(int(cfg.search_radius))
    i_diff = np.ascontiguousarray(i_diff, dtype=np.float64)
    return _propagate_kernel(i_diff, np.ascontiguousarray(pri, dtype=np.float64),
                             np.ascontiguousarray(masks.reflective), np.ascontiguousarray(donor),
                             dy, dx, inv_std, float(cfg.mahalanobis_max))


def compute_ichro(i_prop, i_diff, cfg=None):
    """``rho_d * I_prop / (sum_c I_prop + mean_c I_diff)`` per channel."""
    cfg = cfg or CorrectionConfig()
    denom = i_prop.sum(axis=-1) + i_diff.mean(axis=-1)
    return cfg.rho_d * i_prop / np.maximum(denom, 1e-8)[..., None]


def build_crms(capture, cfg=None, foreground=None):
    """Run localization, PRI, I_diff, propagation and I_chro on one capture.

    Returns ``(masks, crm, stokes, polar)``.
    """
    cfg = cfg or CorrectionConfig()
    stokes = stokes_from_angles(capture)
    polar = aolp_dolp(stokes)
    intensity = intensity_image(stokes)
    masks = localize_reflective(polar, intensity, cfg, foreground)
    pri = compute_pri(capture)
    i_diff = compute_idiff(stokes)
    if masks.reflective.any():
        i_prop, prop_valid = propagate_diffuse(i_diff, pri, masks, cfg)
    else:
        i_prop, prop_valid = np.zeros_like(i_diff), np.zeros(pri.shape, dtype=bool)
    i_chro = compute_ichro(i_prop, i_diff, cfg)
    return masks, CrmSet(pri, i_diff, i_chro, i_prop, prop_valid), stokes, polar


def crm_image(intensity, crm, masks):
    """Intensity image with CRM targets pasted into the reflective regions."""
    out = np.array(intensity, dtype=np.float64, copy=True)
    spec = masks.specular & crm.prop_valid
    over = masks.overexposed & crm.prop_valid
    out[spec] = crm.i_diff[spec]
    out[over] = crm.i_chro[over]
    return out


# -- SSIM ------------------------------------------------------------------

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _blur_matrix(n, size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """Dense ``(n, n)`` operator: mirror padding followed by a Gaussian filter."""
    half = size // 2
    g = np.exp(-0.5 * (np.arange(size) - half) ** 2 / sigma ** 2)
    g /= g.sum()
    idx = np.pad(np.arange(n), half, mode="reflect")
    A = np.zeros((n, n))
    for i in range(n):
        np.add.at(A[i], idx[i:i + size], g)
    return A


class _Blur:
    def __init__(self, H, W):
        if H < SSIM_WINDOW or W < SSIM_WINDOW:
            raise DimensionError(f"image {H}x{W} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
        self.Ay = sparse.csr_matrix(_blur_matrix(H))
        self.Ax = sparse.csr_matrix(_blur_matrix(W))
        self.AyT = self.Ay.T.tocsr()
        self.AxT = self.Ax.T.tocsr()

    @staticmethod
    def _apply(Ay, Ax, img):
        # img (H, W, C): rows with Ay, then columns with Ax
        H, W, C = img.shape
        t = (Ay @ img.reshape(H, W * C)).reshape(H, W, C).transpose(1, 0, 2).reshape(W, H * C)
        return (Ax @ t).reshape(W, H, C).transpose(1, 0, 2)

    def __call__(self, img):
        return self._apply(self.Ay, self.Ax, img)

    def adjoint(self, img):
        return self._apply(self.AyT, self.AxT, img)


@functools.lru_cache(maxsize=32)
def _blur_for(H, W):
    return _Blur(H, W)


def _as3(img):
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def ssim_terms(a, b, blur=None):
    a, b = _as3(a), _as3(b)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    blur = blur or _blur_for(*a.shape[:2])
    mx, my = blur(a), blur(b)
    sxx = blur(a * a) - mx * mx
    syy = blur(b * b) - my * my
    sxy = blur(a * b) - mx * my
    A1 = 2 * mx * my + SSIM_C1
    A2 = 2 * sxy + SSIM_C2
    B1 = mx * mx + my * my + SSIM_C1
    B2 = sxx + syy + SSIM_C2
    return dict(a=a, b=b, mx=mx, my=my, A1=A1, A2=A2, B1=B1, B2=B2, S=A1 * A2 / (B1 * B2), blur=blur)


def ssim_map(a, b):
    return ssim_terms(a, b)["S"]


def _weighted_dssim(a, b, weight, want_grad):
    """``sum(w * (1 - S) / 2) / (sum(w) * C)`` and its gradient w.r.t. ``a``."""
    t = ssim_terms(a, b)
    C = t["a"].shape[2]
    w = np.broadcast_to(_as3(weight), t["S"].shape)
    norm = w[..., 0].sum() * C
    if norm == 0:
        return (0.0, np.zeros_like(t["a"])) if want_grad else 0.0
    val = float(np.sum(w * (1.0 - t["S"]) / 2.0) / norm)
    if not want_grad:
        return val
    A1, A2, B1, B2 = t["A1"], t["A2"], t["B1"], t["B2"]
    mx, my = t["mx"], t["my"]
    den = B1 * B2
    dS_dmx = (2 * my * A2) / den - A1 * A2 * 2 * mx / (B1 * den)
    dS_dsxx = -A1 * A2 / (B1 * B2 * B2)
    dS_dsxy = 2 * A1 / den
    g = -0.5 * w / norm  # d value / d S
    gm = g * (dS_dmx - 2 * mx * dS_dsxx - my * dS_dsxy)
    gxx = g * dS_dsxx
    gxy = g * dS_dsxy
    blur = t["blur"]
    grad = blur.adjoint(gm) + 2 * t["a"] * blur.adjoint(gxx) + t["b"] * blur.adjoint(gxy)
    return val, grad


def dssim(a, b):
    """Structural dissimilarity ``(1 - SSIM) / 2`` averaged over pixels and channels.

    11x11 Gaussian window (sigma 1.5), mirror padding at the borders.
    """
    return _weighted_dssim(a, b, np.ones(_as3(a).shape[:2]), False)


def dssim_grad(a, b):
    """``(dssim(a, b), d dssim / d a)``."""
    val, g = _weighted_dssim(a, b, np.ones(_as3(a).shape[:2]), True)
    return val, g.reshape(np.shape(a))


def _mask_crop(mask, margin=5):
    """Bounding box of ``mask`` grown by ``margin`` and to at least the window size."""
    H, W = mask.shape
    if H < SSIM_WINDOW or W < SSIM_WINDOW:
        raise DimensionError(f"image {H}x{W} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    ys, xs = np.nonzero(mask)
    out = []
    for lo, hi, n in ((ys.min(), ys.max(), H), (xs.min(), xs.max(), W)):
        lo, hi = max(lo - margin, 0), min(hi + margin + 1, n)
        short = SSIM_WINDOW - (hi - lo)
        if short > 0:
            lo = max(lo - (short + 1) // 2, 0)
            hi = min(lo + SSIM_WINDOW, n)
            lo = hi - SSIM_WINDOW
        out.append(slice(lo, hi))
    return tuple(out)


def masked_l1(render, target, mask, want_grad=False):
    """Mean absolute error over masked pixels and all channels."""
    r, t = _as3(render), _as3(target)
    n = int(mask.sum()) * r.shape[2]
    if n == 0:
        return (0.0, np.zeros_like(r)) if want_grad else 0.0
    diff = r - t
    val = float(np.abs(diff)[mask].sum() / n)
    if not want_grad:
        return val
    g = np.zeros_like(r)
    g[mask] = np.sign(diff[mask]) / n
    return val, g


def masked_dssim(render, target, mask, want_grad=False):
    """D-SSIM on the bounding box of ``mask`` (grown by 5 px), averaged over masked pixels."""
    r, t = _as3(render), _as3(target)
    if not mask.any():
        return (0.0, np.zeros_like(r)) if want_grad else 0.0
    sl = _mask_crop(mask)
    res = _weighted_dssim(r[sl], t[sl], mask[sl].astype(np.float64), want_grad)
    if not want_grad:
        return res
    g = np.zeros_like(r)
    g[sl] = res[1]
    return res[0], g


def region_loss(render, target, mask, lambda_dssim, want_grad=False):
    """``(1 - lambda) * L1 + lambda * D-SSIM`` restricted to ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    if lambda_dssim == 0:
        return masked_l1(render, target, mask, want_grad)
    l1 = masked_l1(render, target, mask, want_grad)
    ds = masked_dssim(render, target, mask, want_grad)
    if not want_grad:
        return (1 - lambda_dssim) * l1 + lambda_dssim * ds
    return ((1 - lambda_dssim) * l1[0] + lambda_dssim * ds[0],
            (1 - lambda_dssim) * l1[1] + lambda_dssim * ds[1])


def reflective_loss(render, crm, masks, cfg=None, want_grad=False):
    """Specular pixels against I_diff plus overexposed pixels against I_chro.

    Pixels where propagation found no donor are left out of both terms.
    """
    cfg = cfg or CorrectionConfig()
    render = _as3(render)
    if render.shape[:2] != crm.pri.shape:
        raise DimensionError(f"render {render.shape[:2]} vs CRM {crm.pri.shape}")
    spec = masks.specular & crm.prop_valid
    over = masks.overexposed & crm.prop_valid
    ls = region_loss(render, crm.i_diff, spec, cfg.lambda_dssim, want_grad)
    lo = region_loss(render, crm.i_chro, over, cfg.lambda_dssim, want_grad)
    if not want_grad:
        return ls + lo
    return ls[0] + lo[0], ls[1] + lo[1]
