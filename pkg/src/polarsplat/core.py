"""Stokes-vector math, polarization maps and the pinhole camera model.

Image arrays are ``(H, W)`` or ``(H, W, C)`` numpy arrays.  Computation is
done in float64; files on disk store float32.  Pixel coordinates are
``(x, y) = (column, row)`` with integer values at pixel centers.

Camera frame: x right, y down, z forward (depth = z > 0).  Surface normals
expressed in a camera frame are oriented along the viewing ray
(``n . ray >= 0``), so a fronto-parallel surface has normal ``(0, 0, 1)``.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError, DataError, DimensionError, DomainError

#: Pixels with s0 below this (normalized units) carry no usable polarization.
EPS_DARK = 1e-4
#: DoLP below this leaves the AoLP undefined.
EPS_AOLP = 1e-9

ANGLES_DEG = (0, 45, 90, 135)


@dataclass
class CameraModel:
    """Pinhole camera with a rigid world-to-camera transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_cam: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.world_to_cam = np.asarray(self.world_to_cam, dtype=np.float64).reshape(4, 4)
        self.fx, self.fy = float(self.fx), float(self.fy)
        self.cx, self.cy = float(self.cx), float(self.cy)
        self.width, self.height = int(self.width), int(self.height)
        if self.fx <= 0 or self.fy <= 0:
            raise DomainError("focal lengths must be positive")
        R = self.world_to_cam[:3, :3]
        if np.abs(R.T @ R - np.eye(3)).max() >= 1e-6:
            raise DomainError("world_to_cam rotation is not orthonormal")

    @property
    def R(self):
        return self.world_to_cam[:3, :3]

    @property
    def t(self):
        return self.world_to_cam[:3, 3]

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def cam_to_world(self):
        T = np.eye(4)
        T[:3, :3] = self.R.T
        T[:3, 3] = -self.R.T @ self.t
        return T

    @property
    def center(self):
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    @property
    def shape(self):
        return (self.height, self.width)

    def to_camera(self, X):
        X = np.asarray(X, dtype=np.float64)
        return X @ self.R.T + self.t

    def to_world(self, Xc):
        Xc = np.asarray(Xc, dtype=np.float64)
        return (Xc - self.t) @ self.R

    def relative_to(self, other):
        """4x4 transform mapping this camera's frame into ``other``'s frame."""
        return other.world_to_cam @ self.cam_to_world

    def scaled(self, factor):
        """Same pose, image resampled by ``factor``."""
        return CameraModel(self.fx * factor, self.fy * factor,
                           (self.cx + 0.5) * factor - 0.5, (self.cy + 0.5) * factor - 0.5,
                           int(round(self.width * factor)), int(round(self.height * factor)),
                           self.world_to_cam.copy())


@dataclass
class PolarizedCapture:
    """Four linear-intensity RGB images behind a polarizer at 0/45/90/135 deg.

    ``images`` has shape ``(4, H, W, 3)``.
    """

    view_id: int
    images: np.ndarray
    camera: CameraModel

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4 or self.images.shape[0] != 4:
            raise DimensionError(f"expected (4, H, W, C) angle stack, got {self.images.shape}")
        if not np.all(np.isfinite(self.images)):
            raise DataError("angle images contain non-finite samples")
        if np.any(self.images < 0):
            raise DataError("angle images contain negative intensity")

    @property
    def shape(self):
        return self.images.shape[1:3]


@dataclass
class StokesImage:
    s0: np.ndarray
    s1: np.ndarray
    s2: np.ndarray

    def stack(self):
        return np.stack([self.s0, self.s1, self.s2])

    def luminance(self):
        """Channel-mean Stokes components as three ``(H, W)`` maps."""
        def lum(a):
            return a.mean(axis=-1) if a.ndim == 3 else a
        return lum(self.s0), lum(self.s1), lum(self.s2)


@dataclass
class PolarMaps:
    """AoLP in [0, pi), DoLP in [0, 1] and validity flags.

    ``valid`` is false where s0 < EPS_DARK; ``aolp_valid`` additionally
    requires a nonzero linear component.
    """

    aolp: np.ndarray
    dolp: np.ndarray
    valid: np.ndarray
    aolp_valid: np.ndarray

    @property
    def shape(self):
        return self.aolp.shape


def angle_stack(capture):
    if isinstance(capture, PolarizedCapture):
        return capture.images
    imgs = capture
    if isinstance(imgs, (list, tuple)):
        shapes = {np.shape(i) for i in imgs}
        if len(imgs) != 4 or len(shapes) != 1:
            raise DimensionError("need four same-sized angle images")
        imgs = np.stack([np.asarray(i, dtype=np.float64) for i in imgs])
    imgs = np.asarray(imgs, dtype=np.float64)
    if imgs.shape[0] != 4:
        raise DimensionError("need four angle images")
    if np.isnan(imgs).any():
        raise DataError("angle images contain NaN")
    return imgs


def stokes_from_angles(capture):
    """Linear Stokes components from a 0/45/90/135 polarizer stack.

    ``capture`` is a :class:`PolarizedCapture` or anything stackable to
    ``(4, H, W[, C])``.  The linear part is scaled down where sensor noise
    pushes ``s1^2 + s2^2`` above ``s0^2``.
    """
    I0, I45, I90, I135 = angle_stack(capture)
    s0 = I0 + I90
    s1 = I0 - I90
    s2 = I45 - I135
    lin = np.hypot(s1, s2)
    over = lin > s0
    if np.any(over):
        scale = np.where(over, s0 / np.where(lin > 0, lin, 1.0), 1.0)
        s1 = s1 * scale
        s2 = s2 * scale
    return StokesImage(s0, s1, s2)


def malus_images(s0, s1, s2, angles_deg=ANGLES_DEG):
    """Forward model I_theta = (s0 + s1 cos 2theta + s2 sin 2theta) / 2."""
    out = []
    for a in angles_deg:
        th = np.deg2rad(a)
        out.append(0.5 * (s0 + s1 * np.cos(2 * th) + s2 * np.sin(2 * th)))
    return np.stack(out)


def stokes_from_polarization(intensity, dolp, aolp):
    """Stokes components for total intensity s0 with the given DoLP/AoLP."""
    s0 = np.asarray(intensity, dtype=np.float64)
    lin = s0 * dolp
    return s0, lin * np.cos(2 * aolp), lin * np.sin(2 * aolp)


def aolp_dolp(stokes, eps_dark=EPS_DARK):
    """AoLP (wrapped to [0, pi)) and DoLP on the luminance-averaged Stokes maps."""
    s0, s1, s2 = stokes.luminance()
    lin = np.hypot(s1, s2)
    valid = s0 >= eps_dark
    dolp = np.where(valid, lin / np.where(valid, s0, 1.0), 0.0)
    dolp = np.clip(dolp, 0.0, 1.0)
    aolp = np.mod(0.5 * np.arctan2(s2, s1), np.pi)
    # mod can return pi itself for tiny negative inputs
    aolp = np.where(aolp >= np.pi, 0.0, aolp)
    aolp_valid = valid & (dolp > EPS_AOLP)
    aolp = np.where(aolp_valid, aolp, 0.0)
    return PolarMaps(aolp=aolp, dolp=dolp, valid=valid, aolp_valid=aolp_valid)


def intensity_image(stokes):
    """Unpolarized color image s0 / 2, clamped to [0, 1]."""
    return np.clip(0.5 * stokes.s0, 0.0, 1.0)


def project_point(cam, X_world):
    """Project world point(s) to pixel coordinates and depth.

    Accepts a 3-vector or an ``(N, 3)`` array; raises
    :class:`BehindCameraError` if any point has Z_cam <= 0.
    """
    X = np.asarray(X_world, dtype=np.float64)
    Xc = cam.to_camera(X)
    Z = Xc[..., 2]
    if np.any(Z <= 0):
        raise BehindCameraError("point is behind the camera")
    x = (Xc[..., 0] * cam.fx + cam.cx * Z) / Z
    y = (Xc[..., 1] * cam.fy + cam.cy * Z) / Z
    return np.stack([x, y], axis=-1), Z


def backproject_pixel(cam, pixel, depth):
    """World point seen at ``pixel`` with camera-frame depth ``depth``."""
    p = np.asarray(pixel, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    if np.any(d <= 0):
        raise DomainError("depth must be positive")
    return cam.to_world(backproject_camera(cam, p, d))


def backproject_camera(cam, pixel, depth):
    """Camera-frame point for ``pixel`` at ``depth`` (no validity checks)."""
    p = np.asarray(pixel, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    X = (p[..., 0] - cam.cx) * d / cam.fx
    Y = (p[..., 1] - cam.cy) * d / cam.fy
    return np.stack([X, Y, d * np.ones_like(X)], axis=-1)


def pixel_grid(height, width):
    """``(H, W, 2)`` array of (x, y) pixel-center coordinates."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([xs, ys], axis=-1)


def depth_to_points(cam, depth):
    """Camera-frame points for every pixel of a depth map, ``(H, W, 3)``."""
    H, W = depth.shape
    return backproject_camera(cam, pixel_grid(H, W), depth)


def view_rays(cam):
    """Unit viewing rays (camera frame) through every pixel center."""
    P = depth_to_points(cam, np.ones(cam.shape))
    return P / np.linalg.norm(P, axis=-1, keepdims=True)


def normals_from_depth(cam, depth):
    """Normals from depth via the cross product of right/down differences.

    Border pixels and pixels with a missing neighbor get zero vectors.
    """
    P = depth_to_points(cam, depth)
    n = np.zeros_like(P)
    ok = depth > 0
    ok_c = ok[:-1, :-1] & ok[:-1, 1:] & ok[1:, :-1]
    dx = P[:-1, 1:] - P[:-1, :-1]
    dy = P[1:, :-1] - P[:-1, :-1]
    c = np.cross(dx, dy)
    norm = np.linalg.norm(c, axis=-1, keepdims=True)
    good = ok_c & (norm[..., 0] > 0)
    n[:-1, :-1] = np.where(good[..., None], c / np.where(norm > 0, norm, 1.0), 0.0)
    return n


def orient_to_rays(cam, normals):
    """Flip camera-frame normals so that ``n . ray >= 0`` at each pixel."""
    rays = view_rays(cam)
    s = np.sign(np.sum(normals * rays, axis=-1, keepdims=True))
    s[s == 0] = 1.0
    return normals * s


def luminance(img):
    img = np.asarray(img, dtype=np.float64)
    return img.mean(axis=-1) if img.ndim == 3 else img
