"""Synthetic polarized scenes with known geometry.

Parametric shapes are ray-cast analytically (sphere, plane) or by ray
marching (supershape), shaded with a Lambert term plus a white Phong lobe,
and turned into four polarizer-angle images through Malus' law.  Every
view comes with ground-truth depth, normals, azimuth and reflection masks.

Radiance is expressed in intensity units, i.e. the value returned by
:func:`polarsplat.core.intensity_image` (``s0 / 2``).  Angle images of a
bright polarized highlight can exceed 1; they live in ``[0, 2]``.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from .core import CameraModel, PolarizedCapture, malus_images, view_rays
from .errors import ConfigError

SHAPES = ("sphere", "plane", "supershape")

# sensor saturation model: clipped pixels keep this much linear polarization
OVEREXPOSED_DOLP = 0.05
SPECULAR_DOLP_MIN = 0.3
SPECULAR_INTENSITY_MIN = 160.0 / 255.0


@dataclass
class SceneSpec:
    """Scene description.  ``to_dict``/``from_dict`` give the JSON schema.

    ``texture`` is the relative amplitude of a smooth procedural albedo
    pattern (0 gives a textureless, constant-albedo object).
    ``supershape`` holds ``(m, n1, n2, n3)`` for longitude and latitude.
    """

    shape: str = "sphere"
    radius: float = 1.0
    extent: float = 1.0
    supershape: tuple = ((6.0, 12.0, 14.0, 14.0), (2.0, 10.0, 10.0, 10.0))
    center: tuple = (0.0, 0.0, 0.0)
    albedo: tuple = (0.6, 0.45, 0.3)
    texture: float = 0.0
    texture_scale: float = 4.0
    ambient: float = 0.2
    specular_strength: float = 0.0
    shininess: float = 40.0
    light_dir: tuple = (0.3, -0.2, 1.0)
    diffuse_max: float = 0.4
    specular_max: float = 0.9
    rng_seed: int = 0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ConfigError(f"unknown shape {self.shape!r}; expected one of {SHAPES}")
        if self.radius <= 0 or self.extent <= 0:
            raise ConfigError("shape parameters must be positive")
        a = np.asarray(self.albedo, dtype=np.float64)
        if a.shape != (3,) or not np.all(np.isfinite(a)):
            raise ConfigError("albedo must be three finite numbers")
        for name in ("specular_strength", "diffuse_max", "specular_max", "ambient"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.shininess <= 0:
            raise ConfigError("shininess must be positive")
        L = np.asarray(self.light_dir, dtype=np.float64)
        if L.shape != (3,) or np.linalg.norm(L) == 0:
            raise ConfigError("light_dir must be a nonzero 3-vector")
        ss = np.asarray(self.supershape, dtype=np.float64)
        if ss.shape != (2, 4) or np.any(ss[:, 1:] <= 0):
            raise ConfigError("supershape needs two (m, n1, n2, n3) rows with positive exponents")

    @property
    def light(self):
        L = np.asarray(self.light_dir, dtype=np.float64)
        return L / np.linalg.norm(L)

    def to_dict(self):
        d = asdict(self)
        d["supershape"] = [list(r) for r in self.supershape]
        for k in ("center", "albedo", "light_dir"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown scene keys: {sorted(extra)}")
        d = dict(d)
        if "supershape" in d:
            d["supershape"] = tuple(tuple(float(v) for v in r) for r in d["supershape"])
        for k in ("center", "albedo", "light_dir"):
            if k in d:
                d[k] = tuple(float(v) for v in d[k])
        return cls(**d)


def highlight_scene():
    """Uniform-albedo sphere with one highlight whose core clips.

    The albedo is dark enough that no diffuse pixel passes the brightness
    test of the reflective-region localization, so every flagged pixel
    belongs to the highlight.
    """
    return SceneSpec(albedo=(0.4, 0.32, 0.24), specular_strength=0.8)


@dataclass
class RenderedView:
    capture: PolarizedCapture
    gt_depth: np.ndarray
    gt_normal: np.ndarray
    gt_azimuth: np.ndarray
    gt_aolp: np.ndarray
    gt_dolp: np.ndarray
    gt_diffuse: np.ndarray
    specular_mask: np.ndarray
    overexposed_mask: np.ndarray
    reflect_type: np.ndarray  # 0 diffuse, 1 specular
    world_points: np.ndarray = field(repr=False, default=None)

    @property
    def camera(self):
        return self.capture.camera

    @property
    def foreground(self):
        return self.gt_depth > 0


# -- cameras ---------------------------------------------------------------

def look_at_camera(position, look_at, width=128, height=128, fov_deg=40.0,
                   up=(0.0, 0.0, 1.0)):
    """Camera at ``position`` looking at ``look_at`` with world ``up`` roughly up."""
    pos = np.asarray(position, dtype=np.float64)
    f = np.asarray(look_at, dtype=np.float64) - pos
    f /= np.linalg.norm(f)
    right = np.cross(f, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        raise ConfigError("viewing direction is parallel to the up vector")
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    R = np.stack([right, down, f])
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = -R @ pos
    focal = 0.5 * width / np.tan(0.5 * np.deg2rad(fov_deg))
    return CameraModel(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height, T)


def make_camera_ring(n, radius, elevation, look_at=(0.0, 0.0, 0.0), width=128, height=128,
                     fov_deg=40.0, azimuth_offset=0.0):
    """``n`` cameras evenly spaced in azimuth on a circle around ``look_at``.

    ``elevation`` (radians) lifts the ring above the xy-plane; world up is +z.
    """
    if n < 2:
        raise ConfigError("a camera ring needs at least two cameras")
    if radius <= 0:
        raise ConfigError("ring radius must be positive")
    c = np.asarray(look_at, dtype=np.float64)
    cams = []
    for k in range(n):
        az = azimuth_offset + 2.0 * np.pi * k / n
        d = np.array([np.cos(elevation) * np.cos(az), np.cos(elevation) * np.sin(az),
                      np.sin(elevation)])
        cams.append(look_at_camera(c + radius * d, c, width, height, fov_deg))
    return cams


# -- ray casting -----------------------------------------------------------

def _gielis(angle, m, n1, n2, n3):
    a = np.abs(np.cos(m * angle / 4.0)) ** n2 + np.abs(np.sin(m * angle / 4.0)) ** n3
    return a ** (-1.0 / n1)


def _supershape_radius(scene, d):
    """Radius of the star-shaped surface along unit directions ``d``."""
    lon = np.arctan2(d[..., 1], d[..., 0])
    lat = np.arcsin(np.clip(d[..., 2], -1.0, 1.0))
    p1, p2 = scene.supershape
    r = _gielis(lon, *p1) * _gielis(lat, *p2)
    return scene.radius * r


def _supershape_field(scene, p):
    q = p - np.asarray(scene.center)
    rho = np.linalg.norm(q, axis=-1)
    d = q / np.maximum(rho, 1e-12)[..., None]
    return rho - _supershape_radius(scene, d)


def _intersect_sphere(scene, origin, dirs):
    c = np.asarray(scene.center, dtype=np.float64)
    oc = origin - c
    b = dirs @ oc
    a = np.sum(dirs * dirs, axis=-1)
    disc = b * b - a * (oc @ oc - scene.radius ** 2)
    hit = disc >= 0
    t = (-b - np.sqrt(np.where(hit, disc, 0.0))) / a
    hit &= t > 0
    P = origin + t[..., None] * dirs
    N = (P - c) / scene.radius
    return hit, t, P, N


def _intersect_plane(scene, origin, dirs):
    c = np.asarray(scene.center, dtype=np.float64)
    denom = dirs[..., 2]
    safe = np.where(np.abs(denom) > 1e-12, denom, 1.0)
    t = (c[2] - origin[2]) / safe
    P = origin + t[..., None] * dirs
    hit = (np.abs(denom) > 1e-12) & (t > 0)
    hit &= (np.abs(P[..., 0] - c[0]) <= scene.extent) & (np.abs(P[..., 1] - c[1]) <= scene.extent)
    N = np.zeros_like(P)
    N[..., 2] = np.where(origin[2] >= c[2], 1.0, -1.0)
    return hit, t, P, N


def _intersect_supershape(scene, origin, dirs, n_steps=400, n_bisect=40):
    c = np.asarray(scene.center, dtype=np.float64)
    # bound the surface by a sphere from a dense direction sample
    g = np.random.default_rng(0).normal(size=(20000, 3))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    rmax = 1.05 * _supershape_radius(scene, g).max()
    oc = origin - c
    a = np.sum(dirs * dirs, axis=-1)
    b = dirs @ oc
    disc = b * b - a * (oc @ oc - rmax ** 2)
    inside = disc > 0
    sq = np.sqrt(np.where(inside, disc, 0.0))
    t0 = np.maximum((-b - sq) / a, 1e-6)
    t1 = (-b + sq) / a
    hit = np.zeros(dirs.shape[:-1], dtype=bool)
    t_lo = np.zeros(dirs.shape[:-1])
    t_hi = np.zeros(dirs.shape[:-1])
    prev_t = t0.copy()
    prev_f = _supershape_field(scene, origin + prev_t[..., None] * dirs)
    for k in range(1, n_steps + 1):
        t = t0 + (t1 - t0) * k / n_steps
        f = _supershape_field(scene, origin + t[..., None] * dirs)
        new = inside & ~hit & (prev_f > 0) & (f <= 0)
        t_lo[new] = prev_t[new]
        t_hi[new] = t[new]
        hit |= new
        prev_t, prev_f = t, f
    for _ in range(n_bisect):
        tm = 0.5 * (t_lo + t_hi)
        f = _supershape_field(scene, origin + tm[..., None] * dirs)
        out = f > 0
        t_lo = np.where(out, tm, t_lo)
        t_hi = np.where(out, t_hi, tm)
    t = 0.5 * (t_lo + t_hi)
    P = origin + t[..., None] * dirs
    # gradient of the implicit field by central differences
    h = 1e-6 * max(rmax, 1.0)
    N = np.zeros_like(P)
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        N[..., i] = (_supershape_field(scene, P + e) - _supershape_field(scene, P - e)) / (2 * h)
    N /= np.maximum(np.linalg.norm(N, axis=-1, keepdims=True), 1e-12)
    return hit, t, P, N


_INTERSECT = {"sphere": _intersect_sphere, "plane": _intersect_plane,
              "supershape": _intersect_supershape}


def albedo_at(scene, P):
    """Per-point RGB albedo; a seeded smooth sine pattern when ``texture > 0``."""
    base = np.asarray(scene.albedo, dtype=np.float64)
    out = np.broadcast_to(base, P.shape[:-1] + (3,)).copy()
    if scene.texture <= 0:
        return out
    rng = np.random.default_rng(scene.rng_seed)
    pattern = np.zeros(P.shape[:-1])
    n_waves = 6
    for _ in range(n_waves):
        k = rng.normal(size=3)
        k *= scene.texture_scale * rng.uniform(0.7, 1.5) / np.linalg.norm(k) * 2 * np.pi
        ph = rng.uniform(0, 2 * np.pi)
        pattern += np.sin(P @ k + ph)
    pattern /= np.sqrt(n_waves / 2.0)
    hue = rng.uniform(-1, 1, size=3) * 0.5
    mod = 1.0 + scene.texture * pattern[..., None] * (1.0 + hue)
    return np.clip(out * mod, 0.0, 1.0)


def render_view(scene, cam, view_id=0):
    """Ray-cast ``scene`` from ``cam`` and synthesize the four angle images."""
    H, W = cam.shape
    rays_c = view_rays(cam)
    # unnormalized camera rays with unit z so the ray parameter equals depth
    rays_z = rays_c / rays_c[..., 2:3]
    dirs = rays_z @ cam.R
    origin = cam.center
    hit, t, P, N = _INTERSECT[scene.shape](scene, origin, dirs)

    depth = np.where(hit, t, 0.0)
    V = -rays_c @ cam.R  # unit direction towards the camera, world frame
    # face the camera (matters for the two-sided plane)
    N = np.where((np.sum(N * V, axis=-1) < 0)[..., None], -N, N)
    cos_v = np.clip(np.sum(N * V, axis=-1), 0.0, 1.0)

    L = scene.light
    ndl = np.sum(N * L, axis=-1)
    alb = albedo_at(scene, P)
    diffuse = alb * (scene.ambient + (1.0 - scene.ambient) * np.maximum(ndl, 0.0))[..., None]
    Rl = 2.0 * ndl[..., None] * N - L
    rdv = np.maximum(np.sum(Rl * V, axis=-1), 0.0)
    spec = np.where(ndl > 0, scene.specular_strength * rdv ** scene.shininess, 0.0)
    spec3 = np.repeat(spec[..., None], 3, axis=-1)

    # camera-frame normal along the viewing ray
    n_cam = -(N @ cam.R.T)
    n_cam = np.where(hit[..., None], n_cam, 0.0)
    azimuth = np.arctan2(n_cam[..., 1], n_cam[..., 0])
    sin2 = 1.0 - cos_v ** 2
    rho_d = scene.diffuse_max * sin2
    rho_s = scene.specular_max

    pol_d = rho_d[..., None] * diffuse
    pol_s = rho_s * spec3
    radiance = diffuse + spec3
    is_spec = hit & (pol_s.mean(-1) > pol_d.mean(-1))
    lin = pol_d - pol_s  # signed amplitude along the diffuse AoLP direction

    over = hit & (radiance.max(-1) > 1.0)
    radiance = np.where(over[..., None], np.minimum(radiance, 1.0), radiance)
    aolp = np.mod(np.where(is_spec, azimuth + np.pi / 2, azimuth), np.pi)
    # clipped pixels: weak polarization along the dominant AoLP
    sign = np.where(is_spec, -1.0, 1.0)[..., None]
    lin = np.where(over[..., None], sign * OVEREXPOSED_DOLP * radiance, lin)

    radiance = np.where(hit[..., None], radiance, 0.0)
    lin = np.where(hit[..., None], lin, 0.0)
    s0 = 2.0 * radiance
    s1 = 2.0 * lin * np.cos(2 * azimuth)[..., None]
    s2 = 2.0 * lin * np.sin(2 * azimuth)[..., None]
    images = np.clip(malus_images(s0, s1, s2), 0.0, None)

    s0l = s0.mean(-1)
    dolp = np.where(s0l > 0, np.hypot(s1.mean(-1), s2.mean(-1)) / np.where(s0l > 0, s0l, 1.0), 0.0)
    spec_mask = (is_spec & ~over & (dolp >= SPECULAR_DOLP_MIN)
                 & (radiance.max(-1) >= SPECULAR_INTENSITY_MIN))

    return RenderedView(
        capture=PolarizedCapture(view_id, images, cam),
        gt_depth=depth,
        gt_normal=n_cam,
        gt_azimuth=np.where(hit, np.mod(azimuth, 2 * np.pi), 0.0),
        gt_aolp=np.where(hit, aolp, 0.0),
        gt_dolp=dolp,
        gt_diffuse=np.where(hit[..., None], diffuse, 0.0),
        specular_mask=spec_mask,
        overexposed_mask=over,
        reflect_type=is_spec.astype(np.uint8),
        world_points=np.where(hit[..., None], P, 0.0),
    )


def render_views(scene, cams):
    return [render_view(scene, cam, i) for i, cam in enumerate(cams)]


# -- corruption helpers ----------------------------------------------------

def corrupt_depth(depth, noise_rel, hole_fraction, seed):
    """Multiplicative uniform noise plus randomly zeroed foreground pixels.

    Exactly ``round(hole_fraction * n_foreground)`` pixels become holes.
    """
    if noise_rel < 0:
        raise ConfigError("noise_rel must be non-negative")
    if not 0.0 <= hole_fraction < 1.0:
        raise ConfigError("hole_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    out = np.array(depth, dtype=np.float64, copy=True)
    fg = np.flatnonzero(out > 0)
    u = rng.uniform(-noise_rel, noise_rel, size=fg.size)
    flat = out.reshape(-1)
    flat[fg] *= 1.0 + u
    n_holes = int(round(hole_fraction * fg.size))
    if n_holes:
        flat[rng.choice(fg, size=n_holes, replace=False)] = 0.0
    return out


def corrupt_normal(normal, angle_deg, seed, hole_fraction=0.0):
    """Tilt each nonzero unit normal by ``angle_deg`` about a random tangent axis.

    The tilt magnitude is uniform in ``[0, angle_deg]``.
    """
    rng = np.random.default_rng(seed)
    n = np.array(normal, dtype=np.float64, copy=True)
    flat = n.reshape(-1, 3)
    valid = np.flatnonzero(np.linalg.norm(flat, axis=1) > 0.5)
    v = flat[valid]
    r = rng.normal(size=v.shape)
    tang = r - np.sum(r * v, axis=1, keepdims=True) * v
    tang /= np.maximum(np.linalg.norm(tang, axis=1, keepdims=True), 1e-12)
    ang = np.deg2rad(rng.uniform(0.0, angle_deg, size=(v.shape[0], 1)))
    flat[valid] = np.cos(ang) * v + np.sin(ang) * tang
    n_holes = int(round(hole_fraction * valid.size))
    if n_holes:
        flat[rng.choice(valid, size=n_holes, replace=False)] = 0.0
    return n


# -- ground-truth surface --------------------------------------------------

def scene_bounds(scene):
    """Axis-aligned box ``(lo, hi)`` enclosing the shape."""
    c = np.asarray(scene.center, dtype=np.float64)
    if scene.shape == "sphere":
        h = np.full(3, scene.radius)
    elif scene.shape == "plane":
        h = np.array([scene.extent, scene.extent, 0.0])
    else:
        d = np.random.default_rng(0).normal(size=(20000, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        h = np.full(3, 1.05 * _supershape_radius(scene, d).max())
    return c - h, c + h


def surface_normals(scene, points):
    """Outward unit normals of the shape at surface ``points``."""
    P = np.asarray(points, dtype=np.float64)
    c = np.asarray(scene.center, dtype=np.float64)
    if scene.shape == "sphere":
        N = P - c
    elif scene.shape == "plane":
        N = np.zeros_like(P)
        N[..., 2] = 1.0
    else:
        h = 1e-5
        N = np.stack([_supershape_field(scene, P + h * e) - _supershape_field(scene, P - h * e)
                      for e in np.eye(3)], axis=-1)
    return N / np.linalg.norm(N, axis=-1, keepdims=True)


def sample_surface(scene, n, seed=0):
    """``n`` points on the shape with their outward normals.

    Sphere and plane samples are uniform by area; supershape samples are
    uniform in direction from the center.
    """
    rng = np.random.default_rng(seed)
    c = np.asarray(scene.center, dtype=np.float64)
    if scene.shape == "plane":
        xy = rng.uniform(-scene.extent, scene.extent, size=(n, 2))
        P = np.column_stack([xy, np.zeros(n)]) + c
    else:
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = scene.radius if scene.shape == "sphere" else _supershape_radius(scene, d)[:, None]
        P = c + r * d
    return P, surface_normals(scene, P)
