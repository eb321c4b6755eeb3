"""TSDF fusion, marching-cubes meshing and reconstruction metrics."""

import logging
from dataclasses import dataclass

import numba
import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from . import fileio
from .errors import ConfigError, DimensionError

log = logging.getLogger(__name__)


@dataclass
class TsdfVolume:
    """Voxel grid of normalized truncated signed distances in ``[-1, 1]``.

    Voxel ``(i, j, k)`` has its center at ``origin + (i, j, k) * voxel_size``.
    Unobserved voxels hold ``tsdf = 1`` with zero weight.
    """

    origin: np.ndarray
    dims: tuple
    voxel_size: float = 0.008
    truncation: float = 0.04
    max_depth: float = 10.0
    max_view_angle: float = 60.0
    tsdf: np.ndarray = None
    weight: np.ndarray = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.dims = tuple(int(d) for d in self.dims)
        if self.voxel_size <= 0 or self.max_depth <= 0:
            raise ConfigError("voxel_size and max_depth must be positive")
        if self.truncation < self.voxel_size:
            raise ConfigError("truncation must be at least one voxel")
        if self.tsdf is None:
            self.tsdf = np.ones(self.dims, dtype=np.float32)
        if self.weight is None:
            self.weight = np.zeros(self.dims, dtype=np.float32)

    @classmethod
    def from_bounds(cls, lo, hi, voxel_size=0.008, truncation=0.04, max_depth=10.0):
        """Volume covering the box ``[lo, hi]`` padded by the truncation band."""
        lo = np.asarray(lo, dtype=np.float64) - truncation
        hi = np.asarray(hi, dtype=np.float64) + truncation
        dims = np.ceil((hi - lo) / voxel_size).astype(int) + 1
        return cls(lo, tuple(dims), voxel_size, truncation, max_depth)

    def world_coords(self, ijk):
        return self.origin + np.asarray(ijk, dtype=np.float64) * self.voxel_size


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray = None

    def __len__(self):
        return len(self.triangles)

    @property
    def is_empty(self):
        return len(self.triangles) == 0

    def face_areas(self):
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def euler_characteristic(self):
        t = self.triangles
        edges = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        n_edges = len(np.unique(edges, axis=0))
        n_verts = len(np.unique(t))
        return n_verts - n_edges + len(t)


# -- integration -----------------------------------------------------------

@numba.njit(cache=True, parallel=True)
def _integrate(tsdf, weight, origin, vs, R, t, fx, fy, cx, cy, depth, trunc, max_depth, max_slope):
    nx, ny, nz = tsdf.shape
    H, W = depth.shape
    for i in numba.prange(nx):
        X = origin[0] + i * vs
        for j in range(ny):
            Y = origin[1] + j * vs
            for k in range(nz):
                Z = origin[2] + k * vs
                zc = R[2, 0] * X + R[2, 1] * Y + R[2, 2] * Z + t[2]
                if zc <= 0.0 or zc > max_depth:
                    continue
                xc = R[0, 0] * X + R[0, 1] * Y + R[0, 2] * Z + t[0]
                yc = R[1, 0] * X + R[1, 1] * Y + R[1, 2] * Z + t[1]
                uf = fx * xc / zc + cx
                vf = fy * yc / zc + cy
                u = int(np.floor(uf + 0.5))
                v = int(np.floor(vf + 0.5))
                if u < 0 or v < 0 or u >= W or v >= H:
                    continue
                d = depth[v, u]
                if d <= 0.0 or d > max_depth:
                    continue
                # grazing views and depth edges put rays in front of interior voxels
                lim = min(trunc, max_slope * d / fx)
                edge = False
                for dv, du in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                    vv = min(max(v + dv, 0), H - 1)
                    uu = min(max(u + du, 0), W - 1)
                    if abs(depth[vv, uu] - d) > lim:
                        edge = True
                if edge:
                    continue
                # bilinear lookup; the edge test keeps all four taps on the surface
                u0 = min(max(int(np.floor(uf)), 0), W - 2)
                v0 = min(max(int(np.floor(vf)), 0), H - 2)
                au = min(max(uf - u0, 0.0), 1.0)
                av = min(max(vf - v0, 0.0), 1.0)
                d00 = depth[v0, u0]
                d01 = depth[v0, u0 + 1]
                d10 = depth[v0 + 1, u0]
                d11 = depth[v0 + 1, u0 + 1]
                if (abs(d00 - d) <= trunc and abs(d01 - d) <= trunc
                        and abs(d10 - d) <= trunc and abs(d11 - d) <= trunc):
                    d = ((1 - av) * ((1 - au) * d00 + au * d01)
                         + av * ((1 - au) * d10 + au * d11))
                sdf = d - zc
                if sdf < -trunc:
                    continue
                val = sdf / trunc
                if val > 1.0:
                    val = 1.0
                w = weight[i, j, k]
                tsdf[i, j, k] = (tsdf[i, j, k] * w + val) / (w + 1.0)
                weight[i, j, k] = w + 1.0


def integrate_depth(vol, depth, cam):
    """Fold one depth map into ``vol`` (in place) with unit weights; returns ``vol``.

    Pixels whose 4-neighborhood jumps by more than the truncation are skipped.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != cam.shape:
        raise DimensionError(f"depth {depth.shape} vs camera {cam.shape}")
    _integrate(vol.tsdf, vol.weight, vol.origin, float(vol.voxel_size), cam.R.copy(), cam.t.copy(),
               cam.fx, cam.fy, cam.cx, cam.cy, depth, float(vol.truncation), float(vol.max_depth),
               np.tan(np.radians(vol.max_view_angle)))
    return vol


def fuse_depth_maps(depths, cams, lo, hi, voxel_size=0.008, truncation=0.04, max_depth=10.0):
    vol = TsdfVolume.from_bounds(lo, hi, voxel_size, truncation, max_depth)
    for d, c in zip(depths, cams):
        integrate_depth(vol, d, c)
    return vol


# -- meshing ---------------------------------------------------------------

def _cell_mask(obs):
    """True where the whole 2x2x2 cell anchored at a voxel is observed."""
    cell = obs.copy()
    for di in (0, 1):
        for dj in (0, 1):
            for dk in (0, 1):
                cell[:obs.shape[0] - di, :obs.shape[1] - dj, :obs.shape[2] - dk] &= \
                    obs[di:, dj:, dk:]
    cell[-1], cell[:, -1], cell[:, :, -1] = False, False, False
    return cell


def extract_mesh(vol):
    """Zero level set via marching cubes over cells whose eight corners are observed."""
    obs = vol.weight > 0
    empty = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)))
    if not obs.any():
        return empty
    vals = vol.tsdf[obs]
    if vals.min() > 0 or vals.max() < 0:
        return empty
    try:
        verts, faces, normals, _ = measure.marching_cubes(vol.tsdf, level=0.0)
    except (ValueError, RuntimeError) as exc:
        log.warning("marching cubes found no surface: %s", exc)
        return empty
    # triangles are contained in their cell, so the centroid identifies it
    cell = np.floor(verts[faces].mean(axis=1)).astype(np.int64)
    cell = np.minimum(cell, np.array(vol.dims) - 2)
    faces = faces[_cell_mask(obs)[cell[:, 0], cell[:, 1], cell[:, 2]]]
    # zeros exactly on grid nodes yield coincident vertices from neighbouring cells
    verts, inv = np.unique(verts.astype(np.float64), axis=0, return_inverse=True)
    inv = inv.ravel()
    n = np.zeros_like(verts)
    np.add.at(n, inv, normals.astype(np.float64))
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
    # skimage normals point down the gradient; flip so they face free space
    mesh = TriangleMesh(verts * vol.voxel_size + vol.origin, inv[faces].astype(np.int64), -n)
    return remove_degenerate(mesh)


def remove_degenerate(mesh, eps=1e-14):
    """Drop zero-area triangles and vertices no longer referenced."""
    if mesh.is_empty:
        return mesh
    keep = mesh.face_areas() > eps
    faces = mesh.triangles[keep]
    used, inv = np.unique(faces, return_inverse=True)
    normals = mesh.normals[used] if mesh.normals is not None else None
    return TriangleMesh(mesh.vertices[used], inv.reshape(-1, 3).astype(np.int64), normals)


def save_mesh(path, mesh):
    dt = [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
    v = np.empty(len(mesh.vertices), dtype=dt)
    v["x"], v["y"], v["z"] = mesh.vertices.T
    n = mesh.normals if mesh.normals is not None else np.zeros_like(mesh.vertices)
    v["nx"], v["ny"], v["nz"] = n.T
    fileio.write_ply(path, v, mesh.triangles)


def load_mesh(path):
    v, faces = fileio.read_ply(path)
    verts = np.column_stack([v["x"], v["y"], v["z"]]).astype(np.float64)
    normals = None
    if "nx" in v.dtype.names:
        normals = np.column_stack([v["nx"], v["ny"], v["nz"]]).astype(np.float64)
    faces = np.zeros((0, 3), dtype=np.int64) if faces is None else faces
    return TriangleMesh(verts, faces, normals)


# -- metrics ---------------------------------------------------------------

def sample_surface(mesh, n, seed=0):
    """``n`` points drawn uniformly by area, with their face normals."""
    if mesh.is_empty:
        raise DimensionError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    face = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = mesh.vertices[mesh.triangles[face]]
    pts = ((1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1]
           + (r1 * r2)[:, None] * tri[:, 2])
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    fn /= np.linalg.norm(fn, axis=1, keepdims=True)
    return pts, fn


def _as_points(x, n_samples, seed):
    if isinstance(x, TriangleMesh):
        return sample_surface(x, n_samples, seed)[0]
    pts = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise DimensionError("empty point set")
    return pts


def chamfer_distance(a, b, n_samples=100_000, seed=0):
    """Symmetric Chamfer distance: mean of the two mean nearest-neighbor distances.

    Meshes are replaced by ``n_samples`` area-uniform surface samples drawn
    with the same seed, so identical meshes give exactly zero.
    """
    pa = _as_points(a, n_samples, seed)
    pb = _as_points(b, n_samples, seed)
    d_ab = cKDTree(pb).query(pa)[0].mean()
    d_ba = cKDTree(pa).query(pb)[0].mean()
    return float(0.5 * (d_ab + d_ba))


def angular_errors(pred, gt):
    """Per-element angle in degrees between (normalized) vectors."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    p = p / np.maximum(np.linalg.norm(p, axis=-1, keepdims=True), 1e-300)
    g = g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-300)
    return np.degrees(np.arccos(np.clip(np.sum(p * g, axis=-1), -1.0, 1.0)))


def normal_mae(pred, gt, mask=None):
    """Mean angular error in degrees over ``mask`` (all elements when omitted)."""
    err = angular_errors(pred, gt)
    if mask is not None:
        err = err[np.asarray(mask, dtype=bool)]
    if err.size == 0:
        return 0.0
    return float(err.mean())
