"""Readers and writers for PFM, PNG, camera JSON and PLY files."""

import json
import re
from pathlib import Path

import cv2
import numpy as np

from .core import CameraModel
from .errors import FormatError


# -- PFM -------------------------------------------------------------------

def write_pfm(path, image):
    """Write a 1- or 3-channel float image as little-endian PFM."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim == 2:
        magic = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"PF"
    else:
        raise FormatError(f"PFM stores 1 or 3 channels, got shape {img.shape}")
    H, W = img.shape[:2]
    data = np.flipud(img).astype("<f4")
    with open(path, "wb") as f:
        f.write(magic + b"\n")
        f.write(f"{W} {H}\n".encode())
        f.write(b"-1.0\n")
        f.write(data.tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        blob = f.read()
    m = re.match(rb"(PF|Pf)\s+(\d+)\s+(\d+)\s+(-?[0-9.eE+-]+)\s", blob)
    if m is None:
        raise FormatError(f"{path}: bad PFM header")
    channels = 3 if m.group(1) == b"PF" else 1
    W, H = int(m.group(2)), int(m.group(3))
    scale = float(m.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    count = W * H * channels
    payload = blob[m.end():]
    if len(payload) < 4 * count:
        raise FormatError(f"{path}: truncated PFM ({len(payload)} of {4 * count} bytes)")
    data = np.frombuffer(payload[:4 * count], dtype=dtype).astype(np.float32)
    shape = (H, W, 3) if channels == 3 else (H, W)
    return np.flipud(data.reshape(shape)).copy()


# -- PNG -------------------------------------------------------------------

def _to_bgr(img):
    return img[..., ::-1] if img.ndim == 3 else img


def write_png16(path, image, scale=1.0):
    """Store ``image / scale`` (expected in [0, 1]) as 16-bit PNG."""
    img = np.clip(np.asarray(image, dtype=np.float64) / scale, 0.0, 1.0)
    q = np.round(img * 65535.0).astype(np.uint16)
    if not cv2.imwrite(str(path), np.ascontiguousarray(_to_bgr(q))):
        raise OSError(f"could not write {path}")


def read_png16(path, scale=1.0):
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FormatError(f"{path}: unreadable PNG")
    if raw.dtype == np.uint16:
        img = raw.astype(np.float64) / 65535.0
    elif raw.dtype == np.uint8:
        img = raw.astype(np.float64) / 255.0
    else:
        raise FormatError(f"{path}: unsupported PNG depth {raw.dtype}")
    return _to_bgr(img).copy() * scale


def write_mask(path, mask):
    """Binary mask as 8-bit PNG with values 0/255."""
    m = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    if not cv2.imwrite(str(path), m):
        raise OSError(f"could not write {path}")


def read_mask(path):
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FormatError(f"{path}: unreadable PNG")
    return raw > 127


# -- cameras ---------------------------------------------------------------

def camera_to_dict(cam):
    return {
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
        "world_to_cam": [float(v) for v in cam.world_to_cam.reshape(-1)],
    }


def camera_from_dict(d):
    try:
        return CameraModel(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"],
                           np.asarray(d["world_to_cam"], dtype=np.float64).reshape(4, 4))
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"bad camera record: {exc}") from exc


def write_camera(path, cam):
    Path(path).write_text(json.dumps(camera_to_dict(cam), indent=2))


def read_camera(path):
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return camera_from_dict(d)


# -- PLY -------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "uchar": "u1", "short": "i2", "ushort": "u2", "int": "i4",
    "uint": "u4", "float": "f4", "double": "f8",
    "int8": "i1", "uint8": "u1", "int16": "i2", "uint16": "u2", "int32": "i4",
    "uint32": "u4", "float32": "f4", "float64": "f8",
}
_NP_TO_PLY = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort", "i4": "int",
              "u4": "uint", "f4": "float", "f8": "double"}


def write_ply(path, vertex, faces=None):
    """Binary little-endian PLY.

    ``vertex`` is a numpy structured array; ``faces`` an optional ``(F, 3)``
    integer array written as ``vertex_indices`` lists.
    """
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {len(vertex)}"]
    for name in vertex.dtype.names:
        code = vertex.dtype[name].str[1:]
        lines.append(f"property {_NP_TO_PLY[code]} {name}")
    if faces is not None:
        lines.append(f"element face {len(faces)}")
        lines.append("property list uchar int vertex_indices")
    lines.append("end_header")
    header = ("\n".join(lines) + "\n").encode("ascii")
    le = vertex.dtype.newbyteorder("<")
    with open(path, "wb") as f:
        f.write(header)
        f.write(vertex.astype(le).tobytes())
        if faces is not None:
            rec = np.empty(len(faces), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
            rec["n"] = 3
            rec["idx"] = faces
            f.write(rec.tobytes())


def read_ply(path):
    """Read a binary little-endian PLY written by :func:`write_ply`.

    Returns ``(vertex_structured_array, faces_or_None)``.
    """
    with open(path, "rb") as f:
        blob = f.read()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply\n") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    header = blob[:end].decode("ascii").splitlines()
    body = blob[end + len(b"end_header\n"):]
    if "format binary_little_endian 1.0" not in header:
        raise FormatError(f"{path}: only binary little-endian PLY is supported")
    elements = []
    for line in header:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "element":
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if not elements:
                raise FormatError(f"{path}: property before element")
            elements[-1][2].append(tok[1:])
    vertex, faces = None, None
    offset = 0
    for name, count, props in elements:
        if name == "vertex":
            try:
                dt = np.dtype([(p[1], "<" + _PLY_TYPES[p[0]]) for p in props])
            except (KeyError, IndexError) as exc:
                raise FormatError(f"{path}: bad vertex property") from exc
            nbytes = dt.itemsize * count
            if len(body) < offset + nbytes:
                raise FormatError(f"{path}: truncated vertex data")
            vertex = np.frombuffer(body, dtype=dt, count=count, offset=offset).copy()
            offset += nbytes
        elif name == "face":
            dt = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
            nbytes = dt.itemsize * count
            if len(body) < offset + nbytes:
                raise FormatError(f"{path}: truncated face data")
            rec = np.frombuffer(body, dtype=dt, count=count, offset=offset)
            if count and np.any(rec["n"] != 3):
                raise FormatError(f"{path}: only triangle faces are supported")
            faces = rec["idx"].astype(np.int64)
            offset += nbytes
        else:
            raise FormatError(f"{path}: unsupported element {name}")
    if vertex is None:
        raise FormatError(f"{path}: no vertex element")
    return vertex, faces

