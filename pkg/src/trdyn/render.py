"""CPU splatting of anisotropic Gaussians, plus PNG/PLY/camera I/O.

Camera convention: ``W`` maps world to camera coordinates, the camera looks
down ``+z``, image ``u`` grows to the right and ``v`` downwards.  Pixel
``(row, col)`` is centered on image coordinates ``(u, v) = (col, row)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .dynamics import RigidParticle
from .errors import DataError
from .geometry import quat_to_rotmat

COV_FLOOR = 0.3          # px^2 added to the projected covariance diagonal
ALPHA_MAX = 0.99
T_MIN = 1e-4             # per-pixel early stop on transmittance
ALPHA_CUTOFF = 1e-8      # splat footprint: where sigma * gaussian >= this
NEAR = 0.01


@dataclass
class Camera:
    W: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.W.shape != (4, 4):
            raise DataError("camera W must be 4x4")
        if not (self.fx > 0 and self.fy > 0):
            raise DataError("camera focal lengths must be positive")
        if int(self.width) < 1 or int(self.height) < 1:
            raise DataError("camera resolution must be at least 1x1")
        R = self.W[:3, :3]
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise DataError("camera rotation must be a proper rotation")
        self.width, self.height = int(self.width), int(self.height)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), fov_deg: float = 50.0,
                width: int = 256, height: int = 256) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, (1.0, 0.0, 0.0) if abs(fwd[0]) < 0.9 else (0.0, 1.0, 0.0))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        W = np.eye(4)
        W[:3, :3] = R
        W[:3, 3] = -R @ eye
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2.0)
        return cls(W, f, f, width / 2.0, height / 2.0, width, height)

    def to_dict(self) -> dict:
        return {"W": self.W.tolist(), "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        keys = {"W", "fx", "fy", "cx", "cy", "width", "height"}
        if set(d) != keys:
            raise DataError(f"camera file must have exactly the keys {sorted(keys)}")
        return cls(np.array(d["W"], dtype=np.float64), float(d["fx"]), float(d["fy"]),
                   float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))


def save_camera(cam: Camera, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(cam.to_dict(), indent=2))
    return path


def load_camera(path) -> Camera:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read camera file {path}: {exc}") from None
    return Camera.from_dict(d)


@dataclass
class Splat2D:
    mean2d: np.ndarray   # (M, 2)
    cov2d: np.ndarray    # (M, 2, 2)
    depth: np.ndarray    # (M,)
    color: np.ndarray    # (M, 3)
    opacity: np.ndarray  # (M,)
    ids: np.ndarray      # (M,) index into the input particles

    def __len__(self):
        return len(self.depth)


def covariance_3d(r: np.ndarray, s: np.ndarray) -> np.ndarray:
    """``R S S^T R^T`` from unit quaternions and per-axis scales."""
    R = quat_to_rotmat(r, normalize=True)
    M = R * np.asarray(s)[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def project_gaussian(particles: RigidParticle, camera: Camera, near: float = NEAR) -> Splat2D:
    """Project particles to screen-space Gaussians; culled particles are left out."""
    x = np.atleast_2d(particles.x)
    n = x.shape[0]
    r = np.atleast_2d(particles.r)
    s = np.atleast_2d(particles.s)
    Rw, tw = camera.W[:3, :3], camera.W[:3, 3]
    xc = x @ Rw.T + tw
    z = xc[:, 2]
    keep = z > near
    zs = np.where(keep, z, 1.0)
    mean = np.stack([camera.fx * xc[:, 0] / zs + camera.cx, camera.fy * xc[:, 1] / zs + camera.cy], -1)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = camera.fx / zs
    J[:, 0, 2] = -camera.fx * xc[:, 0] / zs ** 2
    J[:, 1, 1] = camera.fy / zs
    J[:, 1, 2] = -camera.fy * xc[:, 1] / zs ** 2
    T = J @ Rw
    cov = T @ covariance_3d(r, s) @ np.swapaxes(T, -1, -2)
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2)) + COV_FLOOR * np.eye(2)
    # 3 sigma of the larger principal axis as the off-screen margin
    tr = cov[:, 0, 0] + cov[:, 1, 1]
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
    lam = 0.5 * tr + np.sqrt(np.maximum(0.25 * tr * tr - det, 0.0))
    margin = 3.0 * np.sqrt(lam)
    keep &= (mean[:, 0] >= -margin) & (mean[:, 0] <= camera.width - 1 + margin)
    keep &= (mean[:, 1] >= -margin) & (mean[:, 1] <= camera.height - 1 + margin)
    idx = np.nonzero(keep)[0]
    color = np.broadcast_to(np.atleast_2d(particles.color), (n, 3))
    opacity = np.broadcast_to(np.atleast_1d(particles.opacity), (n,))
    return Splat2D(mean[idx], cov[idx], z[idx], np.array(color[idx]), np.array(opacity[idx]), idx)


def splat_alpha(splats: Splat2D, k: int, u, v) -> np.ndarray:
    """``min(0.99, opacity * exp(-d^T cov^-1 d / 2))`` of splat ``k`` at pixel coordinates."""
    c = splats.cov2d[k]
    det = c[0, 0] * c[1, 1] - c[0, 1] ** 2
    ia, ib, ic = c[1, 1] / det, -c[0, 1] / det, c[0, 0] / det
    du = np.asarray(u, dtype=np.float64) - splats.mean2d[k, 0]
    dv = np.asarray(v, dtype=np.float64) - splats.mean2d[k, 1]
    m = ia * du * du + 2.0 * ib * du * dv + ic * dv * dv
    return np.minimum(ALPHA_MAX, splats.opacity[k] * np.exp(-0.5 * m))


def splat_image(particles: Optional[RigidParticle], camera: Camera, background=(0.0, 0.0, 0.0)):
    """Front-to-back alpha blending.

    Returns
    -------
    rgb : (H, W, 3) float array in [0, 1]
    alpha : (H, W) accumulated opacity ``1 - prod(1 - alpha_i)``

    Splats are sorted globally by depth with ties broken by particle index.
    Each splat touches the pixels where ``opacity * gaussian >= 1e-8``; a
    pixel stops accumulating once its transmittance falls below ``1e-4``.
    """
    H, Wd = camera.height, camera.width
    bg = np.asarray(background, dtype=np.float64)
    color = np.zeros((H, Wd, 3))
    trans = np.ones((H, Wd))
    if particles is not None and len(particles) > 0 and np.size(particles.x) > 0:
        splats = project_gaussian(particles, camera)
        order = np.lexsort((splats.ids, splats.depth))
        for k in order:
            sigma = splats.opacity[k]
            if sigma < ALPHA_CUTOFF:
                continue
            c = splats.cov2d[k]
            m_max = 2.0 * math.log(sigma / ALPHA_CUTOFF)
            ru = math.sqrt(m_max * c[0, 0])
            rv = math.sqrt(m_max * c[1, 1])
            mu, mv = splats.mean2d[k]
            u0, u1 = max(0, math.ceil(mu - ru)), min(Wd - 1, math.floor(mu + ru))
            v0, v1 = max(0, math.ceil(mv - rv)), min(H - 1, math.floor(mv + rv))
            if u0 > u1 or v0 > v1:
                continue
            uu, vv = np.meshgrid(np.arange(u0, u1 + 1), np.arange(v0, v1 + 1))
            a = splat_alpha(splats, k, uu, vv)
            T = trans[v0:v1 + 1, u0:u1 + 1]
            a = np.where((T >= T_MIN) & (a >= ALPHA_CUTOFF), a, 0.0)
            color[v0:v1 + 1, u0:u1 + 1] += (T * a)[..., None] * splats.color[k]
            trans[v0:v1 + 1, u0:u1 + 1] = T * (1.0 - a)
    rgb = color + trans[..., None] * bg
    return rgb, 1.0 - trans


# -- files ---------------------------------------------------------------------------

def write_png(rgb: np.ndarray, path, alpha: Optional[np.ndarray] = None) -> Path:
    """8-bit RGBA PNG; alpha defaults to opaque."""
    from PIL import Image

    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DataError("write_png expects an (H, W, 3) image")
    a = np.ones(rgb.shape[:2]) if alpha is None else np.asarray(alpha, dtype=np.float64)
    rgba = np.concatenate([rgb, a[..., None]], axis=-1)
    data = np.round(np.clip(rgba, 0.0, 1.0) * 255.0).astype(np.uint8)
    path = Path(path)
    Image.fromarray(data, mode="RGBA").save(path, format="PNG")
    return path


_PLY_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
              "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1", "short": "<i2", "int16": "<i2",
              "ushort": "<u2", "uint16": "<u2", "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4"}


def write_ply(path, xyz: np.ndarray, rgb: Optional[np.ndarray] = None) -> Path:
    """Binary little-endian PLY with float32 ``x y z`` and optional uchar colors (rgb in [0, 1])."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if rgb is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    rec = np.empty(len(xyz), dtype=fields)
    rec["x"], rec["y"], rec["z"] = xyz.T
    if rgb is not None:
        c = np.round(np.clip(np.asarray(rgb, dtype=np.float64).reshape(-1, 3), 0, 1) * 255).astype(np.uint8)
        rec["red"], rec["green"], rec["blue"] = c.T
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(xyz)}"]
    header += [f"property {'float' if t == '<f4' else 'uchar'} {name}" for name, t in fields]
    header.append("end_header")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())
    return path


def read_ply(path) -> dict:
    """Vertex element of a PLY file (ascii or binary little-endian).

    Returns a dict with ``xyz`` (n, 3) float64, ``rgb`` (n, 3) in [0, 1] when
    color properties exist, and ``properties`` with every raw column.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise DataError(f"{path}: not a PLY file")
    body_start = raw.index(b"\n", end) + 1
    lines = raw[:end].decode("ascii", "replace").splitlines()
    fmt, elements, current = None, [], None
    for line in lines[1:]:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            current = {"name": parts[1], "count": int(parts[2]), "props": []}
            elements.append(current)
        elif parts[0] == "property":
            if current is None or parts[1] == "list":
                raise DataError(f"{path}: unsupported PLY property layout")
            if parts[1] not in _PLY_TYPES:
                raise DataError(f"{path}: unknown PLY type {parts[1]!r}")
            current["props"].append((parts[2], _PLY_TYPES[parts[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise DataError(f"{path}: unsupported PLY format {fmt!r}")
    if not elements or elements[0]["name"] != "vertex":
        raise DataError(f"{path}: first PLY element must be 'vertex'")
    vert = elements[0]
    dtype = np.dtype(vert["props"])
    n = vert["count"]
    if fmt == "binary_little_endian":
        need = n * dtype.itemsize
        if len(raw) - body_start < need:
            raise DataError(f"{path}: truncated PLY body")
        rec = np.frombuffer(raw, dtype=dtype, count=n, offset=body_start)
        cols = {name: rec[name].astype(np.float64) for name in dtype.names}
    else:
        rows = raw[body_start:].decode("ascii").split("\n")
        try:
            table = np.array([[float(v) for v in r.split()] for r in rows[:n]]).reshape(n, len(dtype.names))
        except ValueError:
            raise DataError(f"{path}: malformed ascii PLY body") from None
        cols = {name: table[:, i] for i, name in enumerate(dtype.names)}
    if not {"x", "y", "z"} <= set(cols):
        raise DataError(f"{path}: PLY vertex needs x, y, z")
    out = {"xyz": np.stack([cols["x"], cols["y"], cols["z"]], -1), "properties": cols}
    if {"red", "green", "blue"} <= set(cols):
        out["rgb"] = np.stack([cols["red"], cols["green"], cols["blue"]], -1) / 255.0
    return out
