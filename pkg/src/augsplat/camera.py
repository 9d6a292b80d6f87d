"""Pinhole camera, rotation algebra and the projection machinery.

Conventions: view space is x right, y down, z forward (OpenCV). Pixel
centres sit at integer coordinates, so pixel ``(u, v)`` covers
``[u - 0.5, u + 0.5]``. Depth always means view-space z, never ray length.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BehindCamera, ConfigError

ORTHO_TOL = 1e-9


# ---------------------------------------------------------------------------
# rotations


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotmat(q):
    """Rotation matrices for (possibly unnormalised) quaternions ``(w, x, y, z)``.

    Works on a single quaternion or an ``(N, 4)`` batch.
    """
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotmat_vjp(q, dR):
    """Pull a gradient w.r.t. the rotation matrix back onto the raw quaternion.

    Accounts for the normalisation inside :func:`quat_to_rotmat`.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    g = dR
    gw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    gx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0]
              - 2 * x * g[..., 1, 1] - w * g[..., 1, 2] + z * g[..., 2, 0]
              + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    gy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2]
              + x * g[..., 1, 0] + z * g[..., 1, 2] - w * g[..., 2, 0]
              + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    gz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2]
              + w * g[..., 1, 0] - 2 * z * g[..., 1, 1] + y * g[..., 1, 2]
              + x * g[..., 2, 0] + y * g[..., 2, 1])
    gqn = np.stack([gw, gx, gy, gz], axis=-1)
    radial = np.sum(gqn * qn, axis=-1, keepdims=True)
    return (gqn - radial * qn) / norm


def rotmat_to_quat(R):
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0`` for a proper rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = quat_normalize(q)
    return -q if q[0] < 0 else q


@dataclass(frozen=True)
class Rotation:
    """A unit quaternion ``(w, x, y, z)``."""

    quaternion: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "quaternion", quat_normalize(self.quaternion))

    @classmethod
    def identity(cls) -> Rotation:
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_matrix(cls, R) -> Rotation:
        return cls(rotmat_to_quat(R))

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_rotmat(self.quaternion)


def as_rotmat(rotation) -> np.ndarray:
    """Accept a :class:`Rotation`, a quaternion or a 3x3 matrix."""
    if isinstance(rotation, Rotation):
        return rotation.matrix
    arr = np.asarray(rotation, dtype=np.float64)
    if arr.shape == (3, 3):
        return arr
    return quat_to_rotmat(arr)


def covariance_3d(rotation, scales) -> np.ndarray:
    """``R S S^T R^T`` for a single Gaussian."""
    R = as_rotmat(rotation)
    L = R * np.asarray(scales, dtype=np.float64)[None, :]
    return L @ L.T


# ---------------------------------------------------------------------------
# camera


@dataclass
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_view: np.ndarray = field(default_factory=lambda: np.eye(4))
    near: float = 0.01
    far: float = 100.0
    image_path: str | None = None
    name: str | None = None
    split: str = "train"

    def __post_init__(self):
        self.world_to_view = np.asarray(self.world_to_view, dtype=np.float64).reshape(4, 4)
        R = self.world_to_view[:3, :3]
        if not np.allclose(R.T @ R, np.eye(3), atol=ORTHO_TOL):
            raise ConfigError("world_to_view rotation block is not orthonormal")
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ConfigError("need 0 < near < far")

    @property
    def R(self) -> np.ndarray:
        return self.world_to_view[:3, :3]

    @property
    def t(self) -> np.ndarray:
        return self.world_to_view[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @classmethod
    def look_at(cls, eye, target, width, height, fov_deg=50.0, up=(0.0, 0.0, 1.0), **kw) -> Camera:
        """Camera at ``eye`` looking at ``target``; image y points away from ``up``."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, [1.0, 0.0, 0.0])
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        W = np.eye(4)
        W[:3, :3] = R
        W[:3, 3] = -R @ eye
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(width, height, f, f, (width - 1) / 2, (height - 1) / 2, W, **kw)

    def to_view(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.R.T + self.t

    def to_dict(self) -> dict:
        d = {
            "width": int(self.width), "height": int(self.height),
            "fx": float(self.fx), "fy": float(self.fy),
            "cx": float(self.cx), "cy": float(self.cy),
            "world_to_view": [float(v) for v in self.world_to_view.ravel()],
            "near": float(self.near), "far": float(self.far),
            "image_path": self.image_path,
            "split": self.split,
        }
        if self.name is not None:
            d["id"] = self.name
        return d

    @classmethod
    def from_dict(cls, d: dict) -> Camera:
        try:
            return cls(
                width=int(d["width"]), height=int(d["height"]),
                fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
                world_to_view=np.array(d["world_to_view"], dtype=np.float64).reshape(4, 4),
                near=float(d["near"]), far=float(d["far"]),
                image_path=d.get("image_path"), name=d.get("id"),
                split=d.get("split", "train"),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"bad camera record: {exc}") from exc


def load_cameras(path) -> list[Camera]:
    with open(path) as f:
        records = json.load(f)
    if not isinstance(records, list):
        raise ConfigError("camera file must hold a JSON array")
    return [Camera.from_dict(r) for r in records]


def save_cameras(cameras, path) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cameras], indent=1))


# ---------------------------------------------------------------------------
# projection


def world_to_pixel(point, camera: Camera):
    """Return ``(u, v, depth)`` for a world point."""
    x, y, z = camera.to_view(point)
    return camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy, z


def pixel_to_world(u, v, depth, camera: Camera) -> np.ndarray:
    """Lift pixel ``(u, v)`` at view depth ``depth`` into world space.

    Vectorised over broadcastable ``u, v, depth``; returns ``(..., 3)``.
    """
    u, v, depth = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (u, v, depth)))
    view = np.stack([(u - camera.cx) / camera.fx * depth, (v - camera.cy) / camera.fy * depth, depth], axis=-1)
    return (view - camera.t) @ camera.R


def projection_jacobian(t_view, camera: Camera) -> np.ndarray:
    """Affine approximation of the pinhole projection at view-space point(s)."""
    t_view = np.asarray(t_view, dtype=np.float64)
    tx, ty, tz = t_view[..., 0], t_view[..., 1], t_view[..., 2]
    J = np.zeros(t_view.shape[:-1] + (2, 3))
    J[..., 0, 0] = camera.fx / tz
    J[..., 0, 2] = -camera.fx * tx / tz**2
    J[..., 1, 1] = camera.fy / tz
    J[..., 1, 2] = -camera.fy * ty / tz**2
    return J


def project_covariance(rotation, scales, position, camera: Camera) -> np.ndarray:
    """Image-space covariance ``J W R S (J W R S)^T`` in pixel units."""
    t_view = camera.to_view(position)
    if t_view[2] <= camera.near:
        raise BehindCamera(f"view depth {t_view[2]:.6g} <= near plane {camera.near}")
    M = projection_jacobian(t_view, camera) @ camera.R
    L = M @ (as_rotmat(rotation) * np.asarray(scales, dtype=np.float64)[None, :])
    cov = L @ L.T
    cov[1, 0] = cov[0, 1]
    return cov


def frustum_cull(position, camera: Camera, cov3d=None) -> bool:
    """True if ``position`` is inside the view frustum.

    With ``cov3d`` the image rectangle is padded by three standard deviations
    of the projected footprint along its major axis.
    """
    t_view = camera.to_view(position)
    z = t_view[2]
    if not (camera.near < z < camera.far):
        return False
    u = camera.fx * t_view[0] / z + camera.cx
    v = camera.fy * t_view[1] / z + camera.cy
    pad = 0.0
    if cov3d is not None:
        M = projection_jacobian(t_view, camera) @ camera.R
        cov2d = M @ np.asarray(cov3d, dtype=np.float64) @ M.T
        pad = 3.0 * np.sqrt(max(np.linalg.eigvalsh(cov2d)[-1], 0.0))
    return bool(-0.5 - pad <= u <= camera.width - 0.5 + pad and -0.5 - pad <= v <= camera.height - 0.5 + pad)
