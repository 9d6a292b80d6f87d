"""Primitive types and the per-primitive appearance functions.

Three primitives live here: the plain world-space Gaussian, the enhanced
Gaussian carrying a view-dependent opacity lobe, and the image-space 2D
Gaussian used during densification. Batched storage for rendering is in
:class:`GaussianCloud` and :class:`Gaussian2DSet`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .camera import Rotation
from .errors import DegenerateDirection

T_MIN, T_MAX = 0.01, 1.0

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


def num_sh_coeffs(order: int) -> int:
    return (order + 1) ** 2


def sh_order_from_count(k: int) -> int:
    order = int(round(np.sqrt(k))) - 1
    if num_sh_coeffs(order) != k:
        raise ValueError(f"{k} is not a valid SH coefficient count")
    return order


# ---------------------------------------------------------------------------
# primitive records


@dataclass
class OpacityLobe:
    orientation: np.ndarray
    T: float = 1.0
    beta: float = 0.0

    def __post_init__(self):
        self.orientation = np.asarray(self.orientation, dtype=np.float64)
        self.T = float(self.T)
        self.beta = float(self.beta)

    def normalized(self) -> OpacityLobe:
        """Projection back onto the constraint set (unit orientation, T in range)."""
        d = self.orientation / np.linalg.norm(self.orientation)
        return OpacityLobe(d, float(np.clip(self.T, T_MIN, T_MAX)), self.beta)


@dataclass
class Gaussian3D:
    position: np.ndarray
    rotation: Rotation
    log_scales: np.ndarray
    opacity_logit: float
    sh_coeffs: np.ndarray  # ((L+1)^2, 3); row 0 is the diffuse colour

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        if not isinstance(self.rotation, Rotation):
            self.rotation = Rotation(self.rotation)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64)
        self.opacity_logit = float(self.opacity_logit)
        self.sh_coeffs = np.asarray(self.sh_coeffs, dtype=np.float64).reshape(-1, 3)
        sh_order_from_count(len(self.sh_coeffs))

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def sh_order(self) -> int:
        return sh_order_from_count(len(self.sh_coeffs))


@dataclass
class EnhancedGaussian:
    base: Gaussian3D
    lobe: OpacityLobe | None = None


@dataclass
class Gaussian2D:
    center: np.ndarray
    log_scales: np.ndarray
    rotation_angle: float
    opacity_logit: float
    color: np.ndarray
    depth: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        self.rotation_angle = float(self.rotation_angle)
        self.opacity_logit = float(self.opacity_logit)
        self.depth = float(self.depth)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def decoded_color(self) -> np.ndarray:
        return np.clip(self.color, 0.0, 1.0)

    @property
    def covariance(self) -> np.ndarray:
        return covariance_2d(self.log_scales[None], np.array([self.rotation_angle]))[0]


def covariance_2d(log_scales, angles):
    """Covariances for 2D Gaussians whose primary axis makes ``angle`` with image y."""
    s = np.exp(log_scales)
    sn, cs = np.sin(angles), np.cos(angles)
    e1 = np.stack([sn, cs], axis=-1)
    e2 = np.stack([cs, -sn], axis=-1)
    return ((s[:, 0] ** 2)[:, None, None] * e1[:, :, None] * e1[:, None, :]
            + (s[:, 1] ** 2)[:, None, None] * e2[:, :, None] * e2[:, None, :])


# ---------------------------------------------------------------------------
# batched containers


@dataclass
class GaussianCloud:
    """Structure-of-arrays store for world-space Gaussians, lobed or not."""

    positions: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray  # (N, K, 3)
    lobe_dirs: np.ndarray = None
    lobe_T: np.ndarray = None
    lobe_beta: np.ndarray = None
    has_lobe: np.ndarray = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.sh = np.asarray(self.sh, dtype=np.float64)
        if self.sh.ndim == 2:
            self.sh = self.sh.reshape(n, -1, 3)
        if self.sh.shape[0] != n:
            self.sh = self.sh.reshape(n, -1, 3)
        if self.lobe_dirs is None:
            self.lobe_dirs = np.tile([0.0, 0.0, 1.0], (n, 1))
        if self.lobe_T is None:
            self.lobe_T = np.ones(n)
        if self.lobe_beta is None:
            self.lobe_beta = np.zeros(n)
        if self.has_lobe is None:
            self.has_lobe = np.zeros(n, dtype=bool)
        self.lobe_dirs = np.asarray(self.lobe_dirs, dtype=np.float64).reshape(n, 3)
        self.lobe_T = np.asarray(self.lobe_T, dtype=np.float64).reshape(n)
        self.lobe_beta = np.asarray(self.lobe_beta, dtype=np.float64).reshape(n)
        self.has_lobe = np.asarray(self.has_lobe, dtype=bool).reshape(n)

    PARAMS = ("positions", "quats", "log_scales", "opacity_logits", "sh",
              "lobe_dirs", "lobe_T", "lobe_beta")

    def __len__(self):
        return len(self.positions)

    @property
    def sh_order(self) -> int:
        return sh_order_from_count(self.sh.shape[1])

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @classmethod
    def empty(cls, sh_order: int = 0) -> GaussianCloud:
        k = num_sh_coeffs(sh_order)
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, k, 3)))

    @classmethod
    def from_list(cls, items, sh_order: int | None = None) -> GaussianCloud:
        items = list(items)
        if not items:
            return cls.empty(sh_order or 0)
        enhanced = [g if isinstance(g, EnhancedGaussian) else EnhancedGaussian(g) for g in items]
        if sh_order is None:
            sh_order = max(e.base.sh_order for e in enhanced)
        k = num_sh_coeffs(sh_order)
        sh = np.zeros((len(items), k, 3))
        for i, e in enumerate(enhanced):
            m = min(k, len(e.base.sh_coeffs))
            sh[i, :m] = e.base.sh_coeffs[:m]
        lobes = [e.lobe for e in enhanced]
        return cls(
            positions=np.stack([e.base.position for e in enhanced]),
            quats=np.stack([e.base.rotation.quaternion for e in enhanced]),
            log_scales=np.stack([e.base.log_scales for e in enhanced]),
            opacity_logits=np.array([e.base.opacity_logit for e in enhanced]),
            sh=sh,
            lobe_dirs=np.stack([lb.orientation if lb else np.array([0.0, 0.0, 1.0]) for lb in lobes]),
            lobe_T=np.array([lb.T if lb else 1.0 for lb in lobes]),
            lobe_beta=np.array([lb.beta if lb else 0.0 for lb in lobes]),
            has_lobe=np.array([lb is not None for lb in lobes]),
        )

    def to_list(self) -> list[EnhancedGaussian]:
        out = []
        for i in range(len(self)):
            base = Gaussian3D(self.positions[i].copy(), Rotation(self.quats[i]), self.log_scales[i].copy(),
                              self.opacity_logits[i], self.sh[i].copy())
            lobe = OpacityLobe(self.lobe_dirs[i].copy(), self.lobe_T[i], self.lobe_beta[i]) if self.has_lobe[i] else None
            out.append(EnhancedGaussian(base, lobe))
        return out

    def copy(self) -> GaussianCloud:
        return GaussianCloud(**{f: np.array(getattr(self, f), copy=True) for f in self.PARAMS + ("has_lobe",)})

    def subset(self, idx) -> GaussianCloud:
        return GaussianCloud(**{f: np.array(getattr(self, f)[idx], copy=True) for f in self.PARAMS + ("has_lobe",)})

    def with_sh_order(self, order: int) -> GaussianCloud:
        """Copy truncated (or zero-padded) to ``order``."""
        out = self.copy()
        k = num_sh_coeffs(order)
        sh = np.zeros((len(self), k, 3))
        m = min(k, self.sh.shape[1])
        sh[:, :m] = self.sh[:, :m]
        out.sh = sh
        return out

    def without_lobes(self) -> GaussianCloud:
        out = self.copy()
        out.has_lobe[:] = False
        return out

    @staticmethod
    def concat(a: GaussianCloud, b: GaussianCloud) -> GaussianCloud:
        k = max(a.sh.shape[1], b.sh.shape[1])
        order = sh_order_from_count(k)
        a, b = a.with_sh_order(order), b.with_sh_order(order)
        fields_ = GaussianCloud.PARAMS + ("has_lobe",)
        return GaussianCloud(**{f: np.concatenate([getattr(a, f), getattr(b, f)]) for f in fields_})

    def project_constraints(self) -> None:
        """Renormalise lobe orientations and clamp lobe widths in place."""
        self.lobe_dirs /= np.linalg.norm(self.lobe_dirs, axis=1, keepdims=True)
        np.clip(self.lobe_T, T_MIN, T_MAX, out=self.lobe_T)


@dataclass
class Gaussian2DSet:
    centers: np.ndarray
    log_scales: np.ndarray
    angles: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    depths: np.ndarray = field(default=None)

    PARAMS = ("centers", "log_scales", "angles", "opacity_logits", "colors")

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 2)
        n = len(self.centers)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 2)
        self.angles = np.asarray(self.angles, dtype=np.float64).reshape(n)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        if self.depths is None:
            self.depths = np.zeros(n)
        self.depths = np.asarray(self.depths, dtype=np.float64).reshape(n)

    def __len__(self):
        return len(self.centers)

    @classmethod
    def empty(cls) -> Gaussian2DSet:
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_list(cls, items) -> Gaussian2DSet:
        items = list(items)
        if not items:
            return cls.empty()
        return cls(
            np.stack([g.center for g in items]), np.stack([g.log_scales for g in items]),
            np.array([g.rotation_angle for g in items]), np.array([g.opacity_logit for g in items]),
            np.stack([g.color for g in items]), np.array([g.depth for g in items]),
        )

    def to_list(self) -> list[Gaussian2D]:
        return [Gaussian2D(self.centers[i].copy(), self.log_scales[i].copy(), self.angles[i],
                           self.opacity_logits[i], self.colors[i].copy(), self.depths[i])
                for i in range(len(self))]

    def subset(self, idx) -> Gaussian2DSet:
        return Gaussian2DSet(*(np.array(getattr(self, f)[idx], copy=True) for f in self.PARAMS + ("depths",)))

    def copy(self) -> Gaussian2DSet:
        return self.subset(slice(None))

    @staticmethod
    def concat(a: Gaussian2DSet, b: Gaussian2DSet) -> Gaussian2DSet:
        return Gaussian2DSet(*(np.concatenate([getattr(a, f), getattr(b, f)]) for f in Gaussian2DSet.PARAMS + ("depths",)))

    @property
    def covariances(self) -> np.ndarray:
        return covariance_2d(self.log_scales, self.angles)


# ---------------------------------------------------------------------------
# opacity lobe


def lobe_factor(theta, T, beta):
    """The angular factor ``((cos(min(theta/T, pi)) + 1) / 2) ** exp(beta)``."""
    arg = np.maximum(0.0, np.minimum(np.asarray(theta) / T, np.pi))
    base = 0.5 * (np.cos(arg) + 1.0)
    return base ** np.exp(beta)


def lobe_opacity(theta, lobe: OpacityLobe, alpha):
    """Effective opacity of a lobed Gaussian seen at angle ``theta`` from the lobe axis."""
    return alpha * lobe_factor(theta, lobe.T, lobe.beta)


def _lobe_partials(theta, T, beta):
    """Angular factor and its partials w.r.t. (theta, T, beta)."""
    theta = np.asarray(theta, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    x = theta / T
    inside = x < np.pi
    xc = np.where(inside, x, np.pi)
    base = 0.5 * (np.cos(xc) + 1.0)
    p = np.exp(beta)
    f = base**p
    positive = base > 0
    safe_base = np.where(positive, base, 1.0)
    # d f / d x, zero on the clamped plateau
    dfdx = np.where(inside & positive, p * safe_base ** (p - 1.0) * (-0.5 * np.sin(xc)), 0.0)
    df_dtheta = dfdx / T
    df_dT = dfdx * (-theta / T**2)
    df_dbeta = np.where(positive, f * np.log(safe_base) * p, 0.0)
    return f, df_dtheta, df_dT, df_dbeta


def lobe_opacity_grad(theta, lobe: OpacityLobe, alpha):
    """Analytic partials of :func:`lobe_opacity` w.r.t. ``(theta, T, beta, alpha)``."""
    f, dth, dT, db = _lobe_partials(theta, lobe.T, lobe.beta)
    return alpha * dth, alpha * dT, alpha * db, f


def lobe_dfactor_dcos(theta, T, beta):
    """Derivative of the angular factor w.r.t. ``cos(theta)``.

    Finite at theta = 0 where ``dtheta/dcos`` diverges: uses the limit
    ``sin(theta/T) / sin(theta) -> 1/T``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    p = np.exp(beta)
    x = theta / T
    inside = x < np.pi
    xc = np.where(inside, x, np.pi)
    base = 0.5 * (np.cos(xc) + 1.0)
    positive = base > 0
    safe_base = np.where(positive, base, 1.0)
    s = np.sin(theta)
    small = s < 1e-7
    ratio = np.where(small, 1.0 / T, np.sin(xc) / np.where(small, 1.0, s))
    return np.where(inside & positive, p * safe_base ** (p - 1.0) * 0.5 * ratio / T, 0.0)


def view_angle(position, camera_center, orientation) -> float:
    """Angle between the Gaussian-to-camera direction and the lobe axis."""
    v = np.asarray(camera_center, dtype=np.float64) - np.asarray(position, dtype=np.float64)
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise DegenerateDirection("camera centre coincides with the Gaussian position")
    d = np.asarray(orientation, dtype=np.float64)
    d = d / np.linalg.norm(d)
    return float(np.arccos(np.clip(np.dot(v / n, d), -1.0, 1.0)))


# ---------------------------------------------------------------------------
# spherical harmonics


def sh_basis(dirs, order: int) -> np.ndarray:
    """Real SH basis (3DGS sign convention) at unit directions; ``(N, (order+1)^2)``."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    cols = [np.full_like(x, SH_C0)]
    if order >= 1:
        cols += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if order >= 2:
        xx, yy, zz = x * x, y * y, z * z
        cols += [SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (2 * zz - xx - yy),
                 SH_C2[3] * x * z, SH_C2[4] * (xx - yy)]
    if order >= 3:
        cols += [SH_C3[0] * y * (3 * xx - yy), SH_C3[1] * x * y * z, SH_C3[2] * y * (4 * zz - xx - yy),
                 SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy), SH_C3[4] * x * (4 * zz - xx - yy),
                 SH_C3[5] * z * (xx - yy), SH_C3[6] * x * (xx - 3 * yy)]
    if order > 3:
        raise ValueError("SH order above 3 is not supported")
    return np.stack(cols, axis=1)


def sh_basis_jacobian(dirs, order: int) -> np.ndarray:
    """Partials of each basis polynomial w.r.t. (x, y, z); ``(N, K, 3)``."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    zero = np.zeros_like(x)
    rows = [(zero, zero, zero)]
    if order >= 1:
        c = SH_C1
        rows += [(zero, zero - c, zero), (zero, zero, zero + c), (zero - c, zero, zero)]
    if order >= 2:
        c = SH_C2
        rows += [(c[0] * y, c[0] * x, zero), (zero, c[1] * z, c[1] * y),
                 (-2 * c[2] * x, -2 * c[2] * y, 4 * c[2] * z), (c[3] * z, zero, c[3] * x),
                 (2 * c[4] * x, -2 * c[4] * y, zero)]
    if order >= 3:
        c = SH_C3
        xx, yy, zz = x * x, y * y, z * z
        rows += [(c[0] * 6 * x * y, c[0] * (3 * xx - 3 * yy), zero),
                 (c[1] * y * z, c[1] * x * z, c[1] * x * y),
                 (c[2] * -2 * x * y, c[2] * (4 * zz - xx - 3 * yy), c[2] * 8 * y * z),
                 (c[3] * -6 * x * z, c[3] * -6 * y * z, c[3] * (6 * zz - 3 * xx - 3 * yy)),
                 (c[4] * (4 * zz - 3 * xx - yy), c[4] * -2 * x * y, c[4] * 8 * x * z),
                 (c[5] * 2 * x * z, c[5] * -2 * y * z, c[5] * (xx - yy)),
                 (c[6] * (3 * xx - 3 * yy), c[6] * -6 * x * y, zero)]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=1)


def eval_sh(sh_coeffs, view_dir, order: int | None = None) -> np.ndarray:
    """RGB from SH coefficients ``(K, 3)`` along a unit ``view_dir``.

    Adds the 0.5 DC offset and clamps at zero, as 3DGS does.
    """
    sh_coeffs = np.asarray(sh_coeffs, dtype=np.float64).reshape(-1, 3)
    stored = sh_order_from_count(len(sh_coeffs))
    order = stored if order is None else order
    if order > stored:
        raise ValueError(f"requested SH order {order} exceeds stored order {stored}")
    basis = sh_basis(view_dir, order)[0]
    rgb = basis @ sh_coeffs[: num_sh_coeffs(order)] + 0.5
    return np.maximum(rgb, 0.0)


def with_opacity(g: Gaussian3D, opacity: float) -> Gaussian3D:
    return replace(g, opacity_logit=float(logit(opacity)))
