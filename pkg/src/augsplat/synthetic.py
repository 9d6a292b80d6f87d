"""Procedural desk-scale scenes with known view-dependent highlights."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .camera import Camera, rotmat_to_quat
from .errors import ConfigError
from .primitives import SH_C0, GaussianCloud, logit
from .render import render_3d
from .scene_io import save_dataset, save_depth, save_scene


@dataclass
class SyntheticSpec:
    shape: str = "plane"            # "plane" or "spheres"
    grid: int = 14                  # plane: grid x grid diffuse splats
    sphere_points: int = 60         # spheres: splats per sphere
    n_specular: int = 4
    n_cameras: int = 24
    test_every: int = 4             # every k-th camera is held out; 0 keeps all for training
    width: int = 64
    height: int = 48
    fov_deg: float = 50.0
    radius: float = 2.6
    elevation_deg: float = 35.0
    arc_deg: float = 120.0
    extent: float = 1.2             # half-size of the textured plane
    specular_scale: float = 0.2
    specular_T: float = 0.2
    specular_beta: float = 0.0
    specular_color: float = 0.95
    specular_height: float = 0.02
    background: tuple = (0.0, 0.0, 0.0)

    def validate(self) -> None:
        if self.n_cameras < 1:
            raise ConfigError("synthetic spec needs at least one camera")
        if self.width < 1 or self.height < 1:
            raise ConfigError("image size must be positive")
        if self.shape not in ("plane", "spheres"):
            raise ConfigError(f"unknown synthetic shape {self.shape!r}")
        if self.n_specular < 0 or self.grid < 1 or self.sphere_points < 1:
            raise ConfigError("primitive counts must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticSpec:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys: {sorted(unknown)}")
        d = dict(d)
        if "background" in d:
            d["background"] = tuple(float(x) for x in d["background"])
        return cls(**d)


@dataclass
class SyntheticScene:
    spec: SyntheticSpec
    diffuse: GaussianCloud
    specular: GaussianCloud
    cameras: list
    images: list
    depths: list
    extra: dict = field(default_factory=dict)

    @property
    def gt(self) -> GaussianCloud:
        return GaussianCloud.concat(self.diffuse, self.specular) if len(self.specular) else self.diffuse

    def split(self, name: str) -> list[int]:
        return [i for i, c in enumerate(self.cameras) if c.split == name]

    def save(self, directory) -> None:
        directory = Path(directory)
        save_dataset(directory, self.images, self.cameras)
        save_scene(self.gt, directory / "ground_truth.ply")
        (directory / "depth").mkdir(exist_ok=True)
        for cam, d in zip(self.cameras, self.depths):
            save_depth(d, directory / "depth" / f"{cam.name}.depth")


def camera_ring(spec: SyntheticSpec) -> list[Camera]:
    cams = []
    elev = math.radians(spec.elevation_deg)
    n = spec.n_cameras
    for i in range(n):
        az = math.radians(-spec.arc_deg / 2 + spec.arc_deg * (i / (n - 1) if n > 1 else 0.5)) - math.pi / 2
        eye = spec.radius * np.array([math.cos(elev) * math.cos(az), math.cos(elev) * math.sin(az), math.sin(elev)])
        if spec.radius == 0:
            eye = np.array([0.0, -1e-3, 3.0])
        split = "test" if spec.test_every and i % spec.test_every == spec.test_every // 2 else "train"
        cams.append(Camera.look_at(eye, np.zeros(3), spec.width, spec.height, spec.fov_deg,
                                   name=f"view_{i:03d}", split=split))
    return cams


def _texture(xy) -> np.ndarray:
    x, y = xy[:, 0], xy[:, 1]
    r = 0.45 + 0.3 * np.sin(3.1 * x + 0.4) * np.cos(2.3 * y)
    g = 0.4 + 0.3 * np.cos(2.7 * x - 1.1 * y)
    b = 0.35 + 0.25 * np.sin(1.9 * y + 0.8) * np.sin(2.2 * x + 1.3)
    return np.clip(np.stack([r, g, b], axis=1), 0.05, 0.95)


def _cloud(positions, quats, scales, opacity, colors) -> GaussianCloud:
    n = len(positions)
    sh = np.zeros((n, 1, 3))
    sh[:, 0] = (np.asarray(colors) - 0.5) / SH_C0
    return GaussianCloud(positions=np.asarray(positions, dtype=np.float64), quats=np.asarray(quats, dtype=np.float64),
                         log_scales=np.log(np.asarray(scales, dtype=np.float64)),
                         opacity_logits=np.full(n, logit(opacity)), sh=sh)


def _plane(spec: SyntheticSpec, rng) -> GaussianCloud:
    g = spec.grid
    ticks = (np.arange(g) + 0.5) / g * 2 * spec.extent - spec.extent
    xx, yy = np.meshgrid(ticks, ticks)
    xy = np.stack([xx.ravel(), yy.ravel()], axis=1) + rng.normal(scale=0.1 * spec.extent / g, size=(g * g, 2))
    pos = np.column_stack([xy, np.zeros(g * g)])
    spacing = 2 * spec.extent / g
    scales = np.column_stack([np.full(g * g, 0.7 * spacing), np.full(g * g, 0.7 * spacing), np.full(g * g, 0.02 * spacing)])
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (g * g, 1))
    return _cloud(pos, quats, scales, 0.95, _texture(xy))


def _spheres(spec: SyntheticSpec, rng) -> GaussianCloud:
    centers = np.array([[-0.6, 0.0, 0.35], [0.5, 0.3, 0.3], [0.0, -0.5, 0.25]])
    radii = np.array([0.35, 0.3, 0.25])
    colors = np.array([[0.85, 0.25, 0.2], [0.2, 0.7, 0.3], [0.25, 0.35, 0.85]])
    pos, cols, scl = [], [], []
    m = spec.sphere_points
    # Fibonacci lattice on each sphere
    k = np.arange(m) + 0.5
    phi = np.arccos(1 - 2 * k / m)
    theta = math.pi * (1 + 5**0.5) * k
    unit = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
    for c, r, col in zip(centers, radii, colors):
        pos.append(c + r * unit)
        shade = 0.75 + 0.25 * unit[:, 2:3]
        cols.append(np.clip(col * shade, 0.02, 0.98))
        scl.append(np.full((m, 3), r * 2.2 / math.sqrt(m)))
    n = 3 * m
    return _cloud(np.concatenate(pos), np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)), np.concatenate(scl), 0.9,
                  np.concatenate(cols))


def _specular(spec: SyntheticSpec, cams, rng) -> GaussianCloud:
    n = spec.n_specular
    if n == 0:
        return GaussianCloud.empty(0)
    pos = np.column_stack([rng.uniform(-0.6, 0.6, size=(n, 2)) * spec.extent, np.full(n, spec.specular_height)])
    # each highlight faces a camera spread along the ring, so different views see different highlights
    picks = np.linspace(0, len(cams) - 1, n + 2)[1:-1].round().astype(int)
    dirs = np.stack([cams[i].center - pos[j] for j, i in enumerate(picks)])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    s = spec.specular_scale
    # flat disks lying on the plane
    scales = np.tile([s, s, 0.05 * s], (n, 1))
    quats = np.tile(rotmat_to_quat(np.eye(3)), (n, 1))
    cloud = _cloud(pos, quats, scales, 0.9, np.full((n, 3), spec.specular_color))
    cloud.lobe_dirs = dirs
    cloud.lobe_T = np.full(n, spec.specular_T)
    cloud.lobe_beta = np.full(n, spec.specular_beta)
    cloud.has_lobe = np.ones(n, dtype=bool)
    return cloud


def generate_synthetic(spec: SyntheticSpec | dict | None = None, seed: int = 0) -> SyntheticScene:
    """Build a deterministic scene, its camera ring and exact renders of it."""
    spec = SyntheticSpec.from_dict(spec) if isinstance(spec, dict) else (spec or SyntheticSpec())
    spec.validate()
    rng = np.random.default_rng(seed)
    cams = camera_ring(spec)
    diffuse = _plane(spec, rng) if spec.shape == "plane" else _spheres(spec, rng)
    specular = _specular(spec, cams, rng)
    scene = SyntheticScene(spec, diffuse, specular, cams, [], [])
    gt = scene.gt
    for cam in cams:
        out = render_3d(gt, cam, spec.background)
        scene.images.append(out.rgb)
        scene.depths.append(out.median_depth)
    return scene
