"""Lift fitted 2D Gaussians back into world space using the baseline depth map."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from .camera import Camera, Rotation, frustum_cull, pixel_to_world, project_covariance, rotmat_to_quat
from .errors import ClusteringFailed, DegenerateInput, EmptyFootprint
from .primitives import (SH_C0, T_MAX, T_MIN, Gaussian2D, GaussianCloud, OpacityLobe, num_sh_coeffs,
                         view_angle)

log = logging.getLogger(__name__)

CLUSTER_FACTOR = 5.0
CLUSTER_GROWTH = 1.5
CLUSTER_RETRIES = 10
MIN_CLUSTER = 3
EIG_FLOOR = 1e-8
LOBE_C = 7.0


@dataclass
class PixelSampleSet:
    pixels: np.ndarray   # (M, 2) integer (u, v)
    points: np.ndarray   # (M, 3) world
    depths: np.ndarray   # (M,)
    weights: np.ndarray  # (M,)

    def __len__(self):
        return len(self.pixels)

    def subset(self, idx) -> PixelSampleSet:
        return PixelSampleSet(self.pixels[idx], self.points[idx], self.depths[idx], self.weights[idx])


@dataclass
class ClusterResult:
    groups: list
    selected: int
    includes_center: bool
    threshold: float
    attempts: list = field(default_factory=list)

    @property
    def members(self) -> np.ndarray:
        return self.groups[self.selected]


def collect_samples(g2d: Gaussian2D, depth_map, camera: Camera) -> PixelSampleSet:
    """Pixels inside the 3-sigma footprint with positive depth, lifted to world space."""
    depth_map = np.asarray(depth_map, dtype=np.float64)
    H, W = depth_map.shape
    cov = g2d.covariance
    det = cov[0, 0] * cov[1, 1] - cov[0, 1] ** 2
    if not det > 0:
        raise EmptyFootprint("degenerate 2D covariance")
    inv = np.array([[cov[1, 1], -cov[0, 1]], [-cov[0, 1], cov[0, 0]]]) / det
    cu, cv = g2d.center
    ru, rv = 3.0 * math.sqrt(cov[0, 0]), 3.0 * math.sqrt(cov[1, 1])
    u0, u1 = max(0, math.ceil(cu - ru)), min(W - 1, math.floor(cu + ru))
    v0, v1 = max(0, math.ceil(cv - rv)), min(H - 1, math.floor(cv + rv))
    if u0 > u1 or v0 > v1:
        raise EmptyFootprint("footprint misses the image")
    uu, vv = np.meshgrid(np.arange(u0, u1 + 1), np.arange(v0, v1 + 1))
    uu, vv = uu.ravel(), vv.ravel()
    du, dv = uu - cu, vv - cv
    m2 = inv[0, 0] * du * du + 2 * inv[0, 1] * du * dv + inv[1, 1] * dv * dv
    d = depth_map[vv, uu]
    keep = (m2 <= 9.0) & (d > 0) & np.isfinite(d)
    if not keep.any():
        raise EmptyFootprint("no pixel with valid depth under the footprint")
    uu, vv, d, m2 = uu[keep], vv[keep], d[keep], m2[keep]
    return PixelSampleSet(
        pixels=np.stack([uu, vv], axis=1),
        points=pixel_to_world(uu, vv, d, camera),
        depths=d,
        weights=np.exp(-0.5 * m2),
    )


def pixel_spacing(u, v, depth, camera: Camera) -> float:
    """World distance between horizontally adjacent pixels at ``depth``."""
    a = pixel_to_world(u, v, depth, camera)
    b = pixel_to_world(u + 1, v, depth, camera)
    return float(np.linalg.norm(b - a))


def _partition(points, threshold) -> list:
    if len(points) == 1:
        return [np.array([0])]
    labels = fcluster(linkage(points, method="single"), t=threshold, criterion="distance")
    groups = [np.flatnonzero(labels == lab) for lab in np.unique(labels)]
    # canonical order so the result does not depend on label numbering
    return sorted(groups, key=lambda g: (-len(g), g.min()))


def cluster_samples(samples: PixelSampleSet, center_depth: float, camera: Camera, center=None,
                    factor: float = CLUSTER_FACTOR, growth: float = CLUSTER_GROWTH,
                    retries: int = CLUSTER_RETRIES) -> ClusterResult:
    """Single-linkage grouping of the lifted samples with a growing stop threshold.

    Prefers the group of at least three samples that contains the centre
    pixel, then the largest such group (ties go to the group holding the
    smallest pixel in (v, u) order). ``center`` defaults to the
    highest-weight sample's pixel.
    """
    if len(samples) == 0:
        raise EmptyFootprint("no samples to cluster")
    if center is None:
        center = samples.pixels[int(np.argmax(samples.weights))]
    cpix = np.array([int(round(center[0])), int(round(center[1]))])
    threshold = factor * pixel_spacing(float(cpix[0]), float(cpix[1]), center_depth, camera)
    pix_key = samples.pixels[:, 1] * (int(samples.pixels[:, 0].max()) + 1) + samples.pixels[:, 0]
    at_center = np.flatnonzero(np.all(samples.pixels == cpix, axis=1))
    attempts = []
    for _ in range(retries + 1):
        groups = _partition(samples.points, threshold)
        groups = sorted(groups, key=lambda g: (-len(g), pix_key[g].min()))
        attempts.append({"threshold": threshold, "groups": len(groups)})
        big = [i for i, g in enumerate(groups) if len(g) >= MIN_CLUSTER]
        for i in big:
            if np.isin(at_center, groups[i]).any():
                return ClusterResult(groups, i, True, threshold, attempts)
        if big:
            return ClusterResult(groups, big[0], False, threshold, attempts)
        threshold *= growth
    err = ClusteringFailed(f"no group of {MIN_CLUSTER}+ samples after {retries} retries")
    err.attempts = attempts
    raise err


def wpca(points, weights):
    """Weighted principal axes and standard deviations, descending.

    Returns a right-handed ``Rotation`` whose columns are the axes, and the
    per-axis sigmas; eigenvalues are floored at ``1e-8`` of the largest.
    """
    points = np.asarray(points, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if len(points) < 3 or np.any(w <= 0):
        raise DegenerateInput("wpca needs at least 3 points with positive weights")
    w = w / w.sum()
    mean = w @ points
    x = points - mean
    cov = (x * w[:, None]).T @ x
    vals, vecs = np.linalg.eigh(cov)
    vals, vecs = vals[::-1], vecs[:, ::-1]
    if not vals[0] > 0:
        raise DegenerateInput("all points coincide")
    vals = np.maximum(vals, EIG_FLOOR * vals[0])
    if np.linalg.det(vecs) < 0:
        vecs[:, 2] = -vecs[:, 2]
    return Rotation(rotmat_to_quat(vecs)), np.sqrt(vals)


def resolve_position(cluster: ClusterResult, samples: PixelSampleSet, g2d: Gaussian2D, depth_map,
                     camera: Camera) -> np.ndarray:
    """World position under the 2D centre, at the centre depth or the cluster's mean depth."""
    depth_map = np.asarray(depth_map, dtype=np.float64)
    u, v = g2d.center
    if cluster.includes_center:
        H, W = depth_map.shape
        d = depth_map[min(max(int(round(v)), 0), H - 1), min(max(int(round(u)), 0), W - 1)]
    else:
        idx = cluster.members
        d = float(np.average(samples.depths[idx], weights=samples.weights[idx]))
    return pixel_to_world(u, v, d, camera)


def calibrate_scale(rotation, sigma, position, camera: Camera, target_cov2d) -> float:
    """Least-squares ``k`` with ``k^2 Q`` closest to the target in Frobenius norm."""
    Q = project_covariance(rotation, sigma, position, camera)
    target = np.asarray(target_cov2d, dtype=np.float64)
    num = float(np.sum(Q * target))
    den = float(np.sum(Q * Q))
    if not (num > 0 and den > 0):
        log.warning("non-positive scale numerator; keeping k = 1")
        return 1.0
    return math.sqrt(num / den)


def init_lobe(position, source_camera: Camera, all_cameras, c: float = LOBE_C) -> OpacityLobe:
    """Lobe aimed at the source camera, wide enough to reach the nearest other visible camera."""
    position = np.asarray(position, dtype=np.float64)
    axis = source_camera.center - position
    axis = axis / np.linalg.norm(axis)
    best = math.inf
    for cam in all_cameras:
        if np.linalg.norm(cam.center - source_camera.center) < 1e-9:
            continue
        if np.linalg.norm(cam.center - position) < 1e-12 or not frustum_cull(position, cam):
            continue
        best = min(best, view_angle(position, cam.center, axis))
    T = T_MIN if not math.isfinite(best) else float(np.clip(c * best / math.pi, T_MIN, T_MAX))
    return OpacityLobe(axis, T, 0.0)


@dataclass
class SplatStats:
    lifted: int = 0
    dropped_empty: int = 0
    dropped_cluster: int = 0
    diagnostics: list = field(default_factory=list)

    @property
    def dropped(self) -> int:
        return self.dropped_empty + self.dropped_cluster

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"lifted": self.lifted, "dropped_empty": self.dropped_empty,
                       "dropped_cluster": self.dropped_cluster, "primitives": self.diagnostics}, fh, indent=1)


def inverse_splat_view(primitives, depth_map, camera: Camera, all_cameras, sh_order: int = 0,
                       c: float = LOBE_C, lobes: bool = True, stats: SplatStats | None = None) -> GaussianCloud:
    """Back-project one view's 2D Gaussians; failures are skipped and counted in ``stats``."""
    stats = stats if stats is not None else SplatStats()
    k = num_sh_coeffs(sh_order)
    rows = []
    for i, g in enumerate(primitives):
        try:
            samples = collect_samples(g, depth_map, camera)
            cu, cv = g.center
            center_pix = (min(max(int(round(cu)), 0), depth_map.shape[1] - 1),
                          min(max(int(round(cv)), 0), depth_map.shape[0] - 1))
            center_depth = float(depth_map[center_pix[1], center_pix[0]])
            if not center_depth > 0:
                center_depth = float(np.average(samples.depths, weights=samples.weights))
            cluster = cluster_samples(samples, center_depth, camera, center=center_pix)
            chosen = samples.subset(cluster.members)
            rotation, sigma = wpca(chosen.points, chosen.weights)
        except EmptyFootprint:
            stats.dropped_empty += 1
            continue
        except (ClusteringFailed, DegenerateInput):
            stats.dropped_cluster += 1
            continue
        position = resolve_position(cluster, samples, g, depth_map, camera)
        kscale = calibrate_scale(rotation, sigma, position, camera, g.covariance)
        scales = np.maximum(kscale * sigma, 1e-12)
        lobe = init_lobe(position, camera, all_cameras, c) if lobes else None
        sh = np.zeros((k, 3))
        sh[0] = (g.decoded_color - 0.5) / SH_C0
        rows.append((position, rotation.quaternion, np.log(scales), g.opacity_logit, sh, lobe))
        stats.diagnostics.append({"index": i, "position": position.tolist(), "scale_k": kscale,
                                  "includes_center": cluster.includes_center, "cluster_size": len(cluster.members),
                                  "T": None if lobe is None else lobe.T})
    stats.lifted += len(rows)
    if not rows:
        return GaussianCloud.empty(sh_order)
    return GaussianCloud(
        positions=np.stack([r[0] for r in rows]),
        quats=np.stack([r[1] for r in rows]),
        log_scales=np.stack([r[2] for r in rows]),
        opacity_logits=np.array([r[3] for r in rows]),
        sh=np.stack([r[4] for r in rows]),
        lobe_dirs=np.stack([r[5].orientation if r[5] else np.array([0.0, 0.0, 1.0]) for r in rows]),
        lobe_T=np.array([r[5].T if r[5] else 1.0 for r in rows]),
        lobe_beta=np.zeros(len(rows)),
        has_lobe=np.array([r[5] is not None for r in rows]),
    )
