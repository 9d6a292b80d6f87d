"""Shared builders and the finite-difference oracle used across the suite."""

from __future__ import annotations

import numpy as np

from augsplat.camera import Camera
from augsplat.primitives import Gaussian2DSet, GaussianCloud
from augsplat.render import active_signature, backward_2d, backward_3d, render_2d, render_3d

FD_STEP = 1e-5
FD_RTOL = 1e-3
# absolute slack for entries whose true gradient is ~0; central differences
# at h=1e-5 carry roughly 1e-10 of cancellation noise on O(1) losses
FD_ATOL = 1e-7

# filled by the acceptance suite, printed by conftest at the end of the run
ACCEPTANCE_LINES: list[str] = []


def small_camera(size=8, eye=(0.3, -3.0, 1.0), fov=40.0) -> Camera:
    return Camera.look_at(eye, [0.0, 0.0, 0.0], size, size, fov_deg=fov)


def random_cloud(rng, n, order=1, lobed_fraction=0.7, camera=None) -> GaussianCloud:
    k = (order + 1) ** 2
    cloud = GaussianCloud(
        positions=rng.normal(0.0, 0.25, (n, 3)),
        quats=rng.normal(size=(n, 4)),
        log_scales=np.log(rng.uniform(0.15, 0.4, (n, 3))),
        opacity_logits=rng.normal(0.3, 0.8, n),
        sh=rng.normal(0.0, 0.5, (n, k, 3)),
        lobe_dirs=rng.normal(size=(n, 3)),
        lobe_T=rng.uniform(0.3, 1.0, n),
        lobe_beta=rng.normal(0.0, 0.5, n),
        has_lobe=rng.random(n) < lobed_fraction,
    )
    if camera is not None:
        # keep most lobes facing the camera so their gradients are exercised
        cloud.lobe_dirs = camera.center - cloud.positions + rng.normal(0.0, 0.5, (n, 3))
    return cloud


def random_2d(rng, n, size=8) -> Gaussian2DSet:
    return Gaussian2DSet(rng.uniform(0, size, (n, 2)), np.log(rng.uniform(1.0, 3.0, (n, 2))),
                         rng.uniform(0, 3, n), rng.normal(0, 1, n), rng.uniform(0.05, 0.95, (n, 3)), rng.random(n))


def close(a, b, rtol=FD_RTOL, atol=FD_ATOL) -> bool:
    return abs(a - b) <= rtol * max(abs(a), abs(b)) + atol


def fd_check_3d(cloud, camera, background, h=FD_STEP):
    """Compare backward_3d with central differences of sum(rgb^2).

    Returns ``(checked, skipped, failures)``; a sample is skipped when the
    perturbed renders leave the base render's smooth branch.
    """
    def run(c):
        out = render_3d(c, camera, background)
        return float(np.sum(out.rgb ** 2)), out

    _, base = run(cloud)
    sig = active_signature(base)
    grads = backward_3d(cloud, camera, background, 2.0 * base.rgb, out=base)
    checked = skipped = 0
    failures = []
    for field in GaussianCloud.PARAMS:
        arr, ga = getattr(cloud, field), getattr(grads, field)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            lp, op = run(cloud)
            arr[idx] = old - h
            lm, om = run(cloud)
            arr[idx] = old
            if active_signature(op) != sig or active_signature(om) != sig:
                skipped += 1
                continue
            fd = (lp - lm) / (2 * h)
            checked += 1
            if not close(ga[idx], fd):
                failures.append((field, idx, ga[idx], fd))
    return checked, skipped, failures


def fd_check_2d(g2, background, h=FD_STEP):
    def run(g):
        img, ctx = render_2d(g, background, return_ctx=True)
        return float(np.sum(img ** 2)), img, ctx

    _, img, ctx = run(g2)
    sig = active_signature(ctx)
    grads = backward_2d(g2, background, 2.0 * img, ctx)
    checked = skipped = 0
    failures = []
    for field in Gaussian2DSet.PARAMS:
        arr = getattr(g2, field)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            lp, _, cp = run(g2)
            arr[idx] = old - h
            lm, _, cm = run(g2)
            arr[idx] = old
            if active_signature(cp) != sig or active_signature(cm) != sig:
                skipped += 1
                continue
            fd = (lp - lm) / (2 * h)
            checked += 1
            if not close(grads[field][idx], fd):
                failures.append((field, idx, grads[field][idx], fd))
    return checked, skipped, failures


def plane_depth(camera, normal, offset=0.0):
    """View depth of the plane ``n . x = offset`` at every pixel centre."""
    from augsplat.camera import pixel_to_world

    uu, vv = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
    c = camera.center
    rays = pixel_to_world(uu, vv, 1.0, camera) - c
    return (offset - c @ normal) / (rays @ normal)
