"""Differentiable CPU splatting for 3D (optionally lobed) and 2D Gaussians.

Both renderers share one compositing core. Every primitive is evaluated
densely against every pixel, which keeps the forward and backward passes
free of tiling approximations. Conventions follow 3DGS: a 3-sigma footprint
cutoff, contributions with ``alpha < 1/255`` skipped, alpha clamped at 0.99
and a single global front-to-back sort by mean depth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import Camera, projection_jacobian, quat_to_rotmat, quat_to_rotmat_vjp
from .primitives import (
    Gaussian2DSet,
    GaussianCloud,
    _lobe_partials,
    covariance_2d,
    lobe_dfactor_dcos,
    sh_basis,
    sh_basis_jacobian,
    sigmoid,
)

ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
CUTOFF_SQ = 9.0  # 3 sigma
MEDIAN_T = 0.5


@dataclass
class RenderOutput:
    rgb: np.ndarray
    median_depth: np.ndarray
    final_transmittance: np.ndarray
    ctx: dict = field(default=None, repr=False)


@dataclass
class RenderGradients:
    """Per-primitive gradients, aligned with the input cloud."""

    positions: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    lobe_dirs: np.ndarray
    lobe_T: np.ndarray
    lobe_beta: np.ndarray

    @classmethod
    def zeros_like(cls, cloud: GaussianCloud) -> RenderGradients:
        return cls(*(np.zeros_like(getattr(cloud, f)) for f in GaussianCloud.PARAMS))

    def as_dict(self) -> dict:
        return {f: getattr(self, f) for f in GaussianCloud.PARAMS}


def pixel_grid(width: int, height: int) -> np.ndarray:
    u, v = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    return np.stack([u.ravel(), v.ravel()], axis=1)


def _background_array(background, width, height) -> np.ndarray:
    bg = np.asarray(background, dtype=np.float64)
    if bg.ndim == 1 or bg.size == 3:
        return np.broadcast_to(bg.reshape(1, 3), (width * height, 3))
    if bg.shape != (height, width, 3):
        raise ValueError(f"background shape {bg.shape} does not match image {height}x{width}")
    return bg.reshape(-1, 3)


def _conic(cov):
    """Inverse of stacked symmetric 2x2 matrices as ``(a, b, c)`` plus determinants."""
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
    safe = np.where(det > 0, det, 1.0)
    conic = np.stack([cov[:, 1, 1] / safe, -cov[:, 0, 1] / safe, cov[:, 0, 0] / safe], axis=1)
    return conic, det


# ---------------------------------------------------------------------------
# compositing core


def composite(means, conics, opacities, colors, pix, bg, depths=None):
    """Front-to-back alpha compositing of already-sorted 2D footprints.

    Returns ``(rgb (P,3), median_depth (P,), T_final (P,), ctx)``.
    """
    n, p = len(means), len(pix)
    if n == 0:
        ctx = {"n": 0}
        return bg.copy(), np.zeros(p), np.ones(p), ctx
    dx = pix[None, :, 0] - means[:, 0, None]
    dy = pix[None, :, 1] - means[:, 1, None]
    a, b, c = conics[:, 0, None], conics[:, 1, None], conics[:, 2, None]
    m2 = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
    inside = m2 <= CUTOFF_SQ
    g = np.where(inside, np.exp(-0.5 * np.where(inside, m2, 0.0)), 0.0)
    raw = opacities[:, None] * g
    active = inside & (raw >= ALPHA_MIN)
    clamped = raw > ALPHA_MAX
    alpha = np.where(active, np.minimum(raw, ALPHA_MAX), 0.0)
    one_minus = 1.0 - alpha
    T_incl = np.cumprod(one_minus, axis=0)
    T_excl = np.empty_like(T_incl)
    T_excl[0] = 1.0
    T_excl[1:] = T_incl[:-1]
    w = alpha * T_excl
    T_final = T_incl[-1]
    rgb = w.T @ colors + T_final[:, None] * bg
    median = np.zeros(p)
    if depths is not None:
        below = T_incl < MEDIAN_T
        hit = below.any(axis=0)
        first = np.argmax(below, axis=0)
        median = np.where(hit, depths[first], 0.0)
    ctx = dict(n=n, dx=dx, dy=dy, g=g, active=active, clamped=clamped, alpha=alpha,
               T_excl=T_excl, w=w, T_final=T_final, colors=colors, opacities=opacities,
               conics=conics, bg=bg)
    return rgb, median, T_final, ctx


def composite_backward(ctx, d_rgb):
    """Gradients of the composited image w.r.t. means, conics, opacities and colours."""
    n = ctx["n"]
    if n == 0:
        return np.zeros((0, 2)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3))
    w, alpha, T_excl = ctx["w"], ctx["alpha"], ctx["T_excl"]
    colors, bg = ctx["colors"], ctx["bg"]
    d_colors = w @ d_rgb
    cd = colors @ d_rgb.T  # (N, P): c_i . dL/dC
    bgd = np.sum(bg * d_rgb, axis=1) * ctx["T_final"]
    contrib = cd * w
    # suffix sums: contribution of everything behind i, plus background
    behind = np.cumsum(contrib[::-1], axis=0)[::-1] - contrib + bgd[None, :]
    d_alpha = T_excl * cd - behind / (1.0 - alpha)
    d_raw = np.where(ctx["active"] & ~ctx["clamped"], d_alpha, 0.0)
    g = ctx["g"]
    d_opac = np.sum(d_raw * g, axis=1)
    d_m2 = d_raw * ctx["opacities"][:, None] * g * -0.5
    dx, dy = ctx["dx"], ctx["dy"]
    a, b, c = (ctx["conics"][:, i, None] for i in range(3))
    d_means = np.stack([
        -np.sum(d_m2 * (2.0 * a * dx + 2.0 * b * dy), axis=1),
        -np.sum(d_m2 * (2.0 * b * dx + 2.0 * c * dy), axis=1),
    ], axis=1)
    d_conics = np.stack([
        np.sum(d_m2 * dx * dx, axis=1),
        np.sum(d_m2 * 2.0 * dx * dy, axis=1),
        np.sum(d_m2 * dy * dy, axis=1),
    ], axis=1)
    return d_means, d_conics, d_opac, d_colors


def _conic_to_cov_grad(conics, d_conics):
    """Chain ``d/dconic`` through the matrix inverse to ``d/dcov`` (full symmetric)."""
    K = np.empty((len(conics), 2, 2))
    K[:, 0, 0], K[:, 0, 1], K[:, 1, 0], K[:, 1, 1] = conics[:, 0], conics[:, 1], conics[:, 1], conics[:, 2]
    G = np.empty_like(K)
    G[:, 0, 0] = d_conics[:, 0]
    G[:, 0, 1] = G[:, 1, 0] = 0.5 * d_conics[:, 1]
    G[:, 1, 1] = d_conics[:, 2]
    return -K @ G @ K


# ---------------------------------------------------------------------------
# 3D


def visible_mask(cloud: GaussianCloud, camera: Camera, pad_sigma: float = 3.0) -> np.ndarray:
    """Vectorised frustum test with the image rectangle padded by ``pad_sigma`` footprint sigmas."""
    if len(cloud) == 0:
        return np.zeros(0, dtype=bool)
    t = cloud.positions @ camera.R.T + camera.t
    z = t[:, 2]
    ok = (z > camera.near) & (z < camera.far)
    zs = np.where(ok, z, 1.0)
    u = camera.fx * t[:, 0] / zs + camera.cx
    v = camera.fy * t[:, 1] / zs + camera.cy
    M = projection_jacobian(np.where(ok[:, None], t, [0.0, 0.0, 1.0]), camera) @ camera.R
    L = quat_to_rotmat(cloud.quats) * cloud.scales[:, None, :]
    ML = M @ L
    cov = ML @ np.swapaxes(ML, 1, 2)
    tr = cov[:, 0, 0] + cov[:, 1, 1]
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
    lam = 0.5 * tr + np.sqrt(np.maximum(0.25 * tr * tr - det, 0.0))
    pad = pad_sigma * np.sqrt(np.maximum(lam, 0.0))
    inside = ((u >= -0.5 - pad) & (u <= camera.width - 0.5 + pad)
              & (v >= -0.5 - pad) & (v <= camera.height - 0.5 + pad))
    return ok & inside


def render_3d(gaussians, camera: Camera, background=(0.0, 0.0, 0.0), sh_order: int | None = None) -> RenderOutput:
    """Render world-space Gaussians; lobed primitives get view-dependent opacity.

    ``sh_order`` truncates colour evaluation (e.g. 0 for the diffuse-only image).
    """
    cloud = gaussians if isinstance(gaussians, GaussianCloud) else GaussianCloud.from_list(gaussians)
    W, H = camera.width, camera.height
    pix = pixel_grid(W, H)
    bg = _background_array(background, W, H)
    order = cloud.sh_order if sh_order is None else min(sh_order, cloud.sh_order)

    t_all = cloud.positions @ camera.R.T + camera.t
    in_depth = (t_all[:, 2] > camera.near) & (t_all[:, 2] < camera.far)
    idx = np.nonzero(in_depth)[0]
    idx = idx[np.argsort(t_all[idx, 2], kind="stable")]

    t = t_all[idx]
    tz = t[:, 2]
    means = np.stack([camera.fx * t[:, 0] / tz + camera.cx, camera.fy * t[:, 1] / tz + camera.cy], axis=1)
    J = projection_jacobian(t, camera)
    M = J @ camera.R
    Rg = quat_to_rotmat(cloud.quats[idx])
    s = np.exp(cloud.log_scales[idx])
    L = Rg * s[:, None, :]
    cov3 = L @ np.swapaxes(L, 1, 2)
    cov2 = M @ cov3 @ np.swapaxes(M, 1, 2)
    conics, det = _conic(cov2)
    good = det > 1e-18

    pos = cloud.positions[idx]
    cc = camera.center
    to_g = pos - cc
    dist = np.linalg.norm(to_g, axis=1)
    dirs = to_g / dist[:, None]
    basis = sh_basis(dirs, order) if len(idx) else np.zeros((0, (order + 1) ** 2))
    k = basis.shape[1]
    raw_rgb = np.einsum("nk,nkc->nc", basis, cloud.sh[idx, :k]) + 0.5
    colors = np.maximum(raw_rgb, 0.0)

    alpha = sigmoid(cloud.opacity_logits[idx])
    lobed = cloud.has_lobe[idx]
    dnorm = np.linalg.norm(cloud.lobe_dirs[idx], axis=1)
    dhat = cloud.lobe_dirs[idx] / dnorm[:, None]
    cos_t = np.clip(np.sum(-dirs * dhat, axis=1), -1.0, 1.0)
    theta = np.arccos(cos_t)
    f, _, df_dT, df_db = _lobe_partials(theta, cloud.lobe_T[idx], cloud.lobe_beta[idx])
    factor = np.where(lobed, f, 1.0)
    opac = np.where(good, alpha * factor, 0.0)

    rgb, median, T_final, cctx = composite(means, conics, opac, colors, pix, bg, depths=tz)
    ctx = dict(core=cctx, idx=idx, n_total=len(cloud), t=t, J=J, M=M, Rg=Rg, s=s, L=L, cov3=cov3,
               conics=conics, good=good, dirs=dirs, dist=dist, basis=basis, raw_rgb=raw_rgb, order=order,
               alpha=alpha, lobed=lobed, dhat=dhat, dnorm=dnorm, cos_t=cos_t, theta=theta, f=f,
               df_dT=df_dT, df_db=df_db, camera=camera, color_live=raw_rgb > 0.0,
               plateau=lobed & (theta >= np.pi * cloud.lobe_T[idx]))
    return RenderOutput(rgb.reshape(H, W, 3), median.reshape(H, W), T_final.reshape(H, W), ctx)


def backward_3d(gaussians, camera: Camera, background, upstream, out: RenderOutput | None = None) -> RenderGradients:
    """Analytic gradients of ``sum(upstream * render)`` w.r.t. every learnable field.

    Pass the forward ``out`` to skip recomputing it.
    """
    cloud = gaussians if isinstance(gaussians, GaussianCloud) else GaussianCloud.from_list(gaussians)
    if out is None or out.ctx is None:
        out = render_3d(cloud, camera, background)
    ctx = out.ctx
    grads = RenderGradients.zeros_like(cloud)
    idx = ctx["idx"]
    if len(idx) == 0:
        return grads
    d_rgb = np.asarray(upstream, dtype=np.float64).reshape(-1, 3)
    d_means, d_conics, d_opac, d_colors = composite_backward(ctx["core"], d_rgb)
    d_opac = np.where(ctx["good"], d_opac, 0.0)
    d_conics = np.where(ctx["good"][:, None], d_conics, 0.0)

    t, M, cam = ctx["t"], ctx["M"], camera
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]

    # colour -> SH coefficients and view direction
    d_raw = np.where(ctx["raw_rgb"] > 0.0, d_colors, 0.0)
    basis = ctx["basis"]
    k = basis.shape[1]
    d_sh = np.zeros((len(idx),) + cloud.sh.shape[1:])
    d_sh[:, :k] = basis[:, :, None] * d_raw[:, None, :]
    d_pos = np.zeros((len(idx), 3))
    if ctx["order"] > 0:
        jac = sh_basis_jacobian(ctx["dirs"], ctx["order"])
        d_dir = np.einsum("nkc,nc,nkj->nj", cloud.sh[idx, :k], d_raw, jac)
        dirs, dist = ctx["dirs"], ctx["dist"]
        d_pos += (d_dir - np.sum(d_dir * dirs, axis=1, keepdims=True) * dirs) / dist[:, None]

    # opacity and lobe
    alpha, lobed = ctx["alpha"], ctx["lobed"]
    factor = np.where(lobed, ctx["f"], 1.0)
    d_alpha = d_opac * factor
    grads.opacity_logits[idx] = d_alpha * alpha * (1.0 - alpha)
    d_f = np.where(lobed, d_opac * alpha, 0.0)
    grads.lobe_T[idx] = d_f * ctx["df_dT"]
    grads.lobe_beta[idx] = d_f * ctx["df_db"]
    Tl, bl = cloud.lobe_T[idx], cloud.lobe_beta[idx]
    d_cos = d_f * lobe_dfactor_dcos(ctx["theta"], Tl, bl)
    d_cos = np.where(np.abs(ctx["cos_t"]) < 1.0, d_cos, 0.0)
    vhat = -ctx["dirs"]
    dhat = ctx["dhat"]
    d_vhat = d_cos[:, None] * dhat
    d_dhat = d_cos[:, None] * vhat
    grads.lobe_dirs[idx] = (d_dhat - np.sum(d_dhat * dhat, axis=1, keepdims=True) * dhat) / ctx["dnorm"][:, None]
    # vhat = (cc - p)/|cc - p|
    d_pos -= (d_vhat - np.sum(d_vhat * vhat, axis=1, keepdims=True) * vhat) / ctx["dist"][:, None]

    # screen-space mean -> view-space point
    d_t = np.zeros_like(t)
    d_t[:, 0] += d_means[:, 0] * cam.fx / tz
    d_t[:, 1] += d_means[:, 1] * cam.fy / tz
    d_t[:, 2] += -d_means[:, 0] * cam.fx * tx / tz**2 - d_means[:, 1] * cam.fy * ty / tz**2

    # conic -> 2D covariance -> (M, 3D covariance)
    d_cov2 = _conic_to_cov_grad(ctx["conics"], d_conics)
    cov3 = ctx["cov3"]
    d_M = 2.0 * d_cov2 @ M @ cov3
    d_cov3 = np.swapaxes(M, 1, 2) @ d_cov2 @ M
    d_J = d_M @ cam.R.T
    d_t[:, 0] += d_J[:, 0, 2] * -cam.fx / tz**2
    d_t[:, 1] += d_J[:, 1, 2] * -cam.fy / tz**2
    d_t[:, 2] += (d_J[:, 0, 0] * -cam.fx / tz**2 + d_J[:, 0, 2] * 2.0 * cam.fx * tx / tz**3
                  + d_J[:, 1, 1] * -cam.fy / tz**2 + d_J[:, 1, 2] * 2.0 * cam.fy * ty / tz**3)
    d_pos += d_t @ cam.R

    d_L = 2.0 * d_cov3 @ ctx["L"]
    s = ctx["s"]
    d_Rg = d_L * s[:, None, :]
    d_s = np.sum(ctx["Rg"] * d_L, axis=1)
    grads.log_scales[idx] = d_s * s
    grads.quats[idx] = quat_to_rotmat_vjp(cloud.quats[idx], d_Rg)
    grads.positions[idx] = d_pos
    grads.sh[idx] = d_sh
    return grads


# ---------------------------------------------------------------------------
# 2D


def render_2d(gaussians, background, return_ctx: bool = False):
    """Composite 2D Gaussians (sorted by their depth field) over a fixed background image."""
    g2 = gaussians if isinstance(gaussians, Gaussian2DSet) else Gaussian2DSet.from_list(gaussians)
    background = np.asarray(background, dtype=np.float64)
    H, W = background.shape[:2]
    pix = pixel_grid(W, H)
    bg = background.reshape(-1, 3)
    order = np.argsort(g2.depths, kind="stable")
    cov = covariance_2d(g2.log_scales[order], g2.angles[order])
    conics, det = _conic(cov)
    opac = np.where(det > 1e-18, sigmoid(g2.opacity_logits[order]), 0.0)
    colors = np.clip(g2.colors[order], 0.0, 1.0)
    rgb, _, T_final, cctx = composite(g2.centers[order], conics, opac, colors, pix, bg)
    img = rgb.reshape(H, W, 3)
    if return_ctx:
        live = (g2.colors[order] > 0.0) & (g2.colors[order] < 1.0)
        return img, dict(core=cctx, order=order, det=det, T_final=T_final.reshape(H, W), color_live=live)
    return img


def backward_2d(gaussians, background, upstream, ctx=None) -> dict:
    """Gradients of ``sum(upstream * render_2d)``; depth is not differentiated."""
    g2 = gaussians if isinstance(gaussians, Gaussian2DSet) else Gaussian2DSet.from_list(gaussians)
    if ctx is None:
        _, ctx = render_2d(g2, background, return_ctx=True)
    n = len(g2)
    out = {f: np.zeros_like(getattr(g2, f)) for f in Gaussian2DSet.PARAMS}
    if n == 0:
        return out
    order = ctx["order"]
    d_means, d_conics, d_opac, d_colors = composite_backward(ctx["core"], np.asarray(upstream, dtype=np.float64).reshape(-1, 3))
    good = ctx["det"] > 1e-18
    d_opac = np.where(good, d_opac, 0.0)
    d_conics = np.where(good[:, None], d_conics, 0.0)
    d_cov = _conic_to_cov_grad(ctx["core"]["conics"], d_conics)

    ls, ang = g2.log_scales[order], g2.angles[order]
    s = np.exp(ls)
    sn, cs = np.sin(ang), np.cos(ang)
    e1 = np.stack([sn, cs], axis=-1)
    e2 = np.stack([cs, -sn], axis=-1)
    q1 = np.einsum("ni,nij,nj->n", e1, d_cov, e1)
    q2 = np.einsum("ni,nij,nj->n", e2, d_cov, e2)
    q12 = np.einsum("ni,nij,nj->n", e2, d_cov, e1) + np.einsum("ni,nij,nj->n", e1, d_cov, e2)
    alpha = sigmoid(g2.opacity_logits[order])
    col = g2.colors[order]

    out["centers"][order] = d_means
    out["log_scales"][order] = np.stack([2.0 * s[:, 0] ** 2 * q1, 2.0 * s[:, 1] ** 2 * q2], axis=1)
    out["angles"][order] = (s[:, 0] ** 2 - s[:, 1] ** 2) * q12
    out["opacity_logits"][order] = d_opac * alpha * (1.0 - alpha)
    out["colors"][order] = np.where((col > 0.0) & (col < 1.0), d_colors, 0.0)
    return out


def active_signature(out_or_ctx) -> tuple:
    """Discrete state of a render (sort order, skip and clamp masks).

    Two renders with equal signatures lie on the same smooth branch; used to
    tell whether a finite difference straddles a discontinuity.
    """
    ctx = out_or_ctx.ctx if isinstance(out_or_ctx, RenderOutput) else out_or_ctx
    core = ctx["core"]
    parts = [ctx.get("idx", ctx.get("order")).tobytes()]
    if core["n"]:
        parts += [np.packbits(core["active"]).tobytes(), np.packbits(core["clamped"] & core["active"]).tobytes()]
    for key in ("color_live", "plateau"):
        if key in ctx:
            parts.append(np.packbits(ctx[key]).tobytes())
    return tuple(parts)
