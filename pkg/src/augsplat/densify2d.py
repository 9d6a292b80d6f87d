"""Error-driven fitting of supplementary 2D Gaussians, one view at a time."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .evaluate import _check_same, ssim_map
from .losses import LAMBDA_SSIM, photometric_loss
from .optim import Adam
from .primitives import Gaussian2D, Gaussian2DSet, logit
from .render import backward_2d, render_2d

log = logging.getLogger(__name__)

COLOR_EPS = 1e-4


@dataclass
class DensifyConfig:
    interval: int = 200
    growth_fraction: float = 0.2
    finetune_steps: int = 1000
    max_growth_events: int = 30
    init_opacity: float = 0.01
    init_scale_px: float = 4.0
    prune_opacity: float = 0.005
    prune_min_pixels: int = 25
    lambda_ssim: float = LAMBDA_SSIM
    lr_center_factor: float = 0.001
    lr_color: float = 0.01
    lr_opacity: float = 0.02
    lr_scale: float = 0.001
    lr_rotation: float = 0.02

    def lrs(self, width: int, height: int) -> dict:
        return {
            "centers": self.lr_center_factor * 0.5 * (width + height),
            "colors": self.lr_color,
            "opacity_logits": self.lr_opacity,
            "log_scales": self.lr_scale,
            "angles": self.lr_rotation,
        }


@dataclass
class ViewData:
    """Inputs of the per-view 2D stage: ground truth, baseline render and its median depth."""

    image: np.ndarray
    rendered: np.ndarray
    depth: np.ndarray
    camera: object = None
    name: str = ""
    extra: dict = field(default_factory=dict)


def loss_map(rendered, target, lambda_ssim: float = LAMBDA_SSIM) -> np.ndarray:
    """Squared per-pixel mix of L1 and SSIM dissimilarity, both averaged over channels."""
    rendered, target = _check_same(rendered, target)
    l1 = np.mean(np.abs(rendered - target), axis=-1)
    dssim = 1.0 - np.mean(ssim_map(rendered, target), axis=-1)
    mixed = (1.0 - lambda_ssim) * l1 + lambda_ssim * dssim
    return np.maximum(mixed, 0.0) ** 2


def sample_new_centers(loss, count: int, rng_seed=None) -> np.ndarray:
    """Draw ``count`` pixel coordinates ``(u, v)`` with probability proportional to ``loss``.

    An all-zero map falls back to uniform sampling.
    """
    loss = np.asarray(loss, dtype=np.float64)
    H, W = loss.shape
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    p = np.clip(loss.ravel(), 0.0, None)
    total = p.sum()
    if not np.isfinite(total) or total <= 0.0:
        log.warning("loss map is all zero; sampling uniformly")
        p = np.full(H * W, 1.0 / (H * W))
    else:
        p = p / total
    flat = rng.choice(H * W, size=int(count), replace=True, p=p)
    return np.stack([flat % W, flat // W], axis=1)


def init_new_primitive(center, rendered, depth_map, opacity: float = 0.01, scale_px: float = 4.0) -> Gaussian2D:
    """Nearly transparent isotropic 2D Gaussian coloured like the current render at ``center``."""
    u, v = int(round(center[0])), int(round(center[1]))
    color = np.clip(np.asarray(rendered)[v, u], COLOR_EPS, 1.0 - COLOR_EPS)
    return Gaussian2D(
        center=np.array([float(center[0]), float(center[1])]),
        log_scales=np.full(2, math.log(scale_px)),
        rotation_angle=0.0,
        opacity_logit=float(logit(opacity)),
        color=color,
        depth=float(np.asarray(depth_map)[v, u]),
    )


def allocate_budgets(per_view_losses, total: int) -> np.ndarray:
    """Largest-remainder apportionment of ``total`` proportional to the losses."""
    losses = np.asarray(per_view_losses, dtype=np.float64)
    total = int(total)
    if total < 0 or np.any(losses < 0):
        raise ValueError("budgets need total >= 0 and non-negative losses")
    n = len(losses)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    weights = losses if losses.sum() > 0 else np.ones(n)
    exact = total * weights / weights.sum()
    base = np.floor(exact).astype(np.int64)
    short = total - int(base.sum())
    # ties resolve to the lower view index
    order = np.lexsort((np.arange(n), -(exact - base)))
    base[order[:short]] += 1
    return base


def coverage_pixels(g2: Gaussian2DSet, width: int, height: int, sub: int = 5) -> np.ndarray:
    """Number of image pixels whose unit square overlaps each primitive's 1-sigma ellipse.

    Overlap is tested on a ``sub`` x ``sub`` lattice spanning the pixel square,
    corners included.
    """
    out = np.zeros(len(g2), dtype=np.int64)
    covs = g2.covariances
    offs = np.linspace(-0.5, 0.5, sub)
    du, dv = (a.ravel() for a in np.meshgrid(offs, offs))
    for i in range(len(g2)):
        cov = covs[i]
        det = cov[0, 0] * cov[1, 1] - cov[0, 1] ** 2
        if det <= 0:
            continue
        inv = np.array([[cov[1, 1], -cov[0, 1]], [-cov[0, 1], cov[0, 0]]]) / det
        ru, rv = math.sqrt(cov[0, 0]) + 0.5, math.sqrt(cov[1, 1]) + 0.5
        cu, cv = g2.centers[i]
        u0, u1 = max(0, math.ceil(cu - ru)), min(width - 1, math.floor(cu + ru))
        v0, v1 = max(0, math.ceil(cv - rv)), min(height - 1, math.floor(cv + rv))
        if u0 > u1 or v0 > v1:
            continue
        uu, vv = np.meshgrid(np.arange(u0, u1 + 1) - cu, np.arange(v0, v1 + 1) - cv)
        x = uu.ravel()[:, None] + du[None]
        y = vv.ravel()[:, None] + dv[None]
        m2 = inv[0, 0] * x * x + 2 * inv[0, 1] * x * y + inv[1, 1] * y * y
        out[i] = int(np.count_nonzero(m2.min(axis=1) <= 1.0))
    return out


def prune_mask(g2: Gaussian2DSet, width: int, height: int, cfg: DensifyConfig) -> np.ndarray:
    """True for primitives that survive a prune event."""
    alpha = 1.0 / (1.0 + np.exp(-g2.opacity_logits))
    return (alpha >= cfg.prune_opacity) & (coverage_pixels(g2, width, height) >= cfg.prune_min_pixels)


def _refresh_depths(g2: Gaussian2DSet, depth_map) -> None:
    H, W = depth_map.shape
    u = np.clip(np.rint(g2.centers[:, 0]).astype(int), 0, W - 1)
    v = np.clip(np.rint(g2.centers[:, 1]).astype(int), 0, H - 1)
    g2.depths = depth_map[v, u].astype(np.float64)


def train_view(view: ViewData, budget: int, config: DensifyConfig | None = None, seed: int = 0,
               history: list | None = None) -> list[Gaussian2D]:
    """Optimise, grow and prune 2D Gaussians over the view's baseline render.

    Every ``interval`` steps of the growth phase the live set is pruned and
    then topped up towards the budget. Fine-tuning (``finetune_steps``)
    starts at the first prune that leaves the budget filled, or once
    ``max_growth_events`` is spent, so fresh primitives always face one
    prune first. Fine-tuning does not prune. The output drops primitives
    whose opacity fell below ``prune_opacity``; the coverage rule is left to
    the scheduled prunes so detail shrunk during fine-tuning survives.
    """
    cfg = config or DensifyConfig()
    if budget <= 0:
        return []
    target = np.asarray(view.image, dtype=np.float64)
    base = np.asarray(view.rendered, dtype=np.float64)
    depth = np.asarray(view.depth, dtype=np.float64)
    H, W = target.shape[:2]
    rng = np.random.default_rng(seed)
    opt = Adam(cfg.lrs(W, H))
    live = Gaussian2DSet.empty()
    events = 0
    remaining = None
    it = 0
    while True:
        if it % cfg.interval == 0:
            if it > 0 and remaining is None and len(live):
                keep = np.flatnonzero(prune_mask(live, W, H, cfg))
                if len(keep) < len(live):
                    live = live.subset(keep)
                    opt.select(keep)
            grew = False
            if remaining is None and len(live) < budget and events < cfg.max_growth_events:
                n_new = math.ceil(cfg.growth_fraction * (len(live) if len(live) else budget))
                n_new = max(1, min(n_new, budget - len(live)))
                current = render_2d(live, base) if len(live) else base
                centers = sample_new_centers(loss_map(current, target, cfg.lambda_ssim), n_new, rng)
                fresh = Gaussian2DSet.from_list(
                    init_new_primitive(c, current, depth, cfg.init_opacity, cfg.init_scale_px) for c in centers)
                live = Gaussian2DSet.concat(live, fresh)
                opt.extend(n_new)
                events += 1
                grew = True
            if remaining is None and not grew and (len(live) >= budget or events >= cfg.max_growth_events):
                remaining = cfg.finetune_steps
        if remaining is not None:
            if remaining == 0:
                break
            remaining -= 1
        if len(live) == 0:
            it += 1
            continue
        img, ctx = render_2d(live, base, return_ctx=True)
        loss, d_img = photometric_loss(img, target, cfg.lambda_ssim)
        if history is not None:
            history.append(loss)
        grads = backward_2d(live, base, d_img, ctx)
        new = opt.step({f: getattr(live, f) for f in opt.lrs}, grads)
        for f, val in new.items():
            setattr(live, f, val)
        np.clip(live.colors, COLOR_EPS, 1.0 - COLOR_EPS, out=live.colors)
        _refresh_depths(live, depth)
        it += 1
    if len(live):
        alpha = 1.0 / (1.0 + np.exp(-live.opacity_logits))
        live = live.subset(np.flatnonzero(alpha >= cfg.prune_opacity))
    return live.to_list()


def dump_primitives(primitives, path) -> None:
    """Write a per-view primitive list as JSON for inspection."""
    rows = [
        {
            "center": g.center.tolist(),
            "scales": g.scales.tolist(),
            "rotation": g.rotation_angle,
            "opacity": g.opacity,
            "color": g.color.tolist(),
            "depth": g.depth,
        }
        for g in primitives
    ]
    with open(path, "w") as fh:
        json.dump(rows, fh, indent=1)
