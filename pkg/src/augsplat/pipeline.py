"""The enhancement pipeline: fit 2D Gaussians per view, lift them, refine jointly."""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import PipelineConfig
from .densify2d import ViewData, allocate_budgets, loss_map, train_view
from .inverse_splat import SplatStats, inverse_splat_view
from .optim import joint_optimize
from .primitives import GaussianCloud
from .render import render_3d

log = logging.getLogger(__name__)


@dataclass
class EnhanceResult:
    original: GaussianCloud
    added: GaussianCloud
    primitives_2d: list
    report: dict = field(default_factory=dict)

    @property
    def scene(self) -> GaussianCloud:
        return GaussianCloud.concat(self.original, self.added) if len(self.added) else self.original


def default_workers() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def _train_one(args):
    view, budget, cfg, seed = args
    return train_view(view, budget, cfg, seed)


def fit_2d_stage(scene: GaussianCloud, views, config: PipelineConfig, background=(0.0, 0.0, 0.0),
                 workers: int = 1, report: dict | None = None) -> list:
    """Per-view baseline renders, loss-proportional budgets and 2D fitting."""
    report = report if report is not None else {}
    t0 = time.perf_counter()
    data = []
    for v in views:
        out = render_3d(scene, v.camera, background)
        data.append(ViewData(v.image, out.rgb, out.median_depth, v.camera, getattr(v, "name", "")))
    losses = [float(np.mean(loss_map(d.rendered, d.image, config.lambda_ssim))) for d in data]
    budgets = allocate_budgets(losses, round(config.ratio * len(scene)))
    report["render_seconds"] = time.perf_counter() - t0
    report["budgets"] = budgets.tolist()
    t0 = time.perf_counter()
    cfg = config.densify()
    jobs = [(d, int(b), cfg, config.seed + i) for i, (d, b) in enumerate(zip(data, budgets))]
    if workers > 1 and sum(b > 0 for b in budgets) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            prims = list(pool.map(_train_one, jobs))
    else:
        prims = [_train_one(j) for j in jobs]
    report["fit_2d_seconds"] = time.perf_counter() - t0
    report["primitives_2d"] = [len(p) for p in prims]
    return [(d, p) for d, p in zip(data, prims)]


def lift_stage(fitted, cameras, config: PipelineConfig, sh_order: int, report: dict | None = None) -> GaussianCloud:
    report = report if report is not None else {}
    t0 = time.perf_counter()
    stats = SplatStats()
    parts = [inverse_splat_view(p, d.depth, d.camera, cameras, sh_order, config.lobe_c, config.lobes, stats)
             for d, p in fitted if p]
    added = GaussianCloud.empty(sh_order)
    for part in parts:
        added = GaussianCloud.concat(added, part) if len(added) else part
    report["lift_seconds"] = time.perf_counter() - t0
    report["lifted"] = stats.lifted
    report["dropped_empty_footprint"] = stats.dropped_empty
    report["dropped_clustering"] = stats.dropped_cluster
    return added


def enhance(scene: GaussianCloud, views, config: PipelineConfig | None = None, background=(0.0, 0.0, 0.0),
            workers: int = 1, fitted=None) -> EnhanceResult:
    """Run the full enhancement on the training ``views``.

    ``fitted`` reuses the output of :func:`fit_2d_stage` (handy when several
    variants share one 2D stage).
    """
    config = (config or PipelineConfig()).validate()
    report: dict = {"ratio": config.ratio, "original_count": len(scene), "lobes": config.lobes}
    if config.ratio == 0 or not views:
        report["added_count"] = 0
        return EnhanceResult(scene.copy(), GaussianCloud.empty(scene.sh_order), [], report)
    if fitted is None:
        fitted = fit_2d_stage(scene, views, config, background, workers, report)
    added = lift_stage(fitted, [v.camera for v in views], config, scene.sh_order, report)
    t0 = time.perf_counter()
    plan = config.plan()
    history: list = []
    original, added = joint_optimize(scene, added, views, plan, background, history)
    report["joint_seconds"] = time.perf_counter() - t0
    report["joint_iterations"] = plan.resolve_iterations(len(views))
    if history:
        report["joint_loss_first"] = history[0]
        report["joint_loss_last"] = history[-1]
    report["added_count"] = len(added)
    return EnhanceResult(original, added, [p for _, p in fitted], report)
