"""Adam, the baseline scene trainer and the joint refinement stage."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .losses import photometric_loss
from .primitives import GaussianCloud, num_sh_coeffs
from .render import backward_3d, render_3d, visible_mask

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15


@dataclass
class AdamState:
    """Moments for one parameter array; ``step`` counts updates per leading row."""

    m: np.ndarray
    v: np.ndarray
    step: np.ndarray
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def zeros_like(cls, param, **kw) -> AdamState:
        param = np.asarray(param)
        rows = param.shape[0] if param.ndim else 1
        return cls(np.zeros(param.shape), np.zeros(param.shape), np.zeros(rows, dtype=np.int64), **kw)

    def select(self, idx) -> AdamState:
        return AdamState(self.m[idx].copy(), self.v[idx].copy(), self.step[idx].copy(), self.beta1, self.beta2, self.eps)

    def extend(self, n: int) -> AdamState:
        shape = (n,) + self.m.shape[1:]
        return AdamState(np.concatenate([self.m, np.zeros(shape)]), np.concatenate([self.v, np.zeros(shape)]),
                         np.concatenate([self.step, np.zeros(n, dtype=np.int64)]), self.beta1, self.beta2, self.eps)


def adam_step(param, grad, state: AdamState, lr, active=None):
    """One bias-corrected Adam update; returns ``(new_param, state)``.

    ``active`` (bool per leading row) gives SparseAdam semantics: inactive
    rows keep their moments and step count untouched. ``lr`` may be an
    array broadcastable to ``param``.
    """
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape:
        raise ValueError(f"shape mismatch: {param.shape} vs {grad.shape}")
    rows = param.shape[0] if param.ndim else 1
    if active is None:
        active = np.ones(rows, dtype=bool)
    active = np.asarray(active, dtype=bool)
    if not active.any():
        return param.copy(), state
    expand = (slice(None),) + (None,) * (param.ndim - 1) if param.ndim else ()
    a = active[expand] if param.ndim else bool(active[0])
    b1, b2 = state.beta1, state.beta2
    m = np.where(a, b1 * state.m + (1 - b1) * grad, state.m)
    v = np.where(a, b2 * state.v + (1 - b2) * grad * grad, state.v)
    step = state.step + active.astype(np.int64)
    t = np.maximum(step, 1)
    bc1 = (1 - b1 ** t)[expand] if param.ndim else 1 - b1 ** t[0]
    bc2 = (1 - b2 ** t)[expand] if param.ndim else 1 - b2 ** t[0]
    update = lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    new = np.where(a, param - update, param)
    return new, AdamState(m, v, step, b1, b2, state.eps)


class Adam:
    """Adam over a dict of named parameter arrays, each with its own learning rate."""

    def __init__(self, lrs: dict, **kw):
        self.lrs = dict(lrs)
        self.kw = kw
        self.state: dict[str, AdamState] = {}
        self.skipped_nonfinite = 0

    def step(self, params: dict, grads: dict, active: dict | None = None) -> dict:
        out = {}
        for name, lr in self.lrs.items():
            if name not in params:
                continue
            p, g = params[name], grads[name]
            if not np.all(np.isfinite(g)):
                self.skipped_nonfinite += 1
                out[name] = p
                continue
            st = self.state.get(name)
            if st is None or st.m.shape != np.shape(p):
                st = AdamState.zeros_like(p, **self.kw)
            mask = None if active is None else active.get(name)
            out[name], self.state[name] = adam_step(p, g, st, lr, mask)
        return out

    def select(self, idx) -> None:
        self.state = {k: s.select(idx) for k, s in self.state.items()}

    def extend(self, n: int) -> None:
        self.state = {k: s.extend(n) for k, s in self.state.items()}


# ---------------------------------------------------------------------------
# learning rates

BASELINE_LRS = {
    "positions": 0.0016,
    "quats": 0.001,
    "log_scales": 0.005,
    "opacity_logits": 0.05,
    "sh_dc": 0.0025,
    "sh_rest": 0.0025 / 20,
}

JOINT_LRS = {
    "positions": 0.000016,
    "sh_dc": 0.001,
    "sh_rest": 0.001 / 20,
    "opacity_logits": 0.02,
    "log_scales": 0.002,
    "quats": 0.0005,
    "lobe_dirs": 0.001,
    "lobe_T": 0.0002,
    "lobe_beta": 0.002,
}


def _expand_lrs(lrs: dict, sh_order: int) -> dict:
    """Merge the split SH rates into one per-coefficient array for ``sh``."""
    out = {k: v for k, v in lrs.items() if k not in ("sh_dc", "sh_rest")}
    if "sh_dc" in lrs:
        rate = np.full((1, num_sh_coeffs(sh_order), 1), lrs.get("sh_rest", lrs["sh_dc"]))
        rate[0, 0, 0] = lrs["sh_dc"]
        out["sh"] = rate
    return out


@dataclass
class View:
    image: np.ndarray
    camera: object
    name: str = ""


def _epoch_order(n_views: int, iterations: int, rng) -> np.ndarray:
    """Concatenated shuffled epochs so every view is visited equally often."""
    reps = -(-iterations // max(n_views, 1))
    return np.concatenate([rng.permutation(n_views) for _ in range(reps)])[:iterations] if iterations else np.zeros(0, int)


def baseline_train(scene_init: GaussianCloud, views, iterations: int, lrs: dict | None = None,
                   background=(0.0, 0.0, 0.0), seed: int = 0, lambda_ssim: float = 0.2,
                   history: list | None = None) -> GaussianCloud:
    """Fit every field of a fixed-size scene to the views (no densification)."""
    if len(scene_init) == 0:
        raise ValueError("baseline_train needs a non-empty initial scene")
    cloud = scene_init.copy()
    if iterations <= 0:
        return cloud
    opt = Adam(_expand_lrs(lrs or BASELINE_LRS, cloud.sh_order))
    rng = np.random.default_rng(seed)
    for it, vi in enumerate(_epoch_order(len(views), iterations, rng)):
        view = views[vi]
        out = render_3d(cloud, view.camera, background)
        loss, d_img = photometric_loss(out.rgb, view.image, lambda_ssim)
        if history is not None:
            history.append(loss)
        g = backward_3d(cloud, view.camera, background, d_img, out=out)
        new = opt.step({f: getattr(cloud, f) for f in opt.lrs}, g.as_dict())
        for f, val in new.items():
            setattr(cloud, f, val)
    return cloud


@dataclass
class OptimizationPlan:
    lrs: dict = field(default_factory=lambda: dict(JOINT_LRS))
    iterations: int = 0
    iterations_per_view: int = 30
    train_original_opacity: bool = True
    lambda_ssim: float = 0.2
    seed: int = 0

    def resolve_iterations(self, n_views: int) -> int:
        return self.iterations if self.iterations > 0 else self.iterations_per_view * n_views


def joint_optimize(original: GaussianCloud, added: GaussianCloud, views, plan: OptimizationPlan,
                   background=(0.0, 0.0, 0.0), history: list | None = None):
    """Refine added Gaussians fully and original Gaussians in opacity only.

    Original opacities follow SparseAdam: only rows inside the current
    view's frustum step. Returns ``(original', added')``; every field of
    ``original`` other than ``opacity_logits`` is returned bit-identical.
    """
    orig_opacity = original.opacity_logits.copy()
    added = added.copy()
    order = max(original.sh_order, added.sh_order if len(added) else 0)
    if len(added) and added.sh_order != order:
        added = added.with_sh_order(order)
    frozen = original.copy() if original.sh_order == order else original.with_sh_order(order)
    n0 = len(original)
    iterations = plan.resolve_iterations(len(views))
    added_opt = Adam(_expand_lrs(plan.lrs, order))
    orig_opt = Adam({"opacity_logits": plan.lrs["opacity_logits"]})
    rng = np.random.default_rng(plan.seed)
    for vi in _epoch_order(len(views), iterations, rng):
        view = views[vi]
        frozen.opacity_logits = orig_opacity
        scene = GaussianCloud.concat(frozen, added) if len(added) else frozen
        out = render_3d(scene, view.camera, background)
        loss, d_img = photometric_loss(out.rgb, view.image, plan.lambda_ssim)
        if history is not None:
            history.append(loss)
        g = backward_3d(scene, view.camera, background, d_img, out=out)
        if plan.train_original_opacity and n0:
            vis = visible_mask(frozen, view.camera)
            orig_opacity = orig_opt.step({"opacity_logits": orig_opacity},
                                         {"opacity_logits": g.opacity_logits[:n0]},
                                         {"opacity_logits": vis})["opacity_logits"]
        if len(added):
            params = {f: getattr(added, f) for f in added_opt.lrs}
            grads = {f: getattr(g, f)[n0:] for f in added_opt.lrs}
            for f, val in added_opt.step(params, grads).items():
                setattr(added, f, val)
            added.project_constraints()
    result = original.copy()
    result.opacity_logits = orig_opacity.copy()
    return result, added
