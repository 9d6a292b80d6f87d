"""Photometric training loss shared by every optimisation stage."""

from __future__ import annotations

import numpy as np

from .evaluate import _check_same, ssim_grad

LAMBDA_SSIM = 0.2


def photometric_loss(rendered, target, lambda_ssim: float = LAMBDA_SSIM):
    """``(1 - l) * L1 + l * (1 - SSIM)`` and its gradient w.r.t. ``rendered``."""
    rendered, target = _check_same(rendered, target)
    diff = rendered - target
    l1 = float(np.mean(np.abs(diff)))
    grad = (1.0 - lambda_ssim) * np.sign(diff) / diff.size
    loss = (1.0 - lambda_ssim) * l1
    if lambda_ssim > 0:
        s, ds = ssim_grad(rendered, target)
        loss += lambda_ssim * (1.0 - s)
        grad -= lambda_ssim * ds
    return loss, grad
