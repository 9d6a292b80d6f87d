"""Image metrics, sRGB transfer functions and diffuse/specular separation."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DimensionMismatch

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
PSNR_CAP = 100.0


def _check_same(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def _blur(img, window):
    # zero padding, same-size output; the window is symmetric so this is self-adjoint
    out = correlate1d(img, window, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, window, axis=1, mode="constant", cval=0.0)


def _ssim_terms(x, y):
    win = gaussian_window()
    C1, C2 = SSIM_K1**2, SSIM_K2**2
    # one batched pass over the five moment images
    mx, my, mxx, myy, mxy = _blur(np.stack([x, y, x * x, y * y, x * y], axis=-1), win).transpose(
        (x.ndim,) + tuple(range(x.ndim)))
    A1 = 2 * mx * my + C1
    A2 = 2 * (mxy - mx * my) + C2
    B1 = mx * mx + my * my + C1
    B2 = (mxx - mx * mx) + (myy - my * my) + C2
    S = (A1 * A2) / (B1 * B2)
    return S, (win, mx, my, A1, A2, B1, B2)


def ssim_map(a, b) -> np.ndarray:
    """Per-pixel, per-channel SSIM with an 11x11 Gaussian window (sigma 1.5)."""
    a, b = _check_same(a, b)
    return _ssim_terms(a, b)[0]


def ssim(a, b) -> float:
    return float(np.mean(ssim_map(a, b)))


def ssim_grad(x, y):
    """Mean SSIM and its gradient w.r.t. ``x`` (``y`` held fixed)."""
    x, y = _check_same(x, y)
    S, (win, mx, my, A1, A2, B1, B2) = _ssim_terms(x, y)
    gS = np.full_like(S, 1.0 / S.size)
    # paired so that identical images give an exactly zero gradient
    d_mx = gS * S * ((2 * my / A1 - 2 * mx / B1) + (2 * mx / B2 - 2 * my / A2))
    d_mxx = gS * S * (-1.0 / B2)
    d_mxy = gS * S * (2.0 / A2)
    b_mx, b_mxx, b_mxy = np.moveaxis(_blur(np.stack([d_mx, d_mxx, d_mxy], axis=-1), win), -1, 0)
    grad = b_mx + 2 * x * b_mxx + y * b_mxy
    return float(np.mean(S)), grad


def psnr(a, b) -> float:
    """PSNR for images in [0, 1], capped at 100 dB."""
    a, b = _check_same(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return float(-10.0 * np.log10(mse))


def srgb_to_linear(img) -> np.ndarray:
    x = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(img) -> np.ndarray:
    x = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * x ** (1 / 2.4) - 0.055)


def saturated_fraction(img, level: float = 1.0) -> float:
    """Fraction of pixels with any channel at or above ``level``."""
    img = np.asarray(img)
    return float(np.mean(np.any(img >= level, axis=-1)))


def decompose(scene_original, scene_added, camera, background=(0.0, 0.0, 0.0)):
    """Split the augmented render into linear diffuse and specular parts.

    The diffuse reference renders the original Gaussians with only their DC
    colour; the augmented image renders everything. Diffuse is their
    elementwise minimum and specular the remainder.
    """
    from .primitives import GaussianCloud
    from .render import render_3d

    original = scene_original if isinstance(scene_original, GaussianCloud) else GaussianCloud.from_list(scene_original)
    added = scene_added if isinstance(scene_added, GaussianCloud) else GaussianCloud.from_list(scene_added)
    full = GaussianCloud.concat(original, added) if len(added) else original
    i_sh0 = srgb_to_linear(render_3d(original, camera, background, sh_order=0).rgb)
    i_aug = srgb_to_linear(render_3d(full, camera, background).rgb)
    diffuse = np.minimum(i_sh0, i_aug)
    specular = i_aug - diffuse
    return diffuse, specular


def metrics_record(view_id, rendered, target) -> dict:
    return {
        "view_id": view_id,
        "psnr": psnr(rendered, target),
        "ssim": ssim(rendered, target),
        "saturated_fraction": saturated_fraction(rendered),
    }
