"""Non-learned desmoking baselines: dark channel prior and a simple veil remover."""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from desmoke.errors import ArgumentError, DegenerateError, ShapeError
from desmoke.imgio import luminance


@dataclass(frozen=True)
class DcpParams:
    patch_size: int = 15
    omega: float = 0.95
    t_floor: float = 0.1
    airlight_fraction: float = 0.001
    guided_radius: int = 40
    guided_eps: float = 1e-3

    def __post_init__(self):
        if not 0 < self.omega <= 1:
            raise ArgumentError("omega must be in (0, 1]")
        if not 0 < self.t_floor < 1:
            raise ArgumentError("t_floor must be in (0, 1)")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ArgumentError("patch_size must be odd")


def _require_rgb(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"expected a 3-channel image, got shape {img.shape}")
    return img


def dark_channel(img, patch=15):
    img = _require_rgb(img)
    return ndimage.minimum_filter(img.min(axis=0), size=patch, mode="nearest")


def estimate_airlight(img, dark, fraction=0.001):
    """Brightest input pixel (by channel sum) among the top ``fraction`` of the dark channel."""
    img = _require_rgb(img)
    flat_dark = np.asarray(dark).ravel()
    n = max(1, int(fraction * flat_dark.size))
    index = np.arange(flat_dark.size)
    # stable: descending dark value, then row-major index
    candidates = np.lexsort((index, -flat_dark))[:n]
    pixels = img.reshape(3, -1)[:, candidates]
    sums = pixels.sum(axis=0)
    best = np.lexsort((candidates, -sums))[0]
    return pixels[:, best].copy()


# Estimated airlight is floored per channel: a smoke-free frame can pick a
# pixel with a zero channel, which would otherwise make img / A undefined.
AIRLIGHT_FLOOR = 0.05


def _estimated_airlight(img, patch, fraction):
    A = estimate_airlight(img, dark_channel(img, patch), fraction)
    return np.maximum(A, AIRLIGHT_FLOOR)


def box_filter(x, radius):
    return ndimage.uniform_filter(x, size=2 * radius + 1, mode="reflect")


def guided_filter(guide, src, radius, eps):
    mean_i = box_filter(guide, radius)
    mean_p = box_filter(src, radius)
    var_i = box_filter(guide * guide, radius) - mean_i * mean_i
    cov_ip = box_filter(guide * src, radius) - mean_i * mean_p
    a = cov_ip / (var_i + eps)
    b = mean_p - a * mean_i
    return box_filter(a, radius) * guide + box_filter(b, radius)


def _check_airlight(A):
    A = np.asarray(A, dtype=np.float64).reshape(-1)
    if A.size == 1:
        A = np.repeat(A, 3)
    if np.any(A <= 0):
        raise DegenerateError(f"airlight has a non-positive channel: {A}")
    return A


def estimate_transmission(img, A, params=None, refine=True):
    params = params or DcpParams()
    img = _require_rgb(img)
    A = _check_airlight(A)
    t = 1.0 - params.omega * dark_channel(img / A[:, None, None], params.patch_size)
    t = np.clip(t, params.t_floor, 1.0)
    if refine:
        t = guided_filter(luminance(img), t, params.guided_radius, params.guided_eps)
        t = np.clip(t, params.t_floor, 1.0)
    return t


def recover(img, t, A, t_floor):
    # I + (I - A)(1 - t)/t == (I - A)/t + A, but exact when t == 1
    A = np.asarray(A, dtype=np.float64).reshape(-1)[:, None, None]
    t = np.maximum(t, t_floor)
    return np.clip(img + (img - A) * ((1.0 - t) / t), 0.0, 1.0)


def dehaze_dcp(img, params=None, transmission=None):
    """Dark channel prior dehazing; ``transmission`` overrides the estimate."""
    params = params or DcpParams()
    img = _require_rgb(img)
    A = _estimated_airlight(img, params.patch_size, params.airlight_fraction)
    t = estimate_transmission(img, A, params) if transmission is None else np.asarray(transmission)
    return recover(img, t, A, params.t_floor)


def _disk(radius):
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return xx**2 + yy**2 <= radius**2


VEIL_RADIUS = 15


def estimate_veil(img, strength):
    min_channel = img.min(axis=0)
    opened = ndimage.grey_opening(min_channel, footprint=_disk(VEIL_RADIUS), mode="nearest")
    return np.minimum(strength * opened, 0.95 * min_channel)


def remove_veil(img, strength=0.8, patch=15):
    """Subtract an atmospheric-veil estimate and renormalize by the airlight."""
    if not 0.0 <= strength <= 1.0:
        raise ArgumentError("strength must be in [0, 1]")
    img = _require_rgb(img)
    veil = estimate_veil(img, strength)
    A = _estimated_airlight(img, patch, 0.001)
    denom = np.maximum(1.0 - veil[None] / A[:, None, None], 0.05)
    return np.clip((img - veil[None]) / denom, 0.0, 1.0)
