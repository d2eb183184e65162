"""Full-reference quality metrics and the analytic SSIM / MS-SSIM gradients.

All metrics take ``(ref, test)`` images laid out ``(C, H, W)`` in [0, 1].
Gradients are with respect to ``test``, the reconstructed image, which is the
argument a generator controls when the metric is used as a training loss.
"""

from dataclasses import dataclass, field

import cv2
import numpy as np

from desmoke.errors import ArgumentError, ShapeError, SizeError

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def gaussian_window_1d(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


@dataclass(frozen=True)
class SsimParams:
    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ArgumentError(f"window_size must be odd and positive, got {self.window_size}")

    @property
    def c1(self):
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self):
        return (self.k2 * self.dynamic_range) ** 2

    @property
    def window_1d(self):
        return gaussian_window_1d(self.window_size, self.sigma)

    @property
    def window(self):
        g = self.window_1d
        return np.outer(g, g)


@dataclass(frozen=True)
class MsSsimParams:
    weights: tuple = MS_SSIM_WEIGHTS
    base: SsimParams = field(default_factory=SsimParams)

    def __post_init__(self):
        if len(self.weights) < 1:
            raise ArgumentError("MS-SSIM needs at least one scale")
        if any(w < 0 for w in self.weights):
            raise ArgumentError("MS-SSIM weights must be non-negative")

    @property
    def scales(self):
        return len(self.weights)

    @property
    def normalized_weights(self):
        w = np.asarray(self.weights, dtype=np.float64)
        return w / w.sum()

    def min_size(self):
        return self.base.window_size * 2 ** (self.scales - 1)

    @classmethod
    def for_scales(cls, scales, base=None):
        """The first ``scales`` standard weights (renormalized at use)."""
        if not 1 <= scales <= len(MS_SSIM_WEIGHTS):
            raise ArgumentError(f"scales must be in 1..{len(MS_SSIM_WEIGHTS)}")
        return cls(weights=MS_SSIM_WEIGHTS[:scales], base=base or SsimParams())

    @classmethod
    def fit(cls, height, width, base=None):
        """Largest standard pyramid (at most 5 scales) that fits an image."""
        base = base or SsimParams()
        n = min(height, width)
        scales = 0
        while scales < len(MS_SSIM_WEIGHTS) and n // 2**scales >= base.window_size:
            scales += 1
        if scales == 0:
            raise SizeError(f"{height}x{width} image is smaller than the {base.window_size}px window")
        return cls.for_scales(scales, base)


@dataclass
class MetricResult:
    name: str
    per_image: list
    mean: float
    std: float


def _check_pair(ref, test):
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ShapeError(f"shape mismatch: {ref.shape} vs {test.shape}")
    return ref, test


def rmse(ref, test):
    ref, test = _check_pair(ref, test)
    return float(np.sqrt(np.mean((ref - test) ** 2)))


def psnr(ref, test):
    """PSNR in dB with the peak taken from the reference image; +inf when identical."""
    ref, test = _check_pair(ref, test)
    mse = np.mean((ref - test) ** 2)
    if mse == 0:
        return float("inf")
    with np.errstate(divide="ignore"):
        return float(20.0 * np.log10(ref.max()) - 10.0 * np.log10(mse))


# Valid-mode separable Gaussian filtering and its adjoint.

def _filter_valid(x, g):
    """Separable correlation with ``g`` over the last two axes, valid positions only."""
    k = len(g)
    r = k // 2
    lead, (h, w) = x.shape[:-2], x.shape[-2:]
    if h < k or w < k:
        raise SizeError(f"{h}x{w} smaller than the {k}px window")
    kern = np.ascontiguousarray(g, dtype=np.float64)
    planes = x.reshape(-1, h, w)
    out = np.empty((planes.shape[0], h - k + 1, w - k + 1))
    for i, plane in enumerate(planes):
        f = cv2.sepFilter2D(np.ascontiguousarray(plane), cv2.CV_64F, kern, kern, borderType=cv2.BORDER_CONSTANT)
        out[i] = f[r:h - r, r:w - r]
    return out.reshape(*lead, h - k + 1, w - k + 1)


def _filter_valid_adjoint(y, g):
    # adjoint of valid correlation: full correlation with the reversed kernel
    k = len(g)
    pad = [(0, 0)] * (y.ndim - 2) + [(k - 1, k - 1), (k - 1, k - 1)]
    return _filter_valid(np.pad(y, pad), g[::-1])


def _local_stats(x, y, g):
    mu_x = _filter_valid(x, g)
    mu_y = _filter_valid(y, g)
    s_xx = _filter_valid(x * x, g) - mu_x * mu_x
    s_yy = _filter_valid(y * y, g) - mu_y * mu_y
    s_xy = _filter_valid(x * y, g) - mu_x * mu_y
    return mu_x, mu_y, s_xx, s_yy, s_xy


def _check_window(shape, params):
    if shape[-1] < params.window_size or shape[-2] < params.window_size:
        raise SizeError(
            f"image {shape[-2]}x{shape[-1]} smaller than the {params.window_size}px SSIM window"
        )


def _ssim_terms(x, y, params, luminance=True, grad=False):
    """Mean SSIM (or mean contrast-structure with ``luminance=False``) and d/dy."""
    g = params.window_1d
    c1, c2 = params.c1, params.c2
    mu_x, mu_y, s_xx, s_yy, s_xy = _local_stats(x, y, g)
    a2 = 2.0 * s_xy + c2
    b2 = s_xx + s_yy + c2
    if luminance:
        a1 = 2.0 * mu_x * mu_y + c1
        b1 = mu_x * mu_x + mu_y * mu_y + c1
        smap = (a1 * a2) / (b1 * b2)
    else:
        smap = a2 / b2
    value = float(smap.mean())
    if not grad:
        return value, None
    n = smap.size
    if luminance:
        d_mu = (2.0 * mu_x * (a2 - a1) / (b1 * b2) - 2.0 * mu_y * smap / b1 + 2.0 * mu_y * smap / b2) / n
        d_exy = 2.0 * a1 / (b1 * b2) / n
    else:
        d_mu = (-2.0 * mu_x + 2.0 * mu_y * smap) / b2 / n
        d_exy = 2.0 / b2 / n
    d_eyy = -smap / b2 / n
    gy = (
        _filter_valid_adjoint(d_mu, g)
        + 2.0 * y * _filter_valid_adjoint(d_eyy, g)
        + x * _filter_valid_adjoint(d_exy, g)
    )
    return value, gy


def ssim(ref, test, params=None):
    params = params or SsimParams()
    ref, test = _check_pair(ref, test)
    _check_window(ref.shape, params)
    return _ssim_terms(ref, test, params)[0]


def ssim_loss(ref, test, params=None):
    return -ssim(ref, test, params)


def ssim_grad(ref, test, params=None):
    """Analytic d ssim(ref, test) / d test, same shape as ``test``."""
    params = params or SsimParams()
    ref, test = _check_pair(ref, test)
    _check_window(ref.shape, params)
    return _ssim_terms(ref, test, params, grad=True)[1]


def _pool2(x):
    h, w = x.shape[-2] // 2 * 2, x.shape[-1] // 2 * 2
    x = x[..., :h, :w]
    return 0.25 * (x[..., 0::2, 0::2] + x[..., 1::2, 0::2] + x[..., 0::2, 1::2] + x[..., 1::2, 1::2])


def _pool2_adjoint(g, shape):
    up = 0.25 * np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1)
    out = np.zeros(shape)
    out[..., : up.shape[-2], : up.shape[-1]] = up
    return out


def _ms_ssim(ref, test, params, grad):
    ref, test = _check_pair(ref, test)
    base = params.base
    if min(ref.shape[-2:]) // 2 ** (params.scales - 1) < base.window_size:
        raise SizeError(
            f"image {ref.shape[-2]}x{ref.shape[-1]} too small for {params.scales}-scale MS-SSIM "
            f"(needs {params.min_size()}px)"
        )
    weights = params.normalized_weights
    x, y = ref, test
    values, grads, shapes = [], [], []
    for j in range(params.scales):
        last = j == params.scales - 1
        v, gy = _ssim_terms(x, y, base, luminance=last, grad=grad)
        values.append(v)
        grads.append(gy)
        shapes.append(y.shape)
        if not last:
            x, y = _pool2(x), _pool2(y)
    values = np.asarray(values)
    if np.any(values <= 0):
        # negative contrast-structure at some scale: clamp the product to 0
        return 0.0, (np.zeros_like(test) if grad else None)
    ms = float(np.prod(values**weights))
    if not grad:
        return ms, None
    # chain back from the coarsest scale through each pooling step
    total = None
    for j in reversed(range(params.scales)):
        term = ms * weights[j] / values[j] * grads[j]
        total = term if total is None else term + total
        if j > 0:
            total = _pool2_adjoint(total, shapes[j - 1])
    return ms, total


def ms_ssim(ref, test, params=None):
    return _ms_ssim(ref, test, params or MsSsimParams(), grad=False)[0]


def ms_ssim_loss(ref, test, params=None):
    return -ms_ssim(ref, test, params)


def ms_ssim_grad(ref, test, params=None):
    return _ms_ssim(ref, test, params or MsSsimParams(), grad=True)[1]


_PHASE = np.exp(-1j * np.radians([30.0, -6.0, 63.0]))


def _pow7(x):
    x2 = x * x
    return x2 * x2 * x2 * x


def _hue_degrees(b, a):
    h = np.degrees(np.arctan2(b, a))
    return np.where(h < 0.0, h + 360.0, h)


def ciede2000(lab1, lab2):
    """Per-pixel CIEDE2000 colour difference (kL = kC = kH = 1).

    Accepts Lab arrays whose leading axis holds (L, a, b). Returns ``(map, mean)``.
    """
    lab1, lab2 = _check_pair(lab1, lab2)
    if lab1.shape[0] != 3:
        raise ShapeError(f"Lab input needs 3 components on the first axis, got {lab1.shape}")
    L1, a1, b1 = lab1
    L2, a2, b2 = lab2

    c_bar = 0.5 * (np.hypot(a1, b1) + np.hypot(a2, b2))
    c7 = _pow7(c_bar)
    g = 0.5 * (1.0 - np.sqrt(c7 / (c7 + 25.0**7)))
    a1p = (1.0 + g) * a1
    a2p = (1.0 + g) * a2
    c1p = np.hypot(a1p, b1)
    c2p = np.hypot(a2p, b2)
    h1p = _hue_degrees(b1, a1p)
    h2p = _hue_degrees(b2, a2p)

    dLp = L2 - L1
    dCp = c2p - c1p
    chroma_prod = c1p * c2p
    dh = h2p - h1p
    dh = np.where(dh > 180.0, dh - 360.0, np.where(dh < -180.0, dh + 360.0, dh))
    dh = np.where(chroma_prod == 0, 0.0, dh)
    dHp = 2.0 * np.sqrt(chroma_prod) * np.sin(np.radians(dh / 2.0))

    L_bar = 0.5 * (L1 + L2)
    cp_bar = 0.5 * (c1p + c2p)
    hsum = h1p + h2p
    h_bar = np.where(
        np.abs(h1p - h2p) <= 180.0,
        hsum / 2.0,
        np.where(hsum < 360.0, (hsum + 360.0) / 2.0, (hsum - 360.0) / 2.0),
    )
    h_bar = np.where(chroma_prod == 0, hsum, h_bar)

    # cos(n h + phi) = Re(z^n e^{i phi}) with z = e^{i h}: one complex exponential for all four terms
    z = np.exp(1j * np.radians(h_bar))
    z2 = z * z
    t = (
        1.0
        - 0.17 * (z * _PHASE[0]).real
        + 0.24 * z2.real
        + 0.32 * (z2 * z * _PHASE[1]).real
        - 0.20 * (z2 * z2 * _PHASE[2]).real
    )
    d_theta = 30.0 * np.exp(-(((h_bar - 275.0) / 25.0) ** 2))
    cp7 = _pow7(cp_bar)
    r_c = 2.0 * np.sqrt(cp7 / (cp7 + 25.0**7))
    lsq = (L_bar - 50.0) ** 2
    s_l = 1.0 + 0.015 * lsq / np.sqrt(20.0 + lsq)
    s_c = 1.0 + 0.045 * cp_bar
    s_h = 1.0 + 0.015 * cp_bar * t
    r_t = -np.sin(np.radians(2.0 * d_theta)) * r_c

    tl, tc, th = dLp / s_l, dCp / s_c, dHp / s_h
    de = np.sqrt(np.maximum(tl**2 + tc**2 + th**2 + r_t * tc * th, 0.0))
    return de, float(de.mean())


def aggregate(values, name):
    """Mean and population standard deviation of per-image metric values."""
    vals = [float(v) for v in values]
    if not vals:
        raise ArgumentError(f"{name}: cannot aggregate an empty list")
    arr = np.asarray(vals)
    if not np.all(np.isfinite(arr)):
        raise ArgumentError(f"{name}: non-finite metric values")
    return MetricResult(name=name, per_image=vals, mean=float(arr.mean()), std=float(arr.std()))
