"""Image I/O, sRGB -> CIELAB conversion and the resize + zero-pad preprocessing.

Images are numpy float64 arrays laid out channel-major, ``(channels, height, width)``,
with values in [0, 1]. Single-channel images keep a leading axis of length 1.
"""

from pathlib import Path

import cv2
import numpy as np

from desmoke.errors import ArgumentError, FormatError, ShapeError

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"

# sRGB (D65) -> XYZ, IEC 61966-2-1
SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
D65_WHITE = SRGB_TO_XYZ.sum(axis=1)

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def as_image(data, clamp=False):
    """Validate ``data`` as an Image and return it as a float64 (C, H, W) array.

    2-D input is promoted to a single channel. With ``clamp`` the values are
    clipped into [0, 1] instead of rejected.
    """
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ShapeError(f"expected (1|3, H, W) image, got shape {arr.shape}")
    if arr.shape[1] < 1 or arr.shape[2] < 1:
        raise ShapeError(f"empty image {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ArgumentError("image contains non-finite values")
    if clamp:
        return np.clip(arr, 0.0, 1.0)
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ArgumentError("image values outside [0, 1]")
    return arr


def _sniff(path):
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head.startswith(PNG_MAGIC):
        return "png"
    if head[:2] == b"P6":
        return "ppm"
    raise FormatError(f"{path}: unsupported format (PNG or binary PPM expected)")


def load_image(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: no such file")
    _sniff(path)
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise OSError(f"{path}: unreadable image")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise FormatError(f"{path}: unsupported sample type {raw.dtype}")
    if raw.ndim == 2:
        planes = raw[None]
    else:
        # cv2 stores BGR(A); drop alpha and reorder to RGB
        planes = raw[:, :, [2, 1, 0]].transpose(2, 0, 1)
    return np.ascontiguousarray(planes, dtype=np.float64) / scale


def quantize(img):
    """Round-half-up quantization of a [0, 1] image to bytes."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_image(img, path):
    img = as_image(img)
    path = Path(path)
    data = quantize(img)
    if path.suffix.lower() == ".ppm":
        if data.shape[0] == 1:
            data = np.repeat(data, 3, axis=0)
        header = f"P6\n{data.shape[2]} {data.shape[1]}\n255\n".encode("ascii")
        try:
            with open(path, "wb") as fh:
                fh.write(header)
                fh.write(data.transpose(1, 2, 0).tobytes())
        except OSError as exc:
            raise OSError(f"{path}: cannot write ({exc.strerror})") from exc
        return
    if data.shape[0] == 1:
        hwc = data[0]
    else:
        hwc = np.ascontiguousarray(data[[2, 1, 0]].transpose(1, 2, 0))
    try:
        ok = cv2.imwrite(str(path), hwc)
    except cv2.error as exc:
        raise OSError(f"{path}: cannot write ({exc})") from exc
    if not ok:
        raise OSError(f"{path}: cannot write")


def srgb_to_linear(v):
    v = np.asarray(v, dtype=np.float64)
    return np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)


def rgb_to_lab(img):
    """sRGB image (3, H, W) -> CIELAB array (3, H, W) holding L, a, b."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"rgb_to_lab needs a 3-channel image, got shape {img.shape}")
    lin = srgb_to_linear(img)
    xyz = np.tensordot(SRGB_TO_XYZ, lin, axes=1) / D65_WHITE[:, None, None]
    eps = (6.0 / 29.0) ** 3
    f = np.where(xyz > eps, np.cbrt(xyz), xyz / (3 * (6.0 / 29.0) ** 2) + 4.0 / 29.0)
    L = 116.0 * f[1] - 16.0
    a = 500.0 * (f[0] - f[1])
    b = 200.0 * (f[1] - f[2])
    return np.stack([np.clip(L, 0.0, 100.0), a, b])


def luminance(img):
    img = np.asarray(img, dtype=np.float64)
    if img.shape[0] == 1:
        return img[0]
    return np.tensordot(LUMA_WEIGHTS, img, axes=1)


def _bilinear_matrix(n_in, n_out):
    """Row-stochastic (n_out, n_in) interpolation matrix, half-pixel centers."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize(img, width, height):
    img = np.asarray(img, dtype=np.float64)
    c, h, w = img.shape
    if (h, w) == (height, width):
        return img.copy()
    ry = _bilinear_matrix(h, height)
    rx = _bilinear_matrix(w, width)
    out = ry @ img @ rx.T
    return np.clip(out, 0.0, 1.0)


def content_box(width, height, target_w, target_h):
    """Where resize_and_pad places a ``width`` x ``height`` image: (top, left, h, w)."""
    if min(width, height, target_w, target_h) < 1:
        raise ArgumentError("dimensions must be positive")
    scale = min(target_w / width, target_h / height)
    new_w = min(target_w, max(1, int(round(width * scale))))
    new_h = min(target_h, max(1, int(round(height * scale))))
    top = (target_h - new_h) // 2
    left = (target_w - new_w) // 2
    return top, left, new_h, new_w


def resize_and_pad(img, target_w, target_h):
    """Aspect-preserving bilinear resize so the larger side fits, then zero-pad to target."""
    img = np.asarray(img, dtype=np.float64)
    c, h, w = img.shape
    top, left, new_h, new_w = content_box(w, h, target_w, target_h)
    out = np.zeros((c, target_h, target_w))
    out[:, top:top + new_h, left:left + new_w] = resize(img, new_w, new_h)
    return out


def crop_box(img, box):
    top, left, h, w = box
    return img[:, top:top + h, left:left + w]
