"""Fourier analysis of periodic grid artifacts and circular notch filtering.

Frequencies are reported as signed integer offsets ``(u, v)`` from DC, ``u``
horizontal and ``v`` vertical, matching the DC-centered (fftshift) layout.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from desmoke.errors import ShapeError, SizeError
from desmoke.imgio import luminance

# Calibrated on procedural tissue scenes, clean and smoky (scripts/calibrate_peaks.py):
# the largest off-disk prominence there is ~6 at 64px and ~9 at 256px.
DEFAULT_PROMINENCE = 15.0
BACKGROUND_SIZE = 9
MIN_SCORE_SIZE = 32


@dataclass
class Spectrum:
    magnitude: np.ndarray  # (H, W), DC at (H // 2, W // 2)

    @property
    def height(self):
        return self.magnitude.shape[0]

    @property
    def width(self):
        return self.magnitude.shape[1]

    @property
    def log_magnitude(self):
        return np.log1p(self.magnitude)

    @property
    def protect_radius(self):
        return min(self.width, self.height) / 16.0

    def frequency_grid(self):
        v, u = np.mgrid[0:self.height, 0:self.width]
        return u - self.width // 2, v - self.height // 2

    def off_disk(self):
        u, v = self.frequency_grid()
        return np.hypot(u, v) > self.protect_radius


@dataclass
class NotchMask:
    passband: np.ndarray  # (H, W) of {0, 1}, DC-centered

    @classmethod
    def all_pass(cls, width, height):
        return cls(np.ones((height, width)))

    @classmethod
    def circular(cls, width, height, centers, radius=1.5):
        """Suppress disks of ``radius`` bins around each (u, v) and its mirror."""
        v, u = np.mgrid[0:height, 0:width]
        u = u - width // 2
        v = v - height // 2
        keep = np.ones((height, width))
        for cu, cv in centers:
            for su, sv in ((cu, cv), (-cu, -cv)):
                # distances on the periodic frequency torus
                du = (u - su + width // 2) % width - width // 2
                dv = (v - sv + height // 2) % height - height // 2
                keep[np.hypot(du, dv) <= radius] = 0.0
        keep[np.hypot(u, v) <= min(width, height) / 16.0] = 1.0
        return cls(keep)

    @classmethod
    def from_peaks(cls, spectrum, peaks, radius=1.5):
        return cls.circular(spectrum.width, spectrum.height, [(u, v) for u, v, _ in peaks], radius)


def fft_magnitude(img):
    """DC-centered DFT magnitude of the zero-mean luminance."""
    lum = luminance(np.asarray(img, dtype=np.float64))
    lum = lum - lum.mean()
    return Spectrum(np.fft.fftshift(np.abs(np.fft.fft2(lum))))


def background(spec):
    """Local median magnitude around every bin.

    Natural images fall off roughly as 1/f, so a single global median would flag
    ordinary low-frequency content; a periodic peak stands out from its own
    neighbourhood instead.
    """
    return ndimage.median_filter(spec.magnitude, size=BACKGROUND_SIZE, mode="wrap")


def prominence(spec):
    mag = spec.magnitude
    return mag / (background(spec) + 1e-9 * mag.max() + 1e-300)


def _local_median_at(mag, rows, cols):
    """Wrap-mode BACKGROUND_SIZE median at the given bins only (same values as ``background``)."""
    r = BACKGROUND_SIZE // 2
    padded = np.pad(mag, r, mode="wrap")
    win = sliding_window_view(padded, (BACKGROUND_SIZE, BACKGROUND_SIZE))[rows, cols]
    return np.median(win.reshape(len(rows), BACKGROUND_SIZE * BACKGROUND_SIZE), axis=1)


def _drop_certain_rejects(mag, rows, cols, min_prominence):
    """Discard bins whose local median provably reaches mag / min_prominence.

    Each half of the window (5 of its 9 rows or columns) holds 45 of the 81
    values; if all of them reach the threshold so does the median.
    """
    r = BACKGROUND_SIZE // 2
    half = r + 1
    thr = mag[rows, cols] / min_prominence
    for axis, size in ((0, (half, BACKGROUND_SIZE)), (1, (BACKGROUND_SIZE, half))):
        m = ndimage.minimum_filter(mag, size=size, mode="wrap")
        # m is centered on a 5-wide band; rolling by 2 aligns it with one half of the window
        for shift in (r // 2, -(r // 2)):
            sub = np.roll(m, shift, axis=axis)[rows, cols]
            keep = sub < thr
            rows, cols, thr = rows[keep], cols[keep], thr[keep]
    return rows, cols


def _peak_mask(spec, min_prominence):
    mag = spec.magnitude
    local_max = mag >= ndimage.maximum_filter(mag, size=3, mode="wrap")
    rows, cols = np.nonzero(spec.off_disk() & local_max & (mag > 0))
    rows, cols = _drop_certain_rejects(mag, rows, cols, min_prominence)
    # the median filter is only evaluated where a peak is possible
    bg = _local_median_at(mag, rows, cols)
    keep = mag[rows, cols] / (bg + 1e-9 * mag.max() + 1e-300) > min_prominence
    mask = np.zeros(mag.shape, dtype=bool)
    mask[rows[keep], cols[keep]] = True
    return mask


def detect_periodic_peaks(spec, min_prominence=DEFAULT_PROMINENCE):
    """Isolated spectral maxima outside the protected low-frequency disk.

    A bin is a peak when it is a 3x3 local maximum whose magnitude exceeds
    ``min_prominence`` times the local median background.

    Returns ``(u, v, magnitude)`` tuples by descending magnitude. Each peak's
    mirror frequency is always included, so the result comes in symmetric pairs
    (a Nyquist bin is its own mirror).
    """
    mask = _peak_mask(spec, min_prominence)
    h, w = mask.shape
    rows, cols = np.nonzero(mask)
    found = set()
    for r, c in zip(rows, cols):
        found.add((r, c))
        # mirror of bin k is -k modulo the size, in shifted coordinates
        found.add(((-(r - h // 2) + h // 2) % h, (-(c - w // 2) + w // 2) % w))
    peaks = [(int(c - w // 2), int(r - h // 2), float(spec.magnitude[r, c])) for r, c in found]
    peaks.sort(key=lambda p: (-p[2], p[1], p[0]))
    return peaks


def grid_artifact_score(img, min_prominence=DEFAULT_PROMINENCE):
    """Share of off-disk spectral energy held by detected periodic peaks (each dilated by 1 bin)."""
    img = np.asarray(img, dtype=np.float64)
    if min(img.shape[-2:]) < MIN_SCORE_SIZE:
        raise SizeError(f"grid score needs images of at least {MIN_SCORE_SIZE}px, got {img.shape[-2:]}")
    spec = fft_magnitude(img)
    off = spec.off_disk()
    energy = spec.magnitude**2
    total = energy[off].sum()
    if total <= 0:
        return 0.0
    peaks = detect_periodic_peaks(spec, min_prominence)
    if not peaks:
        return 0.0
    mask = np.zeros_like(off)
    for u, v, _ in peaks:
        mask[v + spec.height // 2, u + spec.width // 2] = True
    mask = ndimage.binary_dilation(mask, structure=np.ones((3, 3), dtype=bool), border_value=0)
    return float(energy[mask & off].sum() / total)


def notch_filter(img, mask):
    img = np.asarray(img, dtype=np.float64)
    keep = np.asarray(mask.passband if isinstance(mask, NotchMask) else mask, dtype=np.float64)
    if keep.shape != img.shape[-2:]:
        raise ShapeError(f"mask {keep.shape} does not match image {img.shape[-2:]}")
    keep = np.fft.ifftshift(keep)
    out = np.real(np.fft.ifft2(np.fft.fft2(img, axes=(-2, -1)) * keep, axes=(-2, -1)))
    return np.clip(out, 0.0, 1.0)


def spectrum_image(spec):
    """Log-magnitude rescaled to [0, 1] as a single-channel image, for saving."""
    logm = spec.log_magnitude
    hi = logm.max()
    return (logm / hi if hi > 0 else logm)[None]
