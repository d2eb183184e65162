"""Synthetic smoke: fractal Perlin transmission maps composited with the scattering model.

The degradation is ``I = J * t + A * (1 - t)`` with clean scene ``J``, transmission
``t`` and airlight ``A``. Heavier smoke densities lower the floor of ``t``.
"""

import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from desmoke.errors import ArgumentError, DegenerateError, ShapeError
from desmoke.imgio import as_image, load_image, save_image

DENSITY_FLOOR = {"light": 0.75, "medium": 0.5, "heavy": 0.25}
DENSITIES = tuple(DENSITY_FLOOR)
INVERT_T_FLOOR = 0.05
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SmokeParams:
    density: str = "medium"
    atmospheric_light: tuple = (0.9, 0.9, 0.9)
    perlin_octaves: int = 4
    base_frequency: float = 4.0
    persistence: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.density not in DENSITY_FLOOR:
            raise ArgumentError(f"unknown density {self.density!r}; expected one of {DENSITIES}")
        if self.perlin_octaves < 1:
            raise ArgumentError("perlin_octaves must be >= 1")
        if not all(0.7 <= a <= 1.0 for a in self.atmospheric_light):
            raise ArgumentError("atmospheric light must lie in [0.7, 1.0] per channel")


def _fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def _gradient_noise(height, width, cells_y, cells_x, rng):
    """One octave of 2-D Perlin noise over a (cells_y x cells_x) lattice, roughly in [-0.7, 0.7]."""
    angles = rng.uniform(0.0, 2.0 * np.pi, size=(cells_y + 1, cells_x + 1))
    gx, gy = np.cos(angles), np.sin(angles)

    ys = (np.arange(height) + 0.5) * cells_y / height
    xs = (np.arange(width) + 0.5) * cells_x / width
    y0 = np.minimum(np.floor(ys).astype(int), cells_y - 1)
    x0 = np.minimum(np.floor(xs).astype(int), cells_x - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    Y0, X0 = y0[:, None], x0[None, :]

    def corner(dy, dx):
        return gx[Y0 + dy, X0 + dx] * (fx - dx) + gy[Y0 + dy, X0 + dx] * (fy - dy)

    u, v = _fade(fx), _fade(fy)
    top = corner(0, 0) + u * (corner(0, 1) - corner(0, 0))
    bottom = corner(1, 0) + u * (corner(1, 1) - corner(1, 0))
    return top + v * (bottom - top)


def perlin_noise(width, height, params):
    """Octave-summed gradient noise rescaled to [0, 1]; deterministic in ``params.seed``."""
    if width < 1 or height < 1:
        raise ArgumentError("noise dimensions must be positive")
    rng = np.random.default_rng(params.seed)
    total = np.zeros((height, width))
    amp = 1.0
    for octave in range(params.perlin_octaves):
        cells = max(1, int(round(params.base_frequency * 2**octave)))
        total += amp * _gradient_noise(height, width, cells, cells, rng)
        amp *= params.persistence
    lo, hi = total.min(), total.max()
    if hi - lo < 1e-12:
        return np.full((height, width), 0.5)
    return (total - lo) / (hi - lo)


def noise_to_transmission(noise, density):
    if density not in DENSITY_FLOOR:
        raise ArgumentError(f"unknown density {density!r}")
    floor = DENSITY_FLOOR[density]
    return floor + (1.0 - floor) * np.clip(np.asarray(noise, dtype=np.float64), 0.0, 1.0)


def _airlight(A, channels):
    A = np.broadcast_to(np.asarray(A, dtype=np.float64).reshape(-1), (channels,))
    return A[:, None, None]


def composite_smoke(clean, t, A):
    clean = as_image(clean)
    t = np.asarray(t, dtype=np.float64)
    if t.shape != clean.shape[1:]:
        raise ShapeError(f"transmission {t.shape} does not match image {clean.shape[1:]}")
    A = _airlight(A, clean.shape[0])
    return np.clip(clean * t + A * (1.0 - t), 0.0, 1.0)


def invert_scattering(smoky, t, A, t_floor=INVERT_T_FLOOR):
    smoky = np.asarray(smoky, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if t.shape != smoky.shape[1:]:
        raise ShapeError(f"transmission {t.shape} does not match image {smoky.shape[1:]}")
    if t.min() < t_floor:
        raise DegenerateError(f"transmission {t.min():.4g} below floor {t_floor}")
    A = _airlight(A, smoky.shape[0])
    # (I - A(1 - t))/t written so that t == 1 returns I exactly
    return np.clip(smoky + (smoky - A) * ((1.0 - t) / t), 0.0, 1.0)


def entry_rng(seed, index):
    """Independent generator for image ``index`` so serial and parallel builds agree."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def draw_airlight(rng):
    # grayish-white: one gray level in [0.7, 1] with a small per-channel tint
    gray = rng.uniform(0.7, 1.0)
    # rounded so the manifest records exactly the values used
    return tuple(round(float(v), 10) for v in np.clip(gray + rng.uniform(-0.03, 0.03, size=3), 0.7, 1.0))


@dataclass
class ManifestEntry:
    clean: str
    smoke: str
    density: str
    seed: int
    A: tuple
    split: str = "train"


@dataclass
class DatasetManifest:
    root: Path
    entries: list = field(default_factory=list)

    def split(self, name):
        """The entries of one split, as a manifest sharing this root."""
        return DatasetManifest(self.root, [e for e in self.entries if e.split == name])

    def resolve(self, rel):
        return (Path(self.root) / rel).resolve()

    def pairs(self):
        for e in self.entries:
            yield self.resolve(e.clean), self.resolve(e.smoke), e

    def __len__(self):
        return len(self.entries)

    def write(self, path=None):
        path = Path(path or Path(self.root) / "manifest.jsonl")
        smoke_paths = [e.smoke for e in self.entries]
        if len(set(smoke_paths)) != len(smoke_paths):
            raise ArgumentError("duplicate smoke paths in manifest")
        with open(path, "w") as fh:
            for e in self.entries:
                rec = asdict(e)
                rec["A"] = list(e.A)
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path):
        path = Path(path)
        entries = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    rec["A"] = tuple(rec["A"])
                    entries.append(ManifestEntry(**rec))
                except (json.JSONDecodeError, TypeError, KeyError) as exc:
                    raise ArgumentError(f"{path}:{lineno}: bad manifest record ({exc})") from exc
        return cls(root=path.parent, entries=entries)


IMAGE_SUFFIXES = (".png", ".ppm")


def list_images(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise ArgumentError(f"{directory}: not a directory")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def assign_splits(n_images, seed, val_fraction=0.1, test_fraction=0.1):
    """Seeded per-scene split; all densities of one clean image share its split."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B117]))
    order = rng.permutation(n_images)
    n_test = int(round(n_images * test_fraction))
    n_val = int(round(n_images * val_fraction))
    splits = np.array(["train"] * n_images, dtype=object)
    splits[order[:n_test]] = "test"
    splits[order[n_test:n_test + n_val]] = "val"
    return list(splits)


def build_dataset(clean_dir, out_dir, seed, params=None, val_fraction=0.1, test_fraction=0.1):
    """Emit one smoky image per density for every clean image and write the manifest.

    ``params`` optionally maps density name -> SmokeParams template; the seed and
    airlight of each template are replaced per image.
    """
    clean_paths = list_images(clean_dir)
    if not clean_paths:
        raise ArgumentError(f"{clean_dir}: no PNG/PPM images found")
    out_dir = Path(out_dir)
    smoke_dir = out_dir / "smoke"
    smoke_dir.mkdir(parents=True, exist_ok=True)
    params = params or {}
    splits = assign_splits(len(clean_paths), seed, val_fraction, test_fraction)

    entries = []
    for index, clean_path in enumerate(clean_paths):
        clean = load_image(clean_path)
        rng = entry_rng(seed, index)
        A = draw_airlight(rng)
        for density in DENSITIES:
            noise_seed = int(rng.integers(0, 2**63))
            template = params.get(density, SmokeParams(density=density))
            p = replace(template, density=density, seed=noise_seed, atmospheric_light=A)
            noise = perlin_noise(clean.shape[2], clean.shape[1], p)
            t = noise_to_transmission(noise, density)
            smoky = composite_smoke(clean, t, A[: clean.shape[0]] if clean.shape[0] == 3 else A[0])
            smoke_path = smoke_dir / f"{clean_path.stem}_{density}.png"
            save_image(smoky, smoke_path)
            entries.append(
                ManifestEntry(
                    clean=os.path.relpath(clean_path.resolve(), out_dir.resolve()),
                    smoke=os.path.relpath(smoke_path.resolve(), out_dir.resolve()),
                    density=density,
                    seed=noise_seed,
                    A=A,
                    split=splits[index],
                )
            )
    manifest = DatasetManifest(root=out_dir, entries=entries)
    manifest.write()
    return manifest


def tissue_scene(size, rng):
    """A procedural laparoscopy-like clean frame: reddish tissue, folds and vessels.

    Every pixel keeps a near-zero blue or green channel, as in real tissue, so
    the dark channel of a smoke-free frame is close to 0.
    """
    h = w = size
    p = SmokeParams(seed=int(rng.integers(0, 2**63)), perlin_octaves=5, base_frequency=2.0)
    folds = perlin_noise(w, h, p)
    fine = perlin_noise(w, h, replace(p, seed=int(rng.integers(0, 2**63)), base_frequency=8.0, perlin_octaves=3))
    shade = 0.35 + 0.65 * folds
    base = np.array([rng.uniform(0.75, 0.95), rng.uniform(0.25, 0.45), rng.uniform(0.2, 0.35)])
    img = base[:, None, None] * shade[None] * (0.85 + 0.3 * fine[None])

    yy, xx = np.mgrid[0:h, 0:w] / size
    for _ in range(int(rng.integers(2, 5))):
        # sinuous vessel
        phase, freq = rng.uniform(0, 2 * np.pi), rng.uniform(1.0, 3.0)
        center, amp = rng.uniform(0.1, 0.9), rng.uniform(0.05, 0.2)
        width = rng.uniform(0.01, 0.03)
        if rng.random() < 0.5:
            d = np.abs(yy - (center + amp * np.sin(2 * np.pi * freq * xx + phase)))
        else:
            d = np.abs(xx - (center + amp * np.sin(2 * np.pi * freq * yy + phase)))
        vessel = np.exp(-((d / width) ** 2))
        img = img * (1.0 - 0.6 * vessel[None]) + vessel[None] * np.array([0.45, 0.05, 0.08])[:, None, None] * 0.6
    # darken the lower channels so the scene has a zero-ish dark channel
    img[1:] *= 0.6 + 0.4 * folds[None]
    return np.clip(img, 0.0, 1.0)


def write_scenes(out_dir, count, size, seed):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        path = out_dir / f"scene_{i:04d}.png"
        save_image(tissue_scene(size, entry_rng(seed, i)), path)
        paths.append(path)
    return paths
