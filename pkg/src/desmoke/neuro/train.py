"""Alternating D/G training, checkpoints and inference."""

import csv
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from desmoke import quality, spectral
from desmoke.errors import ArgumentError, DivergenceError, FormatError, ShapeError
from desmoke.imgio import as_image, content_box, crop_box, load_image, resize, resize_and_pad
from desmoke.neuro.losses import LossWeights, composite_generator_loss, gan_logit_grads, gan_losses
from desmoke.neuro.nets import Discriminator, Generator, NetworkSpec
from desmoke.neuro.optim import Adam

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DSMKCKPT"
CHECKPOINT_VERSION = 1
LOG_COLUMNS = (
    "epoch", "loss_D", "loss_G_adv", "loss_perc", "loss_ssim", "loss_l1",
    "val_ssim", "val_grid_score", "seconds",
)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 4
    epochs: int = 20
    image_size: int = 64
    seed: int = 0
    max_val: int = 16

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1 or self.image_size < 1:
            raise ArgumentError("learning_rate, batch_size, epochs and image_size must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ArgumentError("betas must lie in (0, 1)")


@dataclass
class Checkpoint:
    spec: NetworkSpec
    generator: Generator
    discriminator: Discriminator
    config: TrainConfig
    weights: LossWeights
    step: int = 0
    epoch: int = 0


# --- checkpoint container ---------------------------------------------------
# magic | u32 version | u32 header length | JSON header | little-endian float32 blob


def save_checkpoint(ckpt, path):
    arrays = {}
    for prefix, net in (("G", ckpt.generator), ("D", ckpt.discriminator)):
        for name, arr in net.state().items():
            arrays[f"{prefix}.{name}"] = arr
    index, offset = [], 0
    for name in sorted(arrays):
        arr = arrays[name]
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = {
        "format": "desmoke-checkpoint",
        "version": CHECKPOINT_VERSION,
        "spec": ckpt.spec.to_dict(),
        "config": asdict(ckpt.config),
        "weights": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(ckpt.weights).items()},
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "arrays": index,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = np.concatenate([arrays[e["name"]].ravel() for e in index]).astype("<f4")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(head)))
        fh.write(head)
        fh.write(blob.tobytes())
    return path


def load_checkpoint(path):
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise FormatError(f"{path}: not a desmoke checkpoint")
    version, hlen = struct.unpack_from("<II", raw, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    start = len(CHECKPOINT_MAGIC) + 8
    header = json.loads(raw[start:start + hlen].decode("utf-8"))
    blob = np.frombuffer(raw, dtype="<f4", offset=start + hlen).astype(np.float64)
    arrays = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays[e["name"]] = blob[e["offset"]:e["offset"] + n].reshape(e["shape"])
    spec = NetworkSpec.from_dict(header["spec"])
    gen, disc = Generator(spec), Discriminator(spec)
    gen.load_state({k[2:]: v for k, v in arrays.items() if k.startswith("G.")})
    disc.load_state({k[2:]: v for k, v in arrays.items() if k.startswith("D.")})
    w = header["weights"]
    w["lambda_perc"] = tuple(w["lambda_perc"])
    return Checkpoint(
        spec=spec,
        generator=gen,
        discriminator=disc,
        config=TrainConfig(**header["config"]),
        weights=LossWeights(**w),
        step=header["step"],
        epoch=header["epoch"],
    )


# --- data -------------------------------------------------------------------


def load_pairs(manifest, size):
    """(smoky, clean) float arrays (N, C, size, size) for every manifest entry."""
    smoky, clean = [], []
    for clean_path, smoke_path, _ in manifest.pairs():
        try:
            c, s = load_image(clean_path), load_image(smoke_path)
        except FileNotFoundError as exc:
            raise FileNotFoundError(f"pair ({clean_path}, {smoke_path}): {exc}") from exc
        clean.append(resize_and_pad(c, size, size))
        smoky.append(resize_and_pad(s, size, size))
    return np.stack(smoky), np.stack(clean)


def training_splits(manifest):
    train = manifest.split("train")
    if len(train) == 0:
        train = manifest
    val = manifest.split("val")
    return train, val


# --- training ---------------------------------------------------------------


def build_networks(spec, seed):
    root = np.random.SeedSequence([seed, 0x6E6E])
    g_seq, d_seq = root.spawn(2)
    return Generator(spec, np.random.default_rng(g_seq)), Discriminator(spec, np.random.default_rng(d_seq))


def _check_finite(value, name, epoch, batch):
    if not math.isfinite(value):
        raise DivergenceError(f"{name} became {value} at epoch {epoch}, batch {batch}")


def train_step(gen, disc, opt_g, opt_d, smoky, clean, weights):
    """One D update followed by one G update; returns the loss components."""
    fake = gen.forward(smoky, train=True)
    loss_d = 0.0
    if weights.uses_discriminator:
        disc.zero_grad()
        p_real, _, _ = disc.forward(np.concatenate([smoky, clean], axis=1))
        g_real, _, _ = gan_logit_grads(p_real, p_real)
        disc.backward(g_real)
        p_fake, _, _ = disc.forward(np.concatenate([smoky, fake], axis=1))
        _, g_fake, _ = gan_logit_grads(p_fake, p_fake)
        disc.backward(g_fake)
        loss_d = gan_losses(p_real, p_fake)[0]
        opt_d.step()

    p_fake = taps_real = taps_fake = None
    if weights.uses_discriminator:
        _, _, taps_real = disc.forward(np.concatenate([smoky, clean], axis=1))
        p_fake, _, taps_fake = disc.forward(np.concatenate([smoky, fake], axis=1))
    loss = composite_generator_loss(clean, fake, weights, p_fake, taps_real, taps_fake)
    d_out = loss.d_output
    if weights.uses_discriminator:
        d_pair = disc.backward(loss.d_logits, loss.d_taps)
        d_out = d_out + d_pair[:, clean.shape[1]:]
        disc.zero_grad()
    gen.zero_grad()
    gen.backward(d_out)
    opt_g.step()
    return {
        "loss_D": loss_d,
        "loss_G_adv": loss.adv,
        "loss_perc": loss.perc,
        "loss_ssim": loss.ssim,
        "loss_l1": loss.l1,
    }


def generate(gen, smoky, batch_size=16):
    out = [gen.forward(smoky[i:i + batch_size], train=False) for i in range(0, len(smoky), batch_size)]
    return np.concatenate(out)


def validate(gen, smoky, clean):
    if len(smoky) == 0:
        return float("nan"), float("nan")
    out = generate(gen, smoky)
    ssims = [quality.ssim(c, o) for c, o in zip(clean, out)]
    grids = [spectral.grid_artifact_score(o) for o in out]
    return float(np.mean(ssims)), float(np.mean(grids))


def _format(v):
    if isinstance(v, int):
        return str(v)
    return f"{v:.8g}"


def train(dataset, spec=None, weights=None, config=None, out_dir=None, pairs=None):
    """Train a generator/discriminator pair; returns (Checkpoint, per-epoch log rows).

    ``pairs`` optionally supplies preloaded ``(smoky, clean)`` training arrays and
    ``(smoky, clean)`` validation arrays, bypassing the manifest.
    """
    spec = spec or NetworkSpec()
    weights = weights or LossWeights()
    config = config or TrainConfig()
    if pairs is None:
        if dataset is None or len(dataset) == 0:
            raise ArgumentError("training needs a non-empty dataset")
        train_m, val_m = training_splits(dataset)
        train_s, train_c = load_pairs(train_m, config.image_size)
        val_s, val_c = load_pairs(val_m, config.image_size) if len(val_m) else (train_s[:0], train_c[:0])
    else:
        (train_s, train_c), (val_s, val_c) = pairs
    if len(train_s) == 0:
        raise ArgumentError("training needs a non-empty dataset")
    if len(val_s) == 0:
        val_s, val_c = train_s, train_c
    val_s, val_c = val_s[: config.max_val], val_c[: config.max_val]

    gen, disc = build_networks(spec, config.seed)
    opt_g = Adam(gen, config.learning_rate, config.beta1, config.beta2)
    opt_d = Adam(disc, config.learning_rate, config.beta1, config.beta2)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5F]))
    ckpt = Checkpoint(spec, gen, disc, config, weights)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    n = len(train_s)
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n)
        sums = dict.fromkeys(LOG_COLUMNS[1:6], 0.0)
        batches = 0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            parts = train_step(gen, disc, opt_g, opt_d, train_s[idx], train_c[idx], weights)
            for k, v in parts.items():
                _check_finite(v, k, epoch, b)
                sums[k] += v
            batches += 1
            ckpt.step += 1
        seconds = time.perf_counter() - t0
        val_ssim, val_grid = validate(gen, val_s, val_c)
        row = {"epoch": epoch, **{k: v / batches for k, v in sums.items()}}
        row.update(val_ssim=val_ssim, val_grid_score=val_grid, seconds=seconds)
        rows.append(row)
        ckpt.epoch = epoch
        log.info("epoch %d  %s", epoch, "  ".join(f"{k}={_format(v)}" for k, v in row.items() if k != "epoch"))
        if out_dir is not None:
            save_checkpoint(ckpt, out_dir / "checkpoint.dsmk")
            write_log(rows, out_dir / "train_log.csv")
    return ckpt, rows


def write_log(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow([_format(row[c]) for c in LOG_COLUMNS])


def infer(ckpt, img):
    """Desmoke one image with the checkpoint's generator (eval-mode batch norm).

    The image is resized and zero-padded to the training size, passed through
    the generator, and mapped back to its original shape.
    """
    if isinstance(ckpt, (str, Path)):
        ckpt = load_checkpoint(ckpt)
    img = as_image(img)
    if img.shape[0] != ckpt.spec.image_channels:
        raise ShapeError(f"checkpoint expects {ckpt.spec.image_channels} channels, image has {img.shape[0]}")
    size = ckpt.config.image_size
    c, h, w = img.shape
    x = resize_and_pad(img, size, size)
    out = ckpt.generator.forward(x[None], train=False)[0]
    out = crop_box(out, content_box(w, h, size, size))
    return resize(out, w, h)
