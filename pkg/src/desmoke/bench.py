"""Evaluation harness, the with/without MS-SSIM A/B experiment, and static reports."""

import csv
import html
import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from desmoke import classic, quality, spectral
from desmoke.errors import ArgumentError, DesmokeError
from desmoke.imgio import content_box, crop_box, load_image, resize_and_pad, rgb_to_lab, save_image
from desmoke.neuro.losses import LossWeights
from desmoke.neuro.nets import NetworkSpec
from desmoke.neuro.train import TrainConfig, generate, infer, load_checkpoint, load_pairs, train

log = logging.getLogger(__name__)

METRICS = ("ciede2000", "rmse", "psnr", "ssim", "ms_ssim", "grid_score")
BASE_METHODS = ("identity", "dcp", "veil")
# per-epoch training overhead of the MS-SSIM term reported in the original work, in percent
REFERENCE_OVERHEAD_PCT = 13.0


# --- metrics ------------------------------------------------------------------


def _ciede(clean, out):
    return quality.ciede2000(rgb_to_lab(clean), rgb_to_lab(out))[1]


def _ms_ssim(clean, out):
    return quality.ms_ssim(clean, out, quality.MsSsimParams.fit(*clean.shape[-2:]))


METRIC_FUNCS = {
    "ciede2000": _ciede,
    "rmse": lambda c, o: 255.0 * quality.rmse(c, o),  # 0-255 scale, as in the published table
    "psnr": quality.psnr,
    "ssim": quality.ssim,
    "ms_ssim": _ms_ssim,
    "grid_score": lambda c, o: spectral.grid_artifact_score(o),
}


def compute_metrics(clean, out, metrics=METRICS):
    """metric -> value, or metric -> exception for metrics that failed on this pair."""
    values = {}
    for m in metrics:
        try:
            v = float(METRIC_FUNCS[m](clean, out))
            if not math.isfinite(v):
                raise ArgumentError(f"{m} is {v}")
            values[m] = v
        except (DesmokeError, ValueError, FloatingPointError) as exc:
            values[m] = exc
    return values


# --- evaluation ------------------------------------------------------------------


@dataclass
class EvalConfig:
    methods: list
    dataset: object  # DatasetManifest, already restricted to the evaluation split
    metrics: tuple = METRICS
    exclude_padding: bool = True
    image_size: int = None  # evaluate at resize_and_pad(size, size) when set
    threads: int = 1

    def __post_init__(self):
        if not self.methods or not self.metrics:
            raise ArgumentError("methods and metrics must be non-empty")
        unknown = [m for m in self.metrics if m not in METRIC_FUNCS]
        if unknown:
            raise ArgumentError(f"unknown metrics {unknown}; expected a subset of {METRICS}")
        for m in self.methods:
            if m not in BASE_METHODS and not m.startswith("model:"):
                raise ArgumentError(f"unknown method {m!r}; expected {BASE_METHODS} or model:CHECKPOINT")


@dataclass
class ReportRow:
    method: str
    results: dict  # metric -> MetricResult (mean/std are nan when every image failed)
    errors: dict = field(default_factory=dict)  # metric -> first failure message


def method_function(method):
    """Image -> Image callable for a method name; checkpoints are loaded once."""
    if method == "identity":
        return lambda img: img
    if method == "dcp":
        return classic.dehaze_dcp
    if method == "veil":
        return classic.remove_veil
    ckpt = load_checkpoint(method.split(":", 1)[1])
    return lambda img: infer(ckpt, img)


def _load_pair(clean_path, smoke_path):
    try:
        return load_image(clean_path), load_image(smoke_path)
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"pair ({clean_path}, {smoke_path}): {exc.strerror or exc}") from exc


def _prepare(clean, smoky, config):
    """(clean, smoky, box) at evaluation resolution; box is the non-padded region."""
    if config.image_size is None:
        return clean, smoky, None
    s = config.image_size
    box = content_box(clean.shape[2], clean.shape[1], s, s) if config.exclude_padding else None
    return resize_and_pad(clean, s, s), resize_and_pad(smoky, s, s), box


def _evaluate_pair(pair, functions, config):
    clean, smoky, box = _prepare(*_load_pair(pair[0], pair[1]), config)
    per_method = {}
    for method, fn in functions.items():
        out = fn(smoky)
        c, o = (crop_box(clean, box), crop_box(out, box)) if box is not None else (clean, out)
        per_method[method] = compute_metrics(c, o, config.metrics)
    return per_method


def _aggregate_rows(per_pair, methods, metrics):
    rows = []
    for method in methods:
        results, errors = {}, {}
        for m in metrics:
            vals = [p[method][m] for p in per_pair]
            good = [v for v in vals if not isinstance(v, Exception)]
            bad = [v for v in vals if isinstance(v, Exception)]
            if bad:
                errors[m] = f"{len(bad)}/{len(vals)} images failed: {bad[0]}"
            if good:
                results[m] = quality.aggregate(good, m)
            else:
                results[m] = quality.MetricResult(m, [], math.nan, math.nan)
        rows.append(ReportRow(method, results, errors))
    return rows


def evaluate(config):
    """Run every method over every pair and aggregate each metric per method."""
    functions = {m: method_function(m) for m in config.methods}
    pairs = [(c, s) for c, s, _ in config.dataset.pairs()]
    if not pairs:
        raise ArgumentError("evaluation dataset is empty")
    with ThreadPoolExecutor(max_workers=max(1, config.threads)) as pool:
        # map keeps manifest order, so aggregation does not depend on scheduling
        per_pair = list(pool.map(lambda p: _evaluate_pair(p, functions, config), pairs))
    return _aggregate_rows(per_pair, config.methods, config.metrics)


# --- reports ------------------------------------------------------------------


def csv_header(metrics):
    return ["method"] + [f"{m}_{s}" for m in metrics for s in ("mean", "std")]


def _fmt(v):
    return "nan" if not math.isfinite(v) else f"{v:.6f}"


def write_csv(rows, path, metrics=None):
    metrics = metrics or list(rows[0].results)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(csv_header(metrics))
        for row in rows:
            cells = [row.method]
            for m in metrics:
                r = row.results[m]
                cells += [_fmt(r.mean), _fmt(r.std)]
            w.writerow(cells)
    return Path(path)


def _slug(name):
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name).strip("_") or "method"


def render_report(rows, image_triples, out_dir):
    """Write report.csv and a static index.html with input/output/truth strips.

    ``image_triples`` maps method name -> list of (input, output, truth) images.
    Images are written under ``out_dir/images`` and referenced relatively.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    write_csv(rows, out_dir / "report.csv")
    metrics = list(rows[0].results) if rows else []

    parts = [
        "<!DOCTYPE html>",
        "<html><head><meta charset=\"utf-8\"><title>desmoke report</title>",
        "<style>body{font-family:sans-serif}td,th{padding:2px 8px}img{image-rendering:pixelated;width:160px}</style>",
        "</head><body>",
        "<h1>Desmoking comparison</h1>",
        "<table border=\"1\"><tr>" + "".join(f"<th>{html.escape(h)}</th>" for h in csv_header(metrics)) + "</tr>",
    ]
    for row in rows:
        cells = [html.escape(row.method)]
        for m in metrics:
            cells += [_fmt(row.results[m].mean), _fmt(row.results[m].std)]
        parts.append("<tr>" + "".join(f"<td>{c}</td>" for c in cells) + "</tr>")
    parts.append("</table>")

    for method, triples in image_triples.items():
        slug = _slug(method)
        parts.append(f"<h2>{html.escape(method)}</h2>")
        parts.append("<table><tr><th>input</th><th>output</th><th>ground truth</th></tr>")
        for i, triple in enumerate(triples):
            cells = []
            for kind, img in zip(("input", "output", "truth"), triple):
                rel = f"images/{slug}_{i:03d}_{kind}.png"
                save_image(np.clip(img, 0.0, 1.0), out_dir / rel)
                cells.append(f"<td><img src=\"{rel}\" alt=\"{kind}\"></td>")
            parts.append("<tr>" + "".join(cells) + "</tr>")
        parts.append("</table>")
    for row in rows:
        for m, msg in row.errors.items():
            parts.append(f"<p>{html.escape(row.method)} / {m}: {html.escape(msg)}</p>")
    parts.append("</body></html>")
    (out_dir / "index.html").write_text("\n".join(parts) + "\n")
    return out_dir / "index.html"


def example_triples(methods, dataset, count=3, image_size=None):
    """A few (input, output, truth) triples per method for the HTML page."""
    functions = {m: method_function(m) for m in methods}
    triples = {m: [] for m in methods}
    for clean_path, smoke_path, _ in list(dataset.pairs())[:count]:
        clean, smoky = _load_pair(clean_path, smoke_path)
        if image_size:
            clean, smoky = resize_and_pad(clean, image_size, image_size), resize_and_pad(smoky, image_size, image_size)
        for m, fn in functions.items():
            triples[m].append((smoky, fn(smoky), clean))
    return triples


# --- A/B experiment -------------------------------------------------------------

# Both arms use the adversarial + discriminator-feature objective without the
# pixel L1 term, i.e. the plain adversarial network the MS-SSIM term is added to.
AB_BASE_WEIGHTS = LossWeights(lambda_adv=1.0, lambda_perc=(1.0, 1.0, 1.0), lambda_ssim=10.0, lambda_l1=0.0)
AB_VARIANTS = ("none", "ms_ssim")


@dataclass
class ArmResult:
    variant: str
    weights: dict
    config: dict
    grid_scores: list
    ssim: list
    ciede2000: list
    rmse: list
    epoch_seconds: list

    def summary(self):
        return {
            "grid_score_mean": float(np.mean(self.grid_scores)),
            "ssim_mean": float(np.mean(self.ssim)),
            "ciede2000_mean": float(np.mean(self.ciede2000)),
            "rmse_mean": float(np.mean(self.rmse)),
            "epoch_seconds_mean": float(np.mean(self.epoch_seconds)),
        }


@dataclass
class ABRecord:
    arms: dict  # variant -> ArmResult
    identity: dict  # ciede2000 / rmse lists for the unprocessed held-out inputs
    held_out: int
    overhead_pct: float
    reference_overhead_pct: float = REFERENCE_OVERHEAD_PCT

    @property
    def grid_claim_holds(self):
        return self.arms["none"].summary()["grid_score_mean"] > self.arms["ms_ssim"].summary()["grid_score_mean"]

    @property
    def ssim_claim_holds(self):
        return self.arms["ms_ssim"].summary()["ssim_mean"] > self.arms["none"].summary()["ssim_mean"]

    def to_dict(self):
        return {
            "arms": {k: {**asdict(v), "summary": v.summary()} for k, v in self.arms.items()},
            "identity": {k: float(np.mean(v)) for k, v in self.identity.items()},
            "held_out": self.held_out,
            "overhead_pct": self.overhead_pct,
            "reference_overhead_pct": self.reference_overhead_pct,
            "grid_claim_holds": self.grid_claim_holds,
            "ssim_claim_holds": self.ssim_claim_holds,
        }


def _held_out(dataset):
    test = dataset.split("test")
    return test if len(test) else dataset.split("val")


def _jsonable(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def ab_experiment(dataset, spec=None, config=None, out_dir=None, base_weights=AB_BASE_WEIGHTS):
    """Train two identically seeded models differing only in ssim_variant and compare them.

    Returns an ABRecord; with ``out_dir`` also writes per-arm checkpoints and logs,
    spectra of both arms' outputs and ``ab_record.json``.
    """
    spec = spec or NetworkSpec()
    config = config or TrainConfig()
    out_dir = Path(out_dir) if out_dir is not None else None
    train_m, val_m = dataset.split("train"), dataset.split("val")
    held = _held_out(dataset)
    if len(train_m) == 0 or len(held) == 0:
        raise ArgumentError("A/B experiment needs non-empty train and held-out splits")
    size = config.image_size
    train_pairs = load_pairs(train_m, size)
    val_pairs = load_pairs(val_m, size) if len(val_m) else (train_pairs[0][:0], train_pairs[1][:0])
    test_s, test_c = load_pairs(held, size)

    identity = {
        "ciede2000": [_ciede(c, s) for c, s in zip(test_c, test_s)],
        "rmse": [255.0 * quality.rmse(c, s) for c, s in zip(test_c, test_s)],
    }
    arms, outputs = {}, {}
    for variant in AB_VARIANTS:
        weights = replace(base_weights, ssim_variant=variant)
        arm_dir = out_dir / variant if out_dir is not None else None
        log.info("A/B arm %s: training %d pairs for %d epochs", variant, len(train_pairs[0]), config.epochs)
        ckpt, rows = train(None, spec, weights, config, arm_dir, pairs=(train_pairs, val_pairs))
        out = generate(ckpt.generator, test_s)
        outputs[variant] = out
        arms[variant] = ArmResult(
            variant=variant,
            weights=_jsonable(asdict(weights)),
            config=asdict(config),
            grid_scores=[spectral.grid_artifact_score(o) for o in out],
            ssim=[quality.ssim(c, o) for c, o in zip(test_c, out)],
            ciede2000=[_ciede(c, o) for c, o in zip(test_c, out)],
            rmse=[255.0 * quality.rmse(c, o) for c, o in zip(test_c, out)],
            epoch_seconds=[r["seconds"] for r in rows],
        )
    t_none = arms["none"].summary()["epoch_seconds_mean"]
    t_ms = arms["ms_ssim"].summary()["epoch_seconds_mean"]
    record = ABRecord(arms, identity, len(test_s), 100.0 * (t_ms / t_none - 1.0))
    log.info(
        "MS-SSIM per-epoch overhead %.1f%% (reference figure %.0f%%)", record.overhead_pct, REFERENCE_OVERHEAD_PCT
    )
    if out_dir is not None:
        write_ab_outputs(record, outputs, test_s, test_c, out_dir)
    return record


def write_ab_outputs(record, outputs, test_s, test_c, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for variant, out in outputs.items():
        # mean log-spectrum over the held-out outputs, plus the first example
        mean_spec = spectral.Spectrum(np.mean([spectral.fft_magnitude(o).magnitude for o in out], axis=0))
        save_image(spectral.spectrum_image(mean_spec), out_dir / f"spectrum_{variant}.png")
        save_image(out[0], out_dir / f"example_{variant}.png")
    save_image(test_s[0], out_dir / "example_input.png")
    save_image(test_c[0], out_dir / "example_truth.png")
    with open(out_dir / "ab_record.json", "w") as fh:
        json.dump(record.to_dict(), fh, indent=2, sort_keys=True)
    return out_dir / "ab_record.json"
