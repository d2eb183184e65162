"""Command-line entry point: ``desmoke <verb> [options]``."""

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import yaml
from threadpoolctl import threadpool_limits

from desmoke import bench, classic, smokesim, spectral
from desmoke.errors import IO_EXIT_CODE, ArgumentError, DesmokeError
from desmoke.imgio import load_image, save_image
from desmoke.neuro.losses import LossWeights
from desmoke.neuro.nets import NetworkSpec
from desmoke.neuro.train import TrainConfig, infer, load_checkpoint, train

log = logging.getLogger("desmoke")


# --- config -------------------------------------------------------------------


def load_config(path):
    """Sections of key-value settings from a YAML or JSON file (JSON is valid YAML)."""
    if path is None:
        return {}
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict) or not all(isinstance(v, dict) for v in data.values()):
        raise ArgumentError(f"{path}: expected a mapping of sections to key-value mappings")
    return data


def build(cls, section, overrides=None):
    """Instantiate a dataclass from a config section plus non-None CLI overrides."""
    names = {f.name for f in fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise ArgumentError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in section.items()}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return cls(**values)


def _manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    return smokesim.DatasetManifest.read(path)


def _train_objects(args, cfg):
    config = build(TrainConfig, cfg.get("train", {}), {
        "epochs": args.epochs, "batch_size": args.batch_size, "image_size": args.image_size,
        "learning_rate": args.lr, "seed": args.seed,
    })
    spec = build(NetworkSpec, cfg.get("net", {}))
    return spec, config


# --- verbs ----------------------------------------------------------------------


def cmd_scenes(args, cfg):
    paths = smokesim.write_scenes(args.out, args.count, args.size, args.seed)
    print(f"wrote {len(paths)} scenes to {args.out}")


def cmd_synth(args, cfg):
    params = {d: build(smokesim.SmokeParams, cfg.get("smoke", {}), {"density": d}) for d in smokesim.DENSITIES}
    m = smokesim.build_dataset(args.clean, args.out, args.seed, params)
    print(f"wrote {len(m)} pairs to {Path(args.out) / 'manifest.jsonl'}")


def cmd_train(args, cfg):
    spec, config = _train_objects(args, cfg)
    weights = build(LossWeights, cfg.get("weights", {}), {"ssim_variant": args.ssim_variant})
    ckpt, rows = train(_manifest(args.data), spec, weights, config, args.out)
    print(f"trained {ckpt.epoch} epochs; checkpoint {Path(args.out) / 'checkpoint.dsmk'}")


def cmd_run(args, cfg):
    if args.method == "dcp":
        params = build(classic.DcpParams, cfg.get("dcp", {}))
        fn = lambda img: classic.dehaze_dcp(img, params)  # noqa: E731
    elif args.method == "veil":
        strength = cfg.get("veil", {}).get("strength", 0.8)
        fn = lambda img: classic.remove_veil(img, strength)  # noqa: E731
    else:
        if not args.checkpoint:
            raise ArgumentError("--method model needs --checkpoint")
        ckpt = load_checkpoint(args.checkpoint)
        fn = lambda img: infer(ckpt, img)  # noqa: E731
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = smokesim.list_images(args.input)
    if not paths:
        raise ArgumentError(f"{args.input}: no PNG/PPM images found")
    for p in paths:
        save_image(fn(load_image(p)), out_dir / (p.stem + ".png"))
    print(f"processed {len(paths)} images into {out_dir}")


def _eval_config(args, cfg, manifest):
    section = dict(cfg.get("eval", {}))
    methods = args.methods.split(",") if args.methods else section.pop("methods", ["identity", "dcp", "veil"])
    metrics = tuple(args.metrics.split(",")) if args.metrics else tuple(section.pop("metrics", bench.METRICS))
    section.pop("methods", None)
    section.pop("metrics", None)
    split = manifest.split(args.split)
    return bench.EvalConfig(
        methods=methods, dataset=split, metrics=metrics,
        exclude_padding=section.get("exclude_padding", not args.include_padding),
        image_size=args.image_size or section.get("image_size"),
        threads=args.threads,
    )


def cmd_eval(args, cfg):
    manifest = _manifest(args.data)
    config = _eval_config(args, cfg, manifest)
    rows = bench.evaluate(config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    bench.write_csv(rows, out_dir / "report.csv", list(config.metrics))
    record = {
        "data": str(Path(args.data).resolve()),
        "split": args.split,
        "image_size": config.image_size,
        "methods": config.methods,
        "rows": [
            {"method": r.method, "errors": r.errors,
             "results": {m: {"mean": v.mean, "std": v.std, "per_image": v.per_image} for m, v in r.results.items()}}
            for r in rows
        ],
    }
    with open(out_dir / "results.json", "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
    with open(out_dir / "report.csv") as fh:
        print(fh.read(), end="")


def cmd_report(args, cfg):
    from desmoke.quality import MetricResult

    with open(args.results) as fh:
        record = json.load(fh)
    rows = [
        bench.ReportRow(r["method"], {m: MetricResult(m, v["per_image"], v["mean"], v["std"])
                                      for m, v in r["results"].items()}, r["errors"])
        for r in record["rows"]
    ]
    manifest = _manifest(record["data"]).split(record["split"])
    triples = bench.example_triples(record["methods"], manifest, args.examples, record["image_size"])
    page = bench.render_report(rows, triples, args.out)
    print(f"wrote {page}")


def cmd_ab(args, cfg):
    spec, config = _train_objects(args, cfg)
    base = build(LossWeights, cfg.get("weights", {})) if "weights" in cfg else bench.AB_BASE_WEIGHTS
    record = bench.ab_experiment(_manifest(args.data), spec, config, args.out, base)
    s = {k: v.summary() for k, v in record.arms.items()}
    for variant, summ in s.items():
        print(f"{variant:8s} grid={summ['grid_score_mean']:.4f} ssim={summ['ssim_mean']:.4f} "
              f"ciede2000={summ['ciede2000_mean']:.3f} epoch={summ['epoch_seconds_mean']:.2f}s")
    print(f"MS-SSIM epoch overhead {record.overhead_pct:.1f}% (reference {bench.REFERENCE_OVERHEAD_PCT:.0f}%)")
    print(f"grid claim {'holds' if record.grid_claim_holds else 'fails'}; "
          f"ssim claim {'holds' if record.ssim_claim_holds else 'fails'}")


def cmd_spectrum(args, cfg):
    img = load_image(args.input)
    spec = spectral.fft_magnitude(img)
    peaks = spectral.detect_periodic_peaks(spec, args.min_prominence)
    if args.out_spectrum:
        save_image(spectral.spectrum_image(spec), args.out_spectrum)
    report = {
        "image": str(args.input),
        "width": spec.width,
        "height": spec.height,
        "min_prominence": args.min_prominence,
        "peaks": [{"u": u, "v": v, "magnitude": m} for u, v, m in peaks],
        "grid_artifact_score": spectral.grid_artifact_score(img, args.min_prominence),
    }
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.report:
        Path(args.report).write_text(text + "\n")
    print(text)


# --- parser ---------------------------------------------------------------------


def _train_flags(p):
    p.add_argument("--data", required=True, help="dataset directory or manifest.jsonl")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--lr", type=float)


def make_parser():
    parser = argparse.ArgumentParser(prog="desmoke", description="Synthetic surgical smoke removal toolkit")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--config", help="YAML/JSON file with train/net/weights/smoke/dcp/veil/eval sections")
    parser.add_argument("--threads", type=int, default=1, help="worker and BLAS threads")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("scenes", help="write procedural clean tissue scenes")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_scenes)

    p = sub.add_parser("synth", help="composite smoke onto clean images and write a manifest")
    p.add_argument("--clean", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a generator/discriminator pair")
    _train_flags(p)
    p.add_argument("--ssim-variant", choices=("ssim", "ms_ssim", "none"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run", help="desmoke a directory of images")
    p.add_argument("--method", choices=("dcp", "veil", "model"), required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--params", help="alias for --config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="evaluate methods on a dataset split")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--methods", help="comma list of identity,dcp,veil,model:CHECKPOINT")
    p.add_argument("--metrics", help="comma list from " + ",".join(bench.METRICS))
    p.add_argument("--split", default="test", choices=smokesim.SPLITS)
    p.add_argument("--image-size", type=int)
    p.add_argument("--include-padding", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render report.csv and index.html from eval results")
    p.add_argument("--results", required=True, help="results.json written by eval")
    p.add_argument("--out", required=True)
    p.add_argument("--examples", type=int, default=3)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("ab", help="with/without MS-SSIM loss experiment")
    _train_flags(p)
    p.set_defaults(func=cmd_ab)

    p = sub.add_parser("spectrum", help="magnitude spectrum, periodic peaks and grid score of one image")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out-spectrum")
    p.add_argument("--report")
    p.add_argument("--min-prominence", type=float, default=spectral.DEFAULT_PROMINENCE)
    p.set_defaults(func=cmd_spectrum)
    return parser


def main(argv=None):
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(getattr(args, "params", None) or args.config)
        with threadpool_limits(limits=max(1, args.threads)):
            args.func(args, cfg)
    except DesmokeError as exc:
        print(f"desmoke: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"desmoke: I/O error: {exc}", file=sys.stderr)
        return IO_EXIT_CODE
    return 0


if __name__ == "__main__":
    sys.exit(main())
