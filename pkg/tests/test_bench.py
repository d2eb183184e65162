import csv
import math
import re
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from desmoke import bench, smokesim
from desmoke.errors import ArgumentError
from desmoke.imgio import save_image
from desmoke.neuro import LossWeights, NetworkSpec, TrainConfig, save_checkpoint, train
from desmoke.smokesim import DatasetManifest, ManifestEntry

GOLDEN = Path(__file__).parent / "golden" / "eval_report.csv"
TINY = NetworkSpec(generator_filters=(4, 8), discriminator_filters=(4, 8), tap_layers=(0, 1))


def golden_dataset(root):
    smokesim.write_scenes(root / "clean", 4, 48, 21)
    return smokesim.build_dataset(root / "clean", root / "data", 21, test_fraction=0.5, val_fraction=0.0)


def identical_pairs(root, n=3, size=40):
    rng = np.random.default_rng(0)
    entries = []
    for i in range(n):
        img = rng.random((3, size, size))
        save_image(img, root / f"c{i}.png")
        save_image(img, root / f"s{i}.png")
        entries.append(ManifestEntry(f"c{i}.png", f"s{i}.png", "light", i, (0.9, 0.9, 0.9), "test"))
    return DatasetManifest(root, entries)


def test_identity_on_identical_pairs(tmp_path):
    m = identical_pairs(tmp_path)
    rows = bench.evaluate(bench.EvalConfig(["identity"], m, ("ciede2000", "rmse", "ssim", "psnr")))
    r = rows[0].results
    assert r["ciede2000"].mean == 0.0 and r["rmse"].mean == 0.0 and r["ssim"].mean == 1.0
    # PSNR of identical images is +inf; recorded as a per-row failure instead of aborting
    assert math.isnan(r["psnr"].mean) and "psnr" in rows[0].errors


def test_metric_failure_is_recorded(tmp_path):
    m = identical_pairs(tmp_path, size=24)  # below the grid-score minimum size
    rows = bench.evaluate(bench.EvalConfig(["identity"], m, ("rmse", "grid_score")))
    assert "grid_score" in rows[0].errors and rows[0].results["rmse"].mean == 0.0


def test_eval_config_validation(tmp_path):
    m = identical_pairs(tmp_path)
    with pytest.raises(ArgumentError):
        bench.EvalConfig([], m)
    with pytest.raises(ArgumentError):
        bench.EvalConfig(["identity"], m, ("lpips",))
    with pytest.raises(ArgumentError):
        bench.EvalConfig(["magic"], m)


def test_missing_file_names_pair(tmp_path):
    m = identical_pairs(tmp_path)
    (tmp_path / "s1.png").unlink()
    with pytest.raises(FileNotFoundError, match="s1.png"):
        bench.evaluate(bench.EvalConfig(["identity"], m, ("rmse",)))


def test_golden_csv(tmp_path):
    m = golden_dataset(tmp_path)
    rows = bench.evaluate(bench.EvalConfig(["identity", "dcp", "veil"], m.split("test")))
    bench.write_csv(rows, tmp_path / "report.csv")
    assert (tmp_path / "report.csv").read_bytes() == GOLDEN.read_bytes()


def test_rows_deterministic_and_order_independent(tmp_path):
    m = golden_dataset(tmp_path).split("test")
    a = bench.evaluate(bench.EvalConfig(["identity", "dcp", "veil"], m, threads=1))
    b = bench.evaluate(bench.EvalConfig(["veil", "identity", "dcp"], m, threads=3))
    assert len(a) == 3
    by_name = {r.method: r for r in b}
    for row in a:
        for metric, res in row.results.items():
            assert res.per_image == by_name[row.method].results[metric].per_image


def test_exclude_padding(tmp_path):
    # a wide pair padded to a square: with padding excluded the zero rows never count
    rng = np.random.default_rng(1)
    clean = rng.random((3, 32, 64))
    save_image(clean, tmp_path / "c.png")
    save_image(np.clip(clean + 0.1, 0, 1), tmp_path / "s.png")
    m = DatasetManifest(tmp_path, [ManifestEntry("c.png", "s.png", "light", 0, (0.9,) * 3, "test")])
    kept = bench.evaluate(bench.EvalConfig(["identity"], m, ("rmse",), image_size=64))[0].results["rmse"].mean
    padded = bench.evaluate(bench.EvalConfig(["identity"], m, ("rmse",), exclude_padding=False, image_size=64))
    full = bench.evaluate(bench.EvalConfig(["identity"], m, ("rmse",)))[0].results["rmse"].mean
    assert padded[0].results["rmse"].mean < kept
    assert kept == pytest.approx(full, rel=0.05)


def test_model_method(tmp_path, small_dataset):
    ckpt, _ = train(small_dataset, TINY, LossWeights(lambda_perc=(1, 1)), TrainConfig(epochs=1, image_size=32))
    save_checkpoint(ckpt, tmp_path / "m.dsmk")
    rows = bench.evaluate(bench.EvalConfig(["identity", f"model:{tmp_path / 'm.dsmk'}"], small_dataset.split("test"),
                                           ("rmse", "ssim")))
    assert [r.method for r in rows] == ["identity", f"model:{tmp_path / 'm.dsmk'}"]
    assert all(math.isfinite(r.results["rmse"].mean) for r in rows)


def test_render_report(tmp_path):
    m = golden_dataset(tmp_path).split("test")
    methods = ["identity", "dcp"]
    rows = bench.evaluate(bench.EvalConfig(methods, m))
    out = tmp_path / "report"
    page = bench.render_report(rows, bench.example_triples(methods, m, 2), out)
    header = next(csv.reader(open(out / "report.csv")))
    assert header[:5] == ["method", "ciede2000_mean", "ciede2000_std", "rmse_mean", "rmse_std"]
    text = page.read_text()
    refs = re.findall(r'(?:src|href)="([^"]+)"', text)
    assert len(refs) == 2 * 2 * 3
    for ref in refs:
        assert not ref.startswith(("/", "http")) and ".." not in ref
        assert (out / ref).resolve().is_file()
        assert out.resolve() in (out / ref).resolve().parents


def test_ab_experiment_structure(tmp_path, small_dataset):
    cfg = TrainConfig(epochs=1, image_size=32, seed=2)
    record = bench.ab_experiment(small_dataset, TINY, cfg, tmp_path / "ab", replace(bench.AB_BASE_WEIGHTS,
                                                                                       lambda_perc=(1, 1)))
    assert set(record.arms) == {"none", "ms_ssim"}
    a, b = record.arms["none"], record.arms["ms_ssim"]
    assert a.config == b.config
    assert {k: v for k, v in a.weights.items() if k != "ssim_variant"} == {
        k: v for k, v in b.weights.items() if k != "ssim_variant"
    }
    assert (a.weights["ssim_variant"], b.weights["ssim_variant"]) == ("none", "ms_ssim")
    assert len(a.grid_scores) == record.held_out == len(small_dataset.split("test"))
    assert math.isfinite(record.overhead_pct)
    for name in ("spectrum_none.png", "spectrum_ms_ssim.png", "ab_record.json", "none/checkpoint.dsmk"):
        assert (tmp_path / "ab" / name).is_file()
