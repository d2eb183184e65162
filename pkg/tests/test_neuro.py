import importlib
import math

import numpy as np
import pytest

import oracles
from desmoke import quality, smokesim
from desmoke.errors import ArgumentError, DivergenceError, FormatError, ShapeError
from desmoke.neuro import layers, losses, nets
from desmoke.neuro import (
    Adam,
    AdamState,
    Discriminator,
    Generator,
    LossWeights,
    NetworkSpec,
    TrainConfig,
    adam_step,
    composite_generator_loss,
    gan_losses,
    infer,
    load_checkpoint,
    perceptual_loss,
    save_checkpoint,
    train,
)

# the package re-exports train(), which shadows the submodule attribute
trainmod = importlib.import_module("desmoke.neuro.train")

TINY = NetworkSpec(generator_filters=(4, 8), discriminator_filters=(4, 8), tap_layers=(0, 1))
L1_ONLY = LossWeights(lambda_adv=0, lambda_perc=(0, 0, 0), lambda_ssim=0, lambda_l1=1, ssim_variant="none")


def grad_check(f, x, analytic, rng, n=30, h=1e-5):
    return oracles.check_gradient(f, x, analytic, rng, n=n, h=h)


# --- layers -----------------------------------------------------------------


def test_conv_identity_kernel(rng):
    x = rng.random((2, 1, 7, 9))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(layers.conv2d(x, w, np.zeros(1), 1, 1), x)


def test_conv_ones_kernel():
    out = layers.conv2d(np.ones((1, 1, 6, 6)), np.ones((1, 1, 3, 3)), None, 1, 1)
    np.testing.assert_array_equal(out[0, 0, 1:-1, 1:-1], 9.0)
    assert out[0, 0, 0, 0] == 4.0


def test_conv_matches_loop(rng):
    x = rng.random((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = layers.conv2d(x, w, b, 2, 1)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 4, 4))
    for n in range(2):
        for o in range(4):
            for i in range(4):
                for j in range(4):
                    ref[n, o, i, j] = np.sum(xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-12)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_backward(rng, stride):
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    r = rng.standard_normal(layers.conv2d(x, w, b, stride, 1).shape)
    dx, dw, db = layers.conv2d_backward(x, w, r, stride, 1)
    assert grad_check(lambda v: np.sum(layers.conv2d(v, w, b, stride, 1) * r), x, dx, rng) < 1e-4
    assert grad_check(lambda v: np.sum(layers.conv2d(x, v, b, stride, 1) * r), w, dw, rng) < 1e-4
    assert grad_check(lambda v: np.sum(layers.conv2d(x, w, v, stride, 1) * r), b, db, rng, n=4) < 1e-4


def test_conv_shape_errors():
    with pytest.raises(ShapeError):
        layers.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))
    with pytest.raises(ShapeError):
        layers.conv2d(np.zeros((2, 4, 4)), np.zeros((1, 2, 3, 3)))


def test_deconv_impulse(rng):
    w = rng.standard_normal((1, 1, 4, 4))
    x = np.zeros((1, 1, 4, 4))
    x[0, 0, 1, 2] = 2.5
    out = layers.deconv2d(x, w, None, 2, 1)
    assert out.shape == (1, 1, 8, 8)
    # input (i, j) lands at rows 2i - 1 .. 2i + 2 after cropping pad 1
    expected = np.zeros((10, 10))
    expected[2:6, 4:8] = 2.5 * w[0, 0]
    np.testing.assert_allclose(out[0, 0], expected[1:9, 1:9], atol=1e-15)


def test_deconv_adjoint(rng):
    x = rng.standard_normal((2, 5, 6, 7))
    y = rng.standard_normal((2, 3, 12, 14))
    w = rng.standard_normal((5, 3, 4, 4))
    lhs = np.sum(layers.deconv2d(x, w, None, 2, 1) * y)
    rhs = np.sum(x * layers.conv2d(y, w, None, 2, 1))
    assert lhs == pytest.approx(rhs, rel=1e-6)


def test_deconv_backward(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    w = rng.standard_normal((3, 2, 4, 4))
    b = rng.standard_normal(2)
    r = rng.standard_normal((2, 2, 8, 8))
    dx, dw, db = layers.deconv2d_backward(x, w, r, 2, 1)
    assert grad_check(lambda v: np.sum(layers.deconv2d(v, w, b) * r), x, dx, rng) < 1e-4
    assert grad_check(lambda v: np.sum(layers.deconv2d(x, v, b) * r), w, dw, rng) < 1e-4
    assert grad_check(lambda v: np.sum(layers.deconv2d(x, w, v) * r), b, db, rng, n=2) < 1e-4


def test_batchnorm_standardized_passthrough(rng):
    x = rng.standard_normal((4, 2, 5, 5))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    out, _ = layers.batchnorm(x, np.ones(2), np.zeros(2))
    assert np.max(np.abs(out - x)) < 1e-4


def test_batchnorm_output_moments(rng):
    x = rng.standard_normal((3, 2, 6, 6)) * 4 + 7
    gamma, beta = np.array([2.0, 0.5]), np.array([-1.0, 3.0])
    out, _ = layers.batchnorm(x, gamma, beta)
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), beta, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), gamma**2, rtol=1e-3)


def test_batchnorm_running_and_eval(rng):
    running = {"mean": np.zeros(2), "var": np.ones(2)}
    x = rng.standard_normal((2, 2, 3, 3)) + 5
    layers.batchnorm(x, np.ones(2), np.zeros(2), "train", running)
    m = x.shape[0] * 9
    np.testing.assert_allclose(running["mean"], 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(running["var"], 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))
    out, _ = layers.batchnorm(x, np.ones(2), np.zeros(2), "eval", running)
    expected = (x - running["mean"][None, :, None, None]) / np.sqrt(running["var"] + 1e-5)[None, :, None, None]
    np.testing.assert_allclose(out, expected)


def test_batchnorm_degenerate():
    with pytest.raises(ArgumentError):
        layers.batchnorm(np.zeros((1, 2, 1, 1)), np.ones(2), np.zeros(2))


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batchnorm_backward(rng, mode):
    x = rng.standard_normal((3, 2, 4, 4))
    gamma, beta = rng.standard_normal(2), rng.standard_normal(2)
    running = {"mean": rng.standard_normal(2), "var": rng.random(2) + 0.5}
    r = rng.standard_normal(x.shape)

    def f(x=x, gamma=gamma, beta=beta):
        return np.sum(layers.batchnorm(x, gamma, beta, mode, dict(running))[0] * r)

    _, cache = layers.batchnorm(x, gamma, beta, mode, dict(running))
    dx, dg, db = layers.batchnorm_backward(r, gamma, cache)
    assert grad_check(lambda v: f(x=v), x, dx, rng) < 1e-3
    assert grad_check(lambda v: f(gamma=v), gamma, dg, rng, n=2) < 1e-3
    assert grad_check(lambda v: f(beta=v), beta, db, rng, n=2) < 1e-3


def test_leaky_relu_values_and_grad(rng):
    assert layers.leaky_relu(np.array(-1.0)) == pytest.approx(-0.2)
    assert layers.leaky_relu(np.array(3.0)) == 3.0
    assert layers.leaky_relu_backward(np.array(0.0), np.array(1.0)) == 1.0
    x = rng.standard_normal(50)
    x[np.abs(x) < 1e-3] = 0.5
    g = layers.leaky_relu_backward(x, np.ones(50))
    for i in range(50):
        num = oracles.central_difference(lambda v: float(layers.leaky_relu(v[i])), x, (i,), 1e-4)
        assert num == pytest.approx(g[i], abs=1e-9)


# --- networks ---------------------------------------------------------------


def test_generator_shape_and_range(rng):
    gen = Generator(NetworkSpec(), rng)
    x = rng.random((2, 3, 64, 48))
    out = gen.forward(x)
    assert out.shape == x.shape
    assert out.min() >= 0 and out.max() <= 1


def test_generator_indivisible():
    with pytest.raises(ShapeError):
        Generator(NetworkSpec()).forward(np.zeros((1, 3, 60, 64)))


def test_generator_zero_weights():
    gen = Generator(TINY)
    for _, layer, key in gen.named_params():
        layer.params[key] = np.zeros_like(layer.params[key])
    out = gen.forward(np.random.default_rng(0).random((2, 3, 16, 16)))
    np.testing.assert_array_equal(out, 0.5)


def test_generator_end_to_end_gradient(rng):
    spec = NetworkSpec(generator_filters=(4, 4), discriminator_filters=(4,), tap_layers=(0,))
    gen = Generator(spec, rng)
    x = rng.random((2, 3, 16, 16))
    r = rng.standard_normal(x.shape)
    gen.forward(x)
    gen.zero_grad()
    dx = gen.backward(r)
    assert grad_check(lambda v: np.sum(gen.forward(v) * r), x, dx, rng, h=1e-5) < 1e-3
    layer = gen.blocks["enc0"].layers[0]
    gen.forward(x)
    gen.zero_grad()
    gen.backward(r)
    w = layer.params["weight"]
    dw = layer.grads["weight"].copy()

    def f(v):
        layer.params["weight"] = v
        return np.sum(gen.forward(x) * r)

    assert grad_check(f, w.copy(), dw, rng) < 1e-3


def test_discriminator_zero_weights_and_range(rng):
    d = Discriminator(TINY)
    for _, layer, key in d.named_params():
        layer.params[key] = np.zeros_like(layer.params[key])
    p, logits, _ = d.forward(rng.random((3, 6, 16, 16)))
    np.testing.assert_array_equal(p, 0.5)
    d = Discriminator(NetworkSpec(), rng)
    p, _, taps = d.forward(rng.random((3, 6, 64, 64)))
    assert np.all((p > 0) & (p < 1))
    assert [t.shape for t in taps] == [(3, 16, 32, 32), (3, 32, 16, 16), (3, 64, 8, 8)]


def test_discriminator_shape_error():
    with pytest.raises(ShapeError):
        Discriminator(TINY).forward(np.zeros((1, 3, 16, 16)))


def test_discriminator_backward(rng):
    d = Discriminator(TINY, rng)
    pair = rng.random((2, 6, 16, 16))
    r = rng.standard_normal(2)
    d.forward(pair)
    d.zero_grad()
    dpair = d.backward(r)
    assert grad_check(lambda v: np.sum(d.forward(v)[1] * r), pair, dpair, rng) < 1e-3


def test_spec_describe_and_round_trip():
    spec = NetworkSpec()
    assert spec.describe().startswith("G: n16s2 n32s2 n64s2 n32s2 n16s2 n3s2")
    assert NetworkSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ArgumentError):
        NetworkSpec(tap_layers=(5,))


# --- losses -----------------------------------------------------------------


def test_gan_losses_examples():
    ld, lg = gan_losses(np.array([0.5]), np.array([0.5]))
    assert ld == pytest.approx(math.log(2)) and lg == pytest.approx(math.log(2))
    values = [gan_losses(np.array([0.5]), np.array([p]))[1] for p in (0.1, 0.3, 0.6, 0.9, 0.99)]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert math.isfinite(gan_losses(np.array([0.0]), np.array([1.0]))[0])


def test_gan_logit_grads(rng):
    z_r, z_f = rng.standard_normal(4), rng.standard_normal(4)

    def ld(zr, zf):
        return gan_losses(nets.sigmoid(zr), nets.sigmoid(zf))

    g_real, g_fake, g_gen = losses.gan_logit_grads(nets.sigmoid(z_r), nets.sigmoid(z_f))
    for i in range(4):
        assert oracles.central_difference(lambda v: ld(v, z_f)[0], z_r, (i,), 1e-6) == pytest.approx(g_real[i], abs=1e-8)
        assert oracles.central_difference(lambda v: ld(z_r, v)[0], z_f, (i,), 1e-6) == pytest.approx(g_fake[i], abs=1e-8)
        assert oracles.central_difference(lambda v: ld(z_r, v)[1], z_f, (i,), 1e-6) == pytest.approx(g_gen[i], abs=1e-8)


def test_perceptual_examples(rng):
    taps = [rng.standard_normal((2, 4, 8, 8)), rng.standard_normal((2, 8, 4, 4))]
    other = [t + rng.standard_normal(t.shape) for t in taps]
    assert perceptual_loss(taps, taps, (1, 1))[0] == 0.0
    one = perceptual_loss(taps, other, (1.0, 0.5))[0]
    assert perceptual_loss(taps, other, (2.0, 1.0))[0] == pytest.approx(2 * one)
    with pytest.raises(ShapeError):
        perceptual_loss(taps, other[:1], (1, 1))


def test_perceptual_gradient_through_discriminator(rng):
    d = Discriminator(TINY, rng)
    cond, real, fake = (rng.random((2, 3, 16, 16)) for _ in range(3))
    _, _, taps_real = d.forward(np.concatenate([cond, real], 1))
    taps_real = [t.copy() for t in taps_real]
    w = (1.0, 0.7)

    def f(v):
        return perceptual_loss(taps_real, d.forward(np.concatenate([cond, v], 1))[2], w)[0]

    _, _, taps_fake = d.forward(np.concatenate([cond, fake], 1))
    _, grads = perceptual_loss(taps_real, taps_fake, w)
    d.zero_grad()
    dfake = d.backward(np.zeros(2), grads)[:, 3:]
    assert grad_check(f, fake, dfake, rng, h=1e-6) < 1e-3


def test_composite_examples(rng):
    clean = rng.random((2, 3, 32, 32))
    assert composite_generator_loss(clean, clean, L1_ONLY).total == 0.0
    w = LossWeights(lambda_adv=0, lambda_perc=(0, 0, 0), lambda_ssim=1, lambda_l1=0, ssim_variant="ssim")
    assert composite_generator_loss(clean, clean, w).total == pytest.approx(-1.0)
    w = LossWeights(lambda_adv=0, lambda_perc=(0, 0, 0), lambda_ssim=1, lambda_l1=0, ssim_variant="ms_ssim")
    assert composite_generator_loss(clean, clean, w).total == pytest.approx(-1.0)


def test_composite_linearity(rng):
    clean, out = rng.random((2, 3, 64, 64)), rng.random((2, 3, 64, 64))
    d_fake = rng.uniform(0.1, 0.9, 2)
    full = LossWeights(lambda_adv=0.7, lambda_perc=(1, 1, 1), lambda_ssim=3.0, lambda_l1=2.0)
    res = composite_generator_loss(clean, out, full, d_fake)
    l1 = composite_generator_loss(clean, out, LossWeights(0, (0, 0, 0), 0, 1, "none"))
    ss = composite_generator_loss(clean, out, LossWeights(0, (0, 0, 0), 1, 0, "ms_ssim"))
    np.testing.assert_allclose(res.d_output, 2.0 * l1.d_output + 3.0 * ss.d_output, atol=1e-9)
    assert res.total == pytest.approx(0.7 * res.adv + 3.0 * ss.total + 2.0 * l1.total, abs=1e-9)
    assert res.ssim == pytest.approx(-quality.ms_ssim(clean[0], out[0], quality.MsSsimParams.fit(64, 64)) / 2
                                     - quality.ms_ssim(clean[1], out[1], quality.MsSsimParams.fit(64, 64)) / 2)


def test_loss_weights_validation():
    with pytest.raises(ArgumentError):
        LossWeights(ssim_variant="l2")
    with pytest.raises(ArgumentError):
        LossWeights(0, (0, 0, 0), 0, 0)
    with pytest.raises(ArgumentError):
        LossWeights(lambda_l1=-1)


# --- adam ---------------------------------------------------------------------


def test_adam_first_step(rng):
    p = {"w": rng.standard_normal(10)}
    g = {"w": rng.standard_normal(10)}
    before = p["w"].copy()
    adam_step(p, g, AdamState(), lr=0.01)
    step = np.abs(p["w"] - before)
    assert np.all(step >= 0.9999 * 0.01) and np.all(step <= 0.01)
    np.testing.assert_array_equal(np.sign(before - p["w"]), np.sign(g["w"]))


def test_adam_zero_grad_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState())
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_quadratic_convergence():
    p = {"x": np.array([1.0])}
    state = AdamState()
    xs = [1.0]
    for _ in range(100):
        adam_step(p, {"x": 2 * p["x"]}, state, lr=0.01)
        xs.append(abs(p["x"][0]))
    assert all(b < a for a, b in zip(xs, xs[1:]))
    assert xs[-1] < 0.5


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())


# --- training -----------------------------------------------------------------


def single_pair(size=64):
    rng = np.random.default_rng(0)
    clean = smokesim.tissue_scene(size, rng)
    t = smokesim.noise_to_transmission(smokesim.perlin_noise(size, size, smokesim.SmokeParams(seed=1)), "medium")
    return smokesim.composite_smoke(clean, t, 0.9), clean


def test_train_smoke_run(small_dataset):
    cfg = TrainConfig(epochs=1, batch_size=4, image_size=32, seed=0)
    from desmoke.smokesim import DatasetManifest

    eight = DatasetManifest(small_dataset.root, small_dataset.entries[:8])
    ckpt, rows = train(eight, TINY, LossWeights(lambda_perc=(1, 1)), cfg)
    assert len(rows) == 1 and ckpt.step == 2
    assert all(math.isfinite(rows[0][k]) for k in trainmod.LOG_COLUMNS)


def test_train_deterministic(small_dataset):
    cfg = TrainConfig(epochs=1, image_size=32, seed=5)
    w = LossWeights(lambda_perc=(1, 1))
    _, a = train(small_dataset, TINY, w, cfg)
    _, b = train(small_dataset, TINY, w, cfg)
    assert {k: v for k, v in a[0].items() if k != "seconds"} == {k: v for k, v in b[0].items() if k != "seconds"}


def test_train_empty_dataset(tmp_path):
    from desmoke.smokesim import DatasetManifest

    with pytest.raises(ArgumentError):
        train(DatasetManifest(tmp_path, []), TINY)


def test_train_divergence(monkeypatch):
    smoky, clean = single_pair(32)
    monkeypatch.setattr(trainmod, "train_step", lambda *a, **k: {"loss_D": float("nan"), "loss_G_adv": 0.0,
                                                                  "loss_perc": 0.0, "loss_ssim": 0.0, "loss_l1": 0.0})
    with pytest.raises(DivergenceError, match="epoch 1, batch 0"):
        train(None, TINY, config=TrainConfig(epochs=1, image_size=32), pairs=((smoky[None], clean[None]),) * 2)


def test_overfit_single_pair():
    smoky, clean = single_pair()
    pairs = ((smoky[None], clean[None]),) * 2
    cfg = TrainConfig(epochs=20, batch_size=1, learning_rate=2e-3, seed=0)
    _, rows = train(None, NetworkSpec(), L1_ONLY, cfg, pairs=pairs)
    assert rows[-1]["loss_l1"] < 0.05


@pytest.fixture(scope="module")
def overfit_ckpt():
    # longer than the 20-epoch overfit so eval-mode batch-norm statistics settle
    smoky, clean = single_pair()
    cfg = TrainConfig(epochs=100, batch_size=1, learning_rate=1e-3, seed=0)
    ckpt, _ = train(None, NetworkSpec(), L1_ONLY, cfg, pairs=((smoky[None], clean[None]),) * 2)
    return ckpt, smoky, clean


def test_infer_capacity_and_determinism(overfit_ckpt):
    ckpt, smoky, clean = overfit_ckpt
    out = infer(ckpt, smoky)
    assert out.shape == smoky.shape
    np.testing.assert_array_equal(out, infer(ckpt, smoky))
    assert quality.rmse(clean, out) < 0.05


def test_infer_other_sizes(overfit_ckpt):
    ckpt, smoky, _ = overfit_ckpt
    img = np.random.default_rng(0).random((3, 50, 90))
    assert infer(ckpt, img).shape == (3, 50, 90)
    with pytest.raises(ShapeError):
        infer(ckpt, np.zeros((1, 64, 64)))


def test_checkpoint_round_trip(tmp_path, overfit_ckpt):
    ckpt, smoky, _ = overfit_ckpt
    path = save_checkpoint(ckpt, tmp_path / "c.dsmk")
    back = load_checkpoint(path)
    assert back.spec == ckpt.spec and back.config == ckpt.config and back.weights == ckpt.weights
    assert back.step == ckpt.step == 100
    for name, arr in ckpt.generator.state().items():
        np.testing.assert_array_equal(back.generator.state()[name], arr.astype("<f4").astype(np.float64))
    assert np.max(np.abs(infer(back, smoky) - infer(ckpt, smoky))) < 1e-3
    save_checkpoint(back, tmp_path / "d.dsmk")
    assert (tmp_path / "c.dsmk").read_bytes() == (tmp_path / "d.dsmk").read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.dsmk").write_bytes(b"not a checkpoint")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "x.dsmk")


def test_train_writes_artifacts(tmp_path):
    smoky, clean = single_pair(32)
    cfg = TrainConfig(epochs=2, batch_size=1, image_size=32)
    train(None, TINY, LossWeights(lambda_perc=(1, 1)), cfg, tmp_path, pairs=((smoky[None], clean[None]),) * 2)
    lines = (tmp_path / "train_log.csv").read_text().splitlines()
    assert lines[0] == ",".join(trainmod.LOG_COLUMNS)
    assert len(lines) == 3
    assert load_checkpoint(tmp_path / "checkpoint.dsmk").epoch == 2
