"""Adversarial, discriminator-feature perceptual, SSIM/MS-SSIM and L1 generator losses."""

from dataclasses import dataclass

import numpy as np

from desmoke import quality
from desmoke.errors import ArgumentError, ShapeError

PROB_CLAMP = 1e-7
SSIM_VARIANTS = ("ssim", "ms_ssim", "none")


@dataclass(frozen=True)
class LossWeights:
    lambda_adv: float = 1.0
    lambda_perc: tuple = (1.0, 1.0, 1.0)
    lambda_ssim: float = 10.0
    lambda_l1: float = 10.0
    ssim_variant: str = "ms_ssim"

    def __post_init__(self):
        if self.ssim_variant not in SSIM_VARIANTS:
            raise ArgumentError(f"ssim_variant must be one of {SSIM_VARIANTS}")
        weights = [self.lambda_adv, self.lambda_ssim, self.lambda_l1, *self.lambda_perc]
        if any(w < 0 for w in weights):
            raise ArgumentError("loss weights must be non-negative")
        if not any(w > 0 for w in weights):
            raise ArgumentError("at least one loss weight must be positive")

    @property
    def uses_ssim(self):
        return self.ssim_variant != "none" and self.lambda_ssim > 0

    @property
    def uses_discriminator(self):
        return self.lambda_adv > 0 or any(w > 0 for w in self.lambda_perc)


def gan_losses(d_real, d_fake):
    """(loss_D, loss_G_adv) from discriminator probabilities, batch-averaged.

    The generator term is the non-saturating -log D(fake).
    """
    d_real = np.clip(np.asarray(d_real, dtype=np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    d_fake = np.clip(np.asarray(d_fake, dtype=np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    loss_d = float(np.mean(-(np.log(d_real) + np.log(1.0 - d_fake)) / 2.0))
    loss_g = float(np.mean(-np.log(d_fake)))
    return loss_d, loss_g


def gan_logit_grads(d_real, d_fake):
    """d loss_D / d logits for (real, fake) batches and d loss_G_adv / d fake logits."""
    n = len(d_fake)
    d_real = np.clip(d_real, PROB_CLAMP, 1 - PROB_CLAMP)
    d_fake = np.clip(d_fake, PROB_CLAMP, 1 - PROB_CLAMP)
    g_real = -(1.0 - d_real) / (2.0 * n)
    g_fake = d_fake / (2.0 * n)
    g_gen = -(1.0 - d_fake) / n
    return g_real, g_fake, g_gen


def perceptual_loss(taps_real, taps_fake, weights):
    """Weighted sum over taps of mean |real - fake| activations, and d loss / d taps_fake."""
    if not (len(taps_real) == len(taps_fake) == len(weights)):
        raise ShapeError(f"{len(taps_real)} real taps, {len(taps_fake)} fake taps, {len(weights)} weights")
    total = 0.0
    grads = []
    for real, fake, w in zip(taps_real, taps_fake, weights):
        if real.shape != fake.shape:
            raise ShapeError(f"tap shape mismatch {real.shape} vs {fake.shape}")
        diff = fake - real
        total += w * float(np.abs(diff).mean())
        grads.append(w * np.sign(diff) / diff.size)
    return total, grads


def _ssim_params_for(shape, variant):
    if variant == "ssim":
        return quality.SsimParams()
    return quality.MsSsimParams.fit(shape[-2], shape[-1])


def batch_similarity(clean, output, variant, grad=True):
    """Batch-mean SSIM or MS-SSIM and its gradient w.r.t. ``output``."""
    params = _ssim_params_for(clean.shape, variant)
    n = clean.shape[0]
    value = 0.0
    g = np.zeros_like(output) if grad else None
    for i in range(n):
        if variant == "ssim":
            value += quality.ssim(clean[i], output[i], params)
            if grad:
                g[i] = quality.ssim_grad(clean[i], output[i], params)
        else:
            v, gi = quality._ms_ssim(clean[i], output[i], params, grad)
            value += v
            if grad:
                g[i] = gi
    if grad:
        g /= n
    return value / n, g


@dataclass
class GeneratorLoss:
    total: float
    adv: float
    perc: float
    ssim: float  # the -similarity loss term, unweighted
    l1: float
    d_output: np.ndarray  # gradient of the pixel-space terms w.r.t. the generator output
    d_logits: np.ndarray  # gradient w.r.t. discriminator logits of the fake pairs
    d_taps: list  # gradient w.r.t. discriminator tap activations of the fake pairs


def composite_generator_loss(clean, output, weights, d_fake=None, taps_real=None, taps_fake=None):
    """lambda_adv * adv + sum lambda_perc * perc + lambda_ssim * (-SSIM) + lambda_l1 * L1.

    ``d_fake`` (probabilities) and the tap lists are only needed when the
    adversarial or perceptual weights are non-zero.
    """
    clean = np.asarray(clean, dtype=np.float64)
    output = np.asarray(output, dtype=np.float64)
    if clean.shape != output.shape:
        raise ShapeError(f"clean {clean.shape} vs output {output.shape}")
    d_output = np.zeros_like(output)

    diff = output - clean
    l1 = float(np.abs(diff).mean())
    d_output += weights.lambda_l1 * np.sign(diff) / diff.size

    ssim_term = 0.0
    if weights.ssim_variant != "none":
        sim, g = batch_similarity(clean, output, weights.ssim_variant, grad=weights.lambda_ssim > 0)
        ssim_term = -sim
        if weights.lambda_ssim > 0:
            d_output -= weights.lambda_ssim * g

    adv = perc = 0.0
    d_logits = None
    d_taps = None
    if d_fake is not None:
        adv = gan_losses(np.full_like(d_fake, 0.5), d_fake)[1]
        d_logits = weights.lambda_adv * gan_logit_grads(d_fake, d_fake)[2]
    if taps_real is not None and taps_fake is not None:
        perc, d_taps = perceptual_loss(taps_real, taps_fake, weights.lambda_perc)

    ssim_weight = weights.lambda_ssim if weights.ssim_variant != "none" else 0.0
    total = weights.lambda_adv * adv + perc + ssim_weight * ssim_term + weights.lambda_l1 * l1
    return GeneratorLoss(total, adv, perc, ssim_term, l1, d_output, d_logits, d_taps)
