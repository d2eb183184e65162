"""Numpy network kit: layers with backward passes, U-Net/discriminator, losses, ADAM, training."""

from desmoke.neuro.layers import (
    conv2d,
    conv2d_backward,
    deconv2d,
    deconv2d_backward,
    batchnorm,
    batchnorm_backward,
    leaky_relu,
    leaky_relu_backward,
)
from desmoke.neuro.losses import LossWeights, composite_generator_loss, gan_losses, perceptual_loss
from desmoke.neuro.nets import (
    Discriminator,
    Generator,
    LayerSpec,
    NetworkSpec,
    discriminator_forward,
    generator_forward,
)
from desmoke.neuro.optim import Adam, AdamState, adam_step
from desmoke.neuro.train import Checkpoint, TrainConfig, infer, load_checkpoint, save_checkpoint, train
