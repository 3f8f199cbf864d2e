from .checkpoint import Checkpoint, file_sha256, load_checkpoint, save_checkpoint
from .layers import LayerSpec, Module
from .networks import PatchDiscriminator, UNetGenerator, build_discriminator, build_generator
from .optim import Adam, AdamState, adam_step
from .tensor import (
    Tensor,
    bce_loss,
    concat,
    conv2d,
    instance_norm,
    leaky_relu,
    no_grad,
    relu,
    sigmoid,
    upsample_nearest,
)

__all__ = [
    "Adam",
    "AdamState",
    "Checkpoint",
    "LayerSpec",
    "Module",
    "PatchDiscriminator",
    "Tensor",
    "UNetGenerator",
    "adam_step",
    "bce_loss",
    "build_discriminator",
    "build_generator",
    "concat",
    "conv2d",
    "file_sha256",
    "instance_norm",
    "leaky_relu",
    "load_checkpoint",
    "no_grad",
    "relu",
    "save_checkpoint",
    "sigmoid",
    "upsample_nearest",
]
