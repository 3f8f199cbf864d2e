"""U-Net refiner and 5-layer PatchGAN discriminator."""
from typing import Any, Dict, List

import numpy as np

from ..errors import ShapeError
from .layers import Activation, Conv2d, InstanceNorm2d, LayerSpec, Module, Sequential, Upsample
from .tensor import Tensor, concat, conv_output_size

LEAKY_SLOPE = 0.2
DISC_STRIDES = (2, 2, 2, 1, 1)


def _dtype(precision: str):
    if precision not in ("float64", "float32"):
        raise ShapeError(f"precision must be float64 or float32, got {precision!r}")
    return np.float64 if precision == "float64" else np.float32


class UNetGenerator(Module):
    """Stem conv, ``depth`` stride-2 encoder stages, ``depth`` upsample+conv
    decoder stages fed by skip concatenation, and a 1x1 sigmoid head.

    Encoder stage ``i`` has ``base_channels * 2**i`` channels.
    """

    name = "generator"

    def __init__(
        self, depth: int = 3, base_channels: int = 8, in_channels: int = 4, seed: int = 0, precision: str = "float64"
    ) -> None:
        if depth < 1 or base_channels < 1:
            raise ShapeError("generator depth and base_channels must be >= 1")
        self.depth = depth
        self.base_channels = base_channels
        self.in_channels = in_channels
        self.precision = precision
        dtype = _dtype(precision)
        rng = np.random.default_rng(seed)
        widths = [base_channels * 2 ** i for i in range(depth + 1)]

        self.stem = Sequential([
            Conv2d(in_channels, widths[0], 3, 1, 1, rng, dtype),
            Activation("leaky_relu", LEAKY_SLOPE),
        ])
        self.encoder = [
            Sequential([
                Conv2d(widths[i], widths[i + 1], 4, 2, 1, rng, dtype),
                InstanceNorm2d(widths[i + 1], dtype=dtype),
                Activation("leaky_relu", LEAKY_SLOPE),
            ])
            for i in range(depth)
        ]
        self.upsample = Upsample(2)
        self.decoder = [
            Sequential([
                Conv2d(widths[i + 1] + widths[i], widths[i], 3, 1, 1, rng, dtype),
                InstanceNorm2d(widths[i], dtype=dtype),
                Activation("relu"),
            ])
            for i in reversed(range(depth))
        ]
        self.head = Sequential([Conv2d(widths[0], 1, 1, 1, 0, rng, dtype), Activation("sigmoid")])

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"generator expects N x {self.in_channels} x H x W input, got {x.shape}")
        factor = 2 ** self.depth
        if x.shape[2] % factor or x.shape[3] % factor:
            raise ShapeError(f"input side {x.shape[2]}x{x.shape[3]} not divisible by {factor}")
        h = self.stem(x)
        skips = [h]
        for stage in self.encoder:
            h = stage(h)
            skips.append(h)
        for level, stage in enumerate(self.decoder):
            h = stage(concat([self.upsample(h), skips[-2 - level]], axis=1))
        return self.head(h)

    def _modules(self) -> List[Module]:
        return [self.stem, *self.encoder, *self.decoder, self.head]

    def parameters(self) -> List[Tensor]:
        return [p for m in self._modules() for p in m.parameters()]

    def specs(self) -> List[LayerSpec]:
        out = list(self.stem.specs())
        for stage in self.encoder:
            out.extend(stage.specs())
        for stage in self.decoder:
            out.extend(self.upsample.specs())
            out.append(LayerSpec("concat"))
            out.extend(stage.specs())
        out.extend(self.head.specs())
        return out

    def config(self) -> Dict[str, Any]:
        return {
            "kind": "unet",
            "depth": self.depth,
            "base_channels": self.base_channels,
            "in_channels": self.in_channels,
            "precision": self.precision,
        }


class PatchDiscriminator(Module):
    """Five 4x4 convolutions with strides (2, 2, 2, 1, 1) producing a
    sigmoid score per receptive-field patch."""

    name = "discriminator"

    def __init__(self, base_channels: int = 8, in_channels: int = 4, seed: int = 0, precision: str = "float64") -> None:
        self.base_channels = base_channels
        self.in_channels = in_channels
        self.precision = precision
        dtype = _dtype(precision)
        rng = np.random.default_rng(seed)
        widths = [in_channels] + [base_channels * 2 ** i for i in range(4)] + [1]
        layers: List[Module] = []
        for i, stride in enumerate(DISC_STRIDES):
            layers.append(Conv2d(widths[i], widths[i + 1], 4, stride, 1, rng, dtype))
            if i == len(DISC_STRIDES) - 1:
                layers.append(Activation("sigmoid"))
                break
            if i > 0:
                layers.append(InstanceNorm2d(widths[i + 1], dtype=dtype))
            layers.append(Activation("leaky_relu", LEAKY_SLOPE))
        self.body = Sequential(layers)

    def score_shape(self, height: int, width: int):
        for stride in DISC_STRIDES:
            height = conv_output_size(height, 4, stride, 1)
            width = conv_output_size(width, 4, stride, 1)
        return height, width

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"discriminator expects N x {self.in_channels} x H x W input, got {x.shape}")
        sh, sw = self.score_shape(x.shape[2], x.shape[3])
        if sh < 1 or sw < 1:
            raise ShapeError(f"input {x.shape[2]}x{x.shape[3]} smaller than the discriminator receptive field")
        return self.body(x)

    def parameters(self) -> List[Tensor]:
        return self.body.parameters()

    def specs(self) -> List[LayerSpec]:
        return self.body.specs()

    def config(self) -> Dict[str, Any]:
        return {
            "kind": "patchgan",
            "base_channels": self.base_channels,
            "in_channels": self.in_channels,
            "precision": self.precision,
        }


def build_generator(
    depth: int = 3, base_channels: int = 8, in_channels: int = 4, seed: int = 0, precision: str = "float64"
) -> UNetGenerator:
    return UNetGenerator(depth, base_channels, in_channels, seed, precision)


def build_discriminator(
    base_channels: int = 8, in_channels: int = 4, seed: int = 0, precision: str = "float64"
) -> PatchDiscriminator:
    return PatchDiscriminator(base_channels, in_channels, seed, precision)


def build_network(config: Dict[str, Any]) -> Module:
    cfg = dict(config)
    kind = cfg.pop("kind")
    if kind == "unet":
        return build_generator(**cfg)
    if kind == "patchgan":
        return build_discriminator(**cfg)
    raise ShapeError(f"unknown network kind {kind!r}")
