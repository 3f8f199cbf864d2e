from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, conv2d, instance_norm, leaky_relu, sigmoid, upsample_nearest

INIT_STD = 0.02


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | upsample | activation | normalization | concat
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    in_channels: int = 0
    out_channels: int = 0
    activation: str = ""
    slope: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class Module(ABC):
    name: str = "module"

    @abstractmethod
    def forward(self, x: Tensor) -> Tensor:
        ...

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def parameters(self) -> List[Tensor]:
        return []

    def specs(self) -> List[LayerSpec]:
        return []

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class Conv2d(Module):
    name = "conv"

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        stride: int = 1,
        padding: int = 0,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float64,
    ) -> None:
        rng = rng or np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        shape = (out_channels, in_channels, kernel, kernel)
        self.weight = Tensor(rng.normal(0.0, INIT_STD, shape).astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self) -> List[Tensor]:
        return [self.weight, self.bias]

    def specs(self) -> List[LayerSpec]:
        return [LayerSpec("conv", self.kernel, self.stride, self.padding, self.in_channels, self.out_channels)]


class InstanceNorm2d(Module):
    name = "normalization"

    def __init__(self, channels: int, eps: float = 1e-5, dtype=np.float64) -> None:
        self.channels = channels
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return instance_norm(x, self.gamma, self.beta, self.eps)

    def parameters(self) -> List[Tensor]:
        return [self.gamma, self.beta]

    def specs(self) -> List[LayerSpec]:
        return [LayerSpec("normalization", in_channels=self.channels, out_channels=self.channels)]


class Activation(Module):
    name = "activation"

    def __init__(self, kind: str, slope: float = 0.0) -> None:
        if kind not in ("relu", "leaky_relu", "sigmoid"):
            raise ShapeError(f"unknown activation {kind!r}")
        self.kind = kind
        self.slope = slope if kind == "leaky_relu" else 0.0

    def forward(self, x: Tensor) -> Tensor:
        if self.kind == "sigmoid":
            return sigmoid(x)
        return leaky_relu(x, self.slope)

    def specs(self) -> List[LayerSpec]:
        return [LayerSpec("activation", activation=self.kind, slope=self.slope)]


class Upsample(Module):
    name = "upsample"

    def __init__(self, factor: int = 2) -> None:
        self.factor = factor

    def forward(self, x: Tensor) -> Tensor:
        return upsample_nearest(x, self.factor)

    def specs(self) -> List[LayerSpec]:
        return [LayerSpec("upsample", kernel=self.factor, stride=self.factor)]


class Sequential(Module):
    name = "sequential"

    def __init__(self, layers: Sequence[Module]) -> None:
        self.layers: Tuple[Module, ...] = tuple(layers)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def parameters(self) -> List[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def specs(self) -> List[LayerSpec]:
        return [s for layer in self.layers for s in layer.specs()]
