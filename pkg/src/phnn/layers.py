"""PHC convolution, PHM linear layers, batch norm and exact parameter accounting."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional, Union

import numpy as np

from . import ops
from .algebra import AlgebraSpec, make_algebra, validate
from .errors import DivisibilityError, ShapeMismatch, SpecInvalid
from .tensor import Tensor


class Module:
    """Minimal container: tensors and sub-modules are discovered from attributes."""

    training: bool = True

    def _members(self) -> Iterator[tuple]:
        for name, value in vars(self).items():
            if isinstance(value, (Tensor, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Tensor, Module)):
                        yield f"{name}.{i}", item

    def named_tensors(self, prefix: str = "") -> Iterator[tuple]:
        """Every stored tensor (parameters and buffers) in a stable order."""
        for name, value in self._members():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_tensors(full + ".")
            else:
                yield full, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for name, t in self.named_tensors(prefix):
            if t.requires_grad:
                yield name, t

    def parameters(self) -> list:
        return [t for _, t in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._members():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _check_divisible(n: int, **counts: int) -> None:
    for label, value in counts.items():
        if value % n:
            raise DivisibilityError(f"n={n} does not divide {label}={value}")


class PHCConv(Module):
    """Parameterized hypercomplex convolution with weight ``H = sum_i A_i (x) F_i``.

    ``filters`` stacks the n blocks F_i as [n, d/n, s/n, k, k] (or [n, d/n, s/n, k]
    for ``dims=1``).  H is synthesised on every forward call.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, algebra: AlgebraSpec,
                 stride: int = 1, padding: int = 0, bias: bool = True, dims: int = 2,
                 rng: Optional[np.random.Generator] = None):
        n = algebra.n
        _check_divisible(n, in_channels=in_channels, out_channels=out_channels)
        validate(algebra)
        if dims not in (1, 2):
            raise SpecInvalid(f"dims must be 1 or 2, got {dims}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n = n
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.dims = dims
        self.algebra = algebra.weights
        self.algebra_spec = algebra
        spatial = (kernel_size,) * dims
        fan_in = (in_channels // n) * kernel_size ** dims
        std = np.sqrt(2.0 / fan_in)
        self.filters = Tensor(rng.normal(0.0, std, size=(n, out_channels // n, in_channels // n, *spatial)),
                              requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True) if bias else None

    def build_weight(self) -> Tensor:
        return ops.kron_sum(self.algebra, self.filters)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != self.dims + 2 or x.shape[1] != self.in_channels:
            raise ShapeMismatch(f"expected {self.in_channels} input channels, got input {x.shape}")
        conv = ops.conv2d if self.dims == 2 else ops.conv1d
        return conv(x, self.build_weight(), self.bias, self.stride, self.padding)

    def config(self) -> dict:
        return {"in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel_size": self.kernel_size, "stride": self.stride, "padding": self.padding,
                "dims": self.dims, "bias": self.bias is not None, "algebra": self.algebra_spec.to_config()}


class PHMLinear(Module):
    """Parameterized hypercomplex multiplication: ``y = x H^T + b`` with ``H = sum_i A_i (x) W_i``."""

    def __init__(self, in_features: int, out_features: int, algebra: AlgebraSpec, bias: bool = True,
                 rng: Optional[np.random.Generator] = None):
        n = algebra.n
        _check_divisible(n, in_features=in_features, out_features=out_features)
        validate(algebra)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n = n
        self.in_features = in_features
        self.out_features = out_features
        self.algebra = algebra.weights
        self.algebra_spec = algebra
        std = np.sqrt(2.0 / (in_features // n))
        self.blocks = Tensor(rng.normal(0.0, std, size=(n, out_features // n, in_features // n)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True) if bias else None

    def build_weight(self) -> Tensor:
        return ops.kron_sum(self.algebra, self.blocks)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeMismatch(f"expected [B, {self.in_features}], got {x.shape}")
        return ops.linear(x, self.build_weight(), self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = ops.BN_MOMENTUM, eps: float = ops.BN_EPS):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.weight = Tensor(np.ones(channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels))
        self.running_var = Tensor(np.ones(channels))

    def forward(self, x: Tensor) -> Tensor:
        return ops.batchnorm2d(x, self.weight, self.bias, self.running_mean.data, self.running_var.data,
                               self.training, self.momentum, self.eps)


def phc_build_weight(layer: PHCConv) -> Tensor:
    return layer.build_weight()


def phc_forward(layer: PHCConv, x: Tensor) -> Tensor:
    return layer.forward(x)


def phm_forward(layer: PHMLinear, x: Tensor) -> Tensor:
    return layer.forward(x)


@dataclass(frozen=True)
class ParamCount:
    exact: int
    dense_equivalent: int

    @property
    def ratio(self) -> float:
        return self.exact / self.dense_equivalent


def param_count(layer: Union[PHCConv, PHMLinear], include_bias: bool = True) -> ParamCount:
    """``n^3 + s*d*k^dims/n`` learnable scalars against the dense ``s*d*k^dims``."""
    n = layer.n
    if isinstance(layer, PHCConv):
        dense = layer.in_channels * layer.out_channels * layer.kernel_size ** layer.dims
    else:
        dense = layer.in_features * layer.out_features
    extra = 0
    if include_bias and layer.bias is not None:
        extra = layer.bias.size
    return ParamCount(exact=n ** 3 + dense // n + extra, dense_equivalent=dense + extra)


def from_standard_conv(s: int, d: int, k: int, stride: int = 1, padding: int = 0, n: int = 1,
                       algebra_mode: str = "learnable", seed: int = 0, bias: bool = True,
                       dims: int = 2) -> PHCConv:
    """Drop-in PHC replacement for a dense ``s -> d`` convolution with kernel k.

    ``algebra_mode`` is ``"learnable"`` or a preset family name.
    """
    _check_divisible(n, s=s, d=d)
    rng = np.random.default_rng(seed)
    algebra = make_algebra(n, algebra_mode, seed=int(rng.integers(2 ** 31)))
    return PHCConv(s, d, k, algebra, stride=stride, padding=padding, bias=bias, dims=dims, rng=rng)
