"""Lite-scale PHVGG, PHResNet and PHSED builders parameterised by n."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .algebra import make_algebra
from .errors import ShapeMismatch, SpecInvalid
from .layers import BatchNorm2d, Module, PHCConv, PHMLinear, param_count
from .tensor import Tensor

FAMILIES = ("phvgg", "phresnet", "phsed")

_DEFAULTS = {
    "phvgg": dict(stage_widths=(24, 72, 216, 648), depths=(1, 1, 2, 2), classifier_widths=(648, 516),
                  input_size=(16, 16)),
    "phresnet": dict(stage_widths=(60, 120, 240, 516), depths=(2, 2, 2, 2), stem_width=60,
                     input_size=(8, 8)),
    "phsed": dict(stage_widths=(16, 32, 64, 128), depths=(1, 1, 1, 1), input_size=(32, 16),
                  pool_sizes=((1, 4), (1, 2), (1, 2), (1, 1)), dropout=0.3, gru_hidden=64, fc_hidden=64),
}


@dataclass
class ModelSpec:
    """Declarative description of a lite network.

    ``input_size`` is (H, W) for images and (frames, mel bins) for SED features.
    ``pool_sizes`` applies to phsed only and is given in (frames, mel) order.
    """

    family: str
    n: int
    stage_widths: tuple
    depths: tuple
    num_classes: int
    input_channels: int
    channel_policy: str = "natural"
    batchnorm: bool = True
    dropout: float = 0.0
    stem_width: Optional[int] = None
    classifier_widths: tuple = ()
    input_size: tuple = (8, 8)
    pool_sizes: tuple = ()
    gru_hidden: int = 64
    fc_hidden: int = 64

    @classmethod
    def lite(cls, family: str, n: int, num_classes: int, input_channels: int, **overrides) -> "ModelSpec":
        if family not in _DEFAULTS:
            raise SpecInvalid(f"unknown model family {family!r}")
        kwargs = dict(_DEFAULTS[family])
        kwargs.update(overrides)
        return cls(family=family, n=n, num_classes=num_classes, input_channels=input_channels, **kwargs)

    @property
    def padded_input_channels(self) -> int:
        if self.channel_policy == "zero_pad_to_n":
            return -(-self.input_channels // self.n) * self.n
        return self.input_channels

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise SpecInvalid(f"unknown model family {self.family!r}")
        if self.n < 1:
            raise SpecInvalid("n must be >= 1")
        if len(self.stage_widths) != len(self.depths) or not self.stage_widths:
            raise SpecInvalid("stage_widths and depths must be non-empty and aligned")
        if any(d < 1 for d in self.depths):
            raise SpecInvalid("every stage needs depth >= 1")
        widths = list(self.stage_widths) + ([self.stem_width] if self.stem_width else [])
        widths += list(self.classifier_widths)
        for w in widths:
            if w % self.n:
                raise SpecInvalid(f"width {w} is not divisible by n={self.n}")
        if self.channel_policy not in ("natural", "zero_pad_to_n"):
            raise SpecInvalid(f"unknown channel policy {self.channel_policy!r}")
        if self.channel_policy == "natural" and self.input_channels % self.n:
            raise SpecInvalid(f"input_channels={self.input_channels} not divisible by n={self.n} "
                              "and no padding directive given")
        if self.num_classes < 2:
            raise SpecInvalid("num_classes must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise SpecInvalid("dropout must lie in [0, 1)")
        if self.family == "phsed":
            if len(self.pool_sizes) != len(self.stage_widths):
                raise SpecInvalid("phsed needs one pool size per stage")
            frames, mels = self.input_size
            for ph, pw in self.pool_sizes:
                if frames % ph or mels % pw:
                    raise SpecInvalid(f"pool ({ph},{pw}) does not tile {frames}x{mels}")
                frames, mels = frames // ph, mels // pw

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("stage_widths", "depths", "classifier_widths", "input_size"):
            d[key] = list(d[key])
        d["pool_sizes"] = [list(p) for p in self.pool_sizes]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        for key in ("stage_widths", "depths", "classifier_widths", "input_size"):
            if key in d:
                d[key] = tuple(d[key])
        if "pool_sizes" in d:
            d["pool_sizes"] = tuple(tuple(p) for p in d["pool_sizes"])
        return cls(**d)


class _Factory:
    """Hands out layers with per-layer algebras drawn from one seeded stream."""

    def __init__(self, n: int, algebra_mode: str, rng: np.random.Generator):
        self.n = n
        self.algebra_mode = algebra_mode
        self.rng = rng

    def algebra(self, n: Optional[int] = None):
        n = self.n if n is None else n
        if n == self.n:
            mode = self.algebra_mode
        else:
            mode = "learnable" if self.algebra_mode == "learnable" else "real"
        return make_algebra(n, mode, seed=int(self.rng.integers(2 ** 31)))

    def conv(self, s, d, k=3, stride=1, padding=1, bias=False) -> PHCConv:
        return PHCConv(s, d, k, self.algebra(), stride=stride, padding=padding, bias=bias, rng=self.rng)

    def linear(self, fin, fout, n=None) -> PHMLinear:
        return PHMLinear(fin, fout, self.algebra(n), rng=self.rng)


class ConvUnit(Module):
    """PHC conv followed by optional batch norm and ReLU."""

    def __init__(self, conv: PHCConv, bn: Optional[BatchNorm2d], act: bool = True):
        self.conv = conv
        self.bn = bn
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv(x)
        if self.bn is not None:
            y = self.bn(y)
        return ops.relu(y) if self.act else y


class ResidualBlock(Module):
    """``relu(F(x) + skip(x))`` with ``F = BN(PHC(relu(BN(PHC(x)))))``."""

    def __init__(self, conv1: PHCConv, conv2: PHCConv, bn1=None, bn2=None, proj: Optional[ConvUnit] = None):
        self.conv1 = conv1
        self.bn1 = bn1
        self.conv2 = conv2
        self.bn2 = bn2
        self.proj = proj

    @classmethod
    def build(cls, fac: _Factory, cin: int, cout: int, stride: int = 1, batchnorm: bool = True,
              projection: Optional[bool] = None) -> "ResidualBlock":
        bias = not batchnorm
        conv1 = fac.conv(cin, cout, 3, stride, 1, bias)
        bn1 = BatchNorm2d(cout) if batchnorm else None
        conv2 = fac.conv(cout, cout, 3, 1, 1, bias)
        bn2 = BatchNorm2d(cout) if batchnorm else None
        if projection is None:
            projection = stride != 1 or cin != cout
        proj = None
        if projection:
            proj = ConvUnit(fac.conv(cin, cout, 1, stride, 0, bias), BatchNorm2d(cout) if batchnorm else None,
                            act=False)
        return cls(conv1, conv2, bn1, bn2, proj)

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv1(x)
        if self.bn1 is not None:
            y = self.bn1(y)
        y = ops.relu(y)
        y = self.conv2(y)
        if self.bn2 is not None:
            y = self.bn2(y)
        skip = self.proj(x) if self.proj is not None else x
        if skip.shape != y.shape:
            raise ShapeMismatch(f"residual {y.shape} and skip {skip.shape} disagree; configure a projection")
        return ops.relu(ops.add(y, skip))


def residual_block_forward(x: Tensor, block: ResidualBlock) -> Tensor:
    return block.forward(x)


class GruCell(Module):
    """Unidirectional gated recurrent cell.

    z = sig(x Wz + h Uz + bz), r = sig(x Wr + h Ur + br),
    c = tanh(x Wc + (r*h) Uc + bc), h' = (1-z)*h + z*c
    """

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator):
        self.input_size = input_size
        self.hidden_size = hidden_size
        bound = 1.0 / np.sqrt(hidden_size)

        def u(*shape):
            return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

        self.w_z, self.w_r, self.w_c = u(input_size, hidden_size), u(input_size, hidden_size), u(input_size, hidden_size)
        self.u_z, self.u_r, self.u_c = u(hidden_size, hidden_size), u(hidden_size, hidden_size), u(hidden_size, hidden_size)
        self.b_z, self.b_r, self.b_c = u(hidden_size), u(hidden_size), u(hidden_size)

    def initial_state(self, batch: int) -> "GruState":
        return GruState(Tensor(np.zeros((batch, self.hidden_size))))

    def step(self, xz: Tensor, xr: Tensor, xc: Tensor, h: Tensor) -> Tensor:
        """One update from precomputed input projections."""
        z = ops.sigmoid(ops.add(ops.add(xz, ops.matmul(h, self.u_z)), self.b_z))
        r = ops.sigmoid(ops.add(ops.add(xr, ops.matmul(h, self.u_r)), self.b_r))
        c = ops.tanh(ops.add(ops.add(xc, ops.matmul(ops.mul(r, h), self.u_c)), self.b_c))
        return ops.add(h, ops.mul(z, ops.sub(c, h)))

    def forward(self, x_t: Tensor, state: "GruState") -> tuple:
        if x_t.ndim != 2 or x_t.shape[1] != self.input_size:
            raise ShapeMismatch(f"expected [B, {self.input_size}], got {x_t.shape}")
        if state.hidden.shape != (x_t.shape[0], self.hidden_size):
            raise ShapeMismatch(f"state {state.hidden.shape} does not match batch {x_t.shape[0]}")
        h = self.step(ops.matmul(x_t, self.w_z), ops.matmul(x_t, self.w_r), ops.matmul(x_t, self.w_c),
                      state.hidden)
        return h, GruState(h)

    def sequence(self, xs: Tensor) -> Tensor:
        """Run over xs [B, T, F] from a zero state; returns hidden states [B, T, H]."""
        B, T, _ = xs.shape
        pz, pr, pc = ops.matmul(xs, self.w_z), ops.matmul(xs, self.w_r), ops.matmul(xs, self.w_c)
        h = self.initial_state(B).hidden
        outs = []
        for t in range(T):
            h = self.step(ops.select(pz, t), ops.select(pr, t), ops.select(pc, t), h)
            outs.append(h)
        return ops.stack(outs, axis=1)


@dataclass
class GruState:
    hidden: Tensor


def gru_cell_forward(x_t: Tensor, state: GruState, params: GruCell) -> tuple:
    return params.forward(x_t, state)


class PHVGG(Module):
    def __init__(self, spec: ModelSpec, fac: _Factory):
        self.spec = spec
        units = []
        cin = spec.padded_input_channels
        for width, depth in zip(spec.stage_widths, spec.depths):
            for _ in range(depth):
                units.append(ConvUnit(fac.conv(cin, width, bias=not spec.batchnorm),
                                      BatchNorm2d(width) if spec.batchnorm else None))
                cin = width
        self.units = units
        self.stage_ends = list(np.cumsum(spec.depths) - 1)
        h, w = spec.input_size
        scale = 2 ** len(spec.stage_widths)
        if h % scale or w % scale:
            raise SpecInvalid(f"input {h}x{w} must be divisible by {scale}")
        fin = cin * (h // scale) * (w // scale)
        fcs = []
        for width in spec.classifier_widths:
            fcs.append(fac.linear(fin, width))
            fin = width
        self.fcs = fcs
        head_n = spec.n if spec.num_classes % spec.n == 0 and fin % spec.n == 0 else 1
        self.head = fac.linear(fin, spec.num_classes, head_n)
        self.rng = np.random.default_rng(int(fac.rng.integers(2 ** 31)))

    def forward(self, x: Tensor) -> Tensor:
        for i, unit in enumerate(self.units):
            x = unit(x)
            if i in self.stage_ends:
                x = ops.pool2d("max", x, (2, 2))
        x = ops.flatten(x)
        for fc in self.fcs:
            x = ops.relu(fc(x))
            x = ops.dropout(x, self.spec.dropout, self.rng, self.training)
        return self.head(x)


class PHResNet(Module):
    def __init__(self, spec: ModelSpec, fac: _Factory):
        self.spec = spec
        stem_w = spec.stem_width or spec.stage_widths[0]
        self.stem = ConvUnit(fac.conv(spec.padded_input_channels, stem_w, bias=not spec.batchnorm),
                             BatchNorm2d(stem_w) if spec.batchnorm else None)
        blocks = []
        cin = stem_w
        for i, (width, depth) in enumerate(zip(spec.stage_widths, spec.depths)):
            for j in range(depth):
                stride = 2 if (i > 0 and j == 0) else 1
                blocks.append(ResidualBlock.build(fac, cin, width, stride, spec.batchnorm))
                cin = width
        self.blocks = blocks
        head_n = spec.n if spec.num_classes % spec.n == 0 else 1
        self.head = fac.linear(cin, spec.num_classes, head_n)

    def forward(self, x: Tensor) -> Tensor:
        x = self.stem(x)
        for block in self.blocks:
            x = block(x)
        x = ops.flatten(ops.pool2d("global_avg", x))
        return self.head(x)


class PHSED(Module):
    """PHC conv stack, gated recurrent cell and fully connected head with sigmoid output.

    Input features [B, C, frames, mels]; output probabilities [B, frames, classes].
    """

    def __init__(self, spec: ModelSpec, fac: _Factory):
        self.spec = spec
        units = []
        cin = spec.padded_input_channels
        for width, depth in zip(spec.stage_widths, spec.depths):
            for _ in range(depth):
                units.append(ConvUnit(fac.conv(cin, width, bias=not spec.batchnorm),
                                      BatchNorm2d(width) if spec.batchnorm else None))
                cin = width
        self.units = units
        self.stage_ends = list(np.cumsum(spec.depths) - 1)
        frames, mels = spec.input_size
        for _, pw in spec.pool_sizes:
            mels //= pw
        self.gru = GruCell(cin * mels, spec.gru_hidden, fac.rng)
        self.fc1 = fac.linear(spec.gru_hidden, spec.fc_hidden, 1)
        self.fc2 = fac.linear(spec.fc_hidden, spec.num_classes, 1)
        self.rng = np.random.default_rng(int(fac.rng.integers(2 ** 31)))

    def forward(self, x: Tensor) -> Tensor:
        stage = 0
        for i, unit in enumerate(self.units):
            x = unit(x)
            if i in self.stage_ends:
                x = ops.pool2d("max", x, self.spec.pool_sizes[stage])
                x = ops.dropout(x, self.spec.dropout, self.rng, self.training)
                stage += 1
        B, C, T, M = x.shape
        seq = ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (B, T, C * M))
        hs = self.gru.sequence(seq)
        flat = ops.reshape(hs, (B * T, self.spec.gru_hidden))
        y = ops.relu(self.fc1(flat))
        y = ops.dropout(y, self.spec.dropout, self.rng, self.training)
        y = ops.sigmoid(self.fc2(y))
        return ops.reshape(y, (B, T, self.spec.num_classes))


_BUILDERS = {"phvgg": PHVGG, "phresnet": PHResNet, "phsed": PHSED}


def build_model(spec: ModelSpec, algebra_mode: str = "learnable", seed: int = 0) -> Module:
    """Instantiate a model; ``algebra_mode`` is ``"learnable"`` or a preset family name."""
    spec.validate()
    fac = _Factory(spec.n, algebra_mode, np.random.default_rng(seed))
    return _BUILDERS[spec.family](spec, fac)


@dataclass
class ModelParamReport:
    exact: int
    dense_equivalent: int
    cubic_terms: int
    layers: list = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return self.exact / self.dense_equivalent


def hypercomplex_param_report(model: Module) -> ModelParamReport:
    """Weight counts of every PHC/PHM layer; batch norm and biases are excluded."""
    exact = dense = cubic = 0
    rows = []
    for m in model.modules():
        if isinstance(m, (PHCConv, PHMLinear)):
            pc = param_count(m, include_bias=False)
            exact += pc.exact
            dense += pc.dense_equivalent
            cubic += m.n ** 3
            rows.append(pc)
    return ModelParamReport(exact, dense, cubic, rows)


def count_tensor_scalars(model: Module, learnable_only: bool = True) -> int:
    it = model.named_parameters() if learnable_only else model.named_tensors()
    return sum(t.size for _, t in it)
