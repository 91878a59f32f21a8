"""Central finite-difference gradient oracle and the registry of named gradient checks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .algebra import make_algebra
from .layers import BatchNorm2d, PHCConv, PHMLinear
from .tensor import Tape, Tensor, backward, no_grad

DEFAULT_H = 1e-5


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        return value.item()
    return float(value)


def finite_difference_grad(f: Callable[[Tensor], object], x: Tensor, h: float = DEFAULT_H,
                           indices: Optional[Sequence[int]] = None) -> Tensor:
    """Estimate df/dx by ``(f(x + h e) - f(x - h e)) / 2h`` per coordinate.

    ``x`` is perturbed in place and restored.  When ``indices`` (flat positions)
    is given only those coordinates are estimated; the rest are left at zero.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    flat = x.data.reshape(-1)
    grad = np.zeros_like(flat)
    coords = range(flat.size) if indices is None else indices
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f(x))
            flat[i] = orig - h
            fm = _scalar(f(x))
            flat[i] = orig
            grad[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad.reshape(x.shape))


def rel_error(analytic, numeric) -> float:
    """Max-norm relative discrepancy ``max|a-b| / max(max|a|, max|b|)``."""
    a = np.asarray(analytic.data if isinstance(analytic, Tensor) else analytic, dtype=float)
    b = np.asarray(numeric.data if isinstance(numeric, Tensor) else numeric, dtype=float)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    diff = np.abs(a - b).max(initial=0.0)
    if denom < 1e-300:
        return diff
    return diff / denom


# ---------------------------------------------------------------- check registry

@dataclass
class GradCheckResult:
    name: str
    scope: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error <= self.tolerance


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor], rng: np.random.Generator,
                    max_coords: int = 40, h: float = DEFAULT_H) -> float:
    """Worst relative error between backprop and central differences over every input.

    ``fn(*inputs)`` must return a single-element tensor.  Inputs larger than
    ``max_coords`` are probed on a random subset of coordinates.
    """
    for t in inputs:
        t.grad = None
    with Tape() as tape:
        out = fn(*inputs)
        backward(out, tape)
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if t.size > max_coords:
            idx = np.sort(rng.choice(t.size, size=max_coords, replace=False))
        else:
            idx = np.arange(t.size)
        numeric = finite_difference_grad(lambda _: fn(*inputs), t, h, idx)
        worst = max(worst, rel_error(analytic.reshape(-1)[idx], numeric.data.reshape(-1)[idx]))
    return worst


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    """Random linear functional of ``out`` so no gradient component cancels by symmetry."""
    return ops.total(ops.mul(out, Tensor(weights)))


def _param(rng, *shape, low=None, high=None) -> Tensor:
    if low is None:
        return Tensor(rng.normal(size=shape), requires_grad=True)
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _op_check(forward: Callable[..., Tensor], *shapes, bounds=None) -> Callable:
    """Check builder for an op applied to fresh random inputs of the given shapes."""
    def run(rng):
        inputs = [_param(rng, *s) if bounds is None else _param(rng, *s, low=bounds[0], high=bounds[1])
                  for s in shapes]
        with no_grad():
            probe = forward(*inputs)
        w = rng.normal(size=probe.shape)
        return check_gradients(lambda *xs: _weighted_sum(forward(*xs), w), inputs, rng)
    return run


def _separated(rng, shape) -> Tensor:
    """Distinct values on a grid of spacing 1/size, at least 0.1 from zero (kinks of relu and max)."""
    size = int(np.prod(shape))
    mags = 0.1 + rng.permutation(size) / size
    signs = rng.choice([-1.0, 1.0], size=size)
    return Tensor((signs * mags).reshape(shape), requires_grad=True)


def _nonsmooth_check(forward: Callable[[Tensor], Tensor], shape) -> Callable:
    def run(rng):
        x = _separated(rng, shape)
        with no_grad():
            probe = forward(x)
        w = rng.normal(size=probe.shape)
        return check_gradients(lambda t: _weighted_sum(forward(t), w), [x], rng)
    return run


def _batchnorm_check(rng):
    x, gamma, beta = _param(rng, 4, 3, 3, 3), _param(rng, 3), _param(rng, 3)
    w = rng.normal(size=x.shape)

    def f(x, gamma, beta):
        return _weighted_sum(ops.batchnorm2d(x, gamma, beta, np.zeros(3), np.ones(3), True), w)

    return check_gradients(f, [x, gamma, beta], rng)


def _dropout_check(rng):
    x = _param(rng, 3, 5)
    w = rng.normal(size=x.shape)
    return check_gradients(lambda t: _weighted_sum(ops.dropout(t, 0.4, np.random.default_rng(7)), w), [x], rng)


def _loss_check(kind: str) -> Callable:
    def run(rng):
        if kind == "softmax_cross_entropy":
            pred, target = _param(rng, 5, 4), rng.integers(0, 4, size=5)
        elif kind == "binary_cross_entropy":
            pred, target = _param(rng, 5, 4, low=0.1, high=0.9), rng.uniform(size=(5, 4))
        else:
            pred, target = _param(rng, 5, 4), rng.normal(size=(5, 4))
        return check_gradients(lambda p: ops.loss(kind, p, target), [pred], rng)
    return run


def _layer_check(make: Callable[[np.random.Generator], tuple]) -> Callable:
    """``make(rng)`` returns (module, input); checks input and every parameter."""
    def run(rng):
        module, x = make(rng)
        with no_grad():
            probe = module(x)
        w = rng.normal(size=probe.shape)
        return check_gradients(lambda *_: _weighted_sum(module(x), w), [x, *module.parameters()], rng)
    return run


def _phc(n, dims=2, stride=1, padding=1):
    def make(rng):
        layer = PHCConv(2 * n, n, 3, make_algebra(n, "learnable", seed=int(rng.integers(1000))),
                        stride=stride, padding=padding, dims=dims, rng=rng)
        layer.bias.data[:] = rng.normal(size=layer.bias.shape)
        spatial = (6, 6) if dims == 2 else (7,)
        return layer, _param(rng, 2, 2 * n, *spatial)
    return make


def _phm(rng):
    layer = PHMLinear(6, 9, make_algebra(3, "learnable", seed=3), rng=rng)
    return layer, _param(rng, 4, 6)


def _bn_layer(rng):
    bn = BatchNorm2d(3)
    bn.weight.data[:] = rng.normal(size=3)
    return bn, _param(rng, 4, 3, 2, 2)


def _residual(rng):
    from .models import ResidualBlock, _Factory
    fac = _Factory(2, "learnable", rng)
    return ResidualBlock.build(fac, 2, 4, stride=2), _param(rng, 3, 2, 4, 4)


def _gru_step(rng):
    from .models import GruCell, GruState

    class Step:
        def __init__(self):
            self.cell = GruCell(3, 4, rng)
            self.h0 = GruState(Tensor(rng.normal(size=(2, 4))))

        def parameters(self):
            return self.cell.parameters()

        def __call__(self, x):
            return self.cell(x, self.h0)[0]

    return Step(), _param(rng, 2, 3)


def _gru_unroll(rng):
    from .models import GruCell

    class Unroll:
        def __init__(self):
            self.cell = GruCell(3, 4, rng)

        def parameters(self):
            return self.cell.parameters()

        def __call__(self, xs):
            return self.cell.sequence(xs)

    return Unroll(), _param(rng, 2, 5, 3)


def _model_check(spec_kwargs: dict, input_shape: tuple) -> Callable:
    def run(rng):
        from .models import ModelSpec, build_model
        model = build_model(ModelSpec(**spec_kwargs), seed=int(rng.integers(1000)))
        x = _param(rng, *input_shape)
        with no_grad():
            probe = model(x)
        w = rng.normal(size=probe.shape)
        return check_gradients(lambda *_: _weighted_sum(model(x), w), [x, *model.parameters()], rng,
                               max_coords=12)
    return run


TOL = 1e-5
RECURRENT_TOL = 1e-4

OP_CHECKS = {
    "add": _op_check(ops.add, (3, 4), (3, 4)),
    "add_broadcast": _op_check(ops.add, (3, 4), (4,)),
    "sub": _op_check(ops.sub, (3, 4), (3, 4)),
    "mul": _op_check(ops.mul, (3, 4), (3, 4)),
    "scale": _op_check(lambda a: ops.scale(a, -2.5), (3, 4)),
    "matmul": _op_check(ops.matmul, (3, 4), (4, 5)),
    "matmul_batched": _op_check(ops.matmul, (2, 3, 4), (4, 5)),
    "linear": _op_check(ops.linear, (3, 4), (5, 4), (5,)),
    "kron_block": _op_check(ops.kron_block, (3, 3), (2, 2, 3, 3)),
    "kron_sum": _op_check(ops.kron_sum, (2, 2, 2), (2, 3, 2, 3, 3)),
    "conv2d": _op_check(lambda x, w, b: ops.conv2d(x, w, b, stride=2, padding=1), (2, 3, 5, 6), (4, 3, 3, 3), (4,)),
    "conv1d": _op_check(lambda x, w, b: ops.conv1d(x, w, b, stride=1, padding=1), (2, 3, 7), (4, 3, 3), (4,)),
    "relu": _nonsmooth_check(ops.relu, (3, 5)),
    "sigmoid": _op_check(ops.sigmoid, (3, 5)),
    "tanh": _op_check(ops.tanh, (3, 5)),
    "max_pool": _nonsmooth_check(lambda x: ops.pool2d("max", x, (2, 2)), (2, 2, 4, 4)),
    "avg_pool": _op_check(lambda x: ops.pool2d("avg", x, (2, 1)), (2, 2, 4, 4)),
    "global_avg_pool": _op_check(lambda x: ops.pool2d("global_avg", x), (2, 2, 3, 3)),
    "batchnorm2d": _batchnorm_check,
    "dropout": _dropout_check,
    "reshape": _op_check(lambda x: ops.reshape(x, (4, 3)), (2, 6)),
    "transpose": _op_check(lambda x: ops.transpose(x, (2, 0, 1)), (2, 3, 4)),
    "select": _op_check(lambda x: ops.select(x, 1, axis=1), (2, 3, 4)),
    "stack": _op_check(lambda a, b: ops.stack([a, b], axis=1), (2, 3), (2, 3)),
    "concat": _op_check(lambda a, b: ops.concat([a, b], axis=1), (2, 3), (2, 2)),
    "pad_channels": _op_check(lambda x: ops.pad_channels(x, 1), (2, 3, 2, 2)),
    "mean": _op_check(ops.mean, (3, 4)),
    "mse": _loss_check("mse"),
    "softmax_cross_entropy": _loss_check("softmax_cross_entropy"),
    "binary_cross_entropy": _loss_check("binary_cross_entropy"),
}

LAYER_CHECKS = {
    "phc_conv_n2": _layer_check(_phc(2)),
    "phc_conv_n3_stride2": _layer_check(_phc(3, stride=2)),
    "phc_conv_n4": _layer_check(_phc(4)),
    "phc_conv1d_n2": _layer_check(_phc(2, dims=1)),
    "phm_linear_n3": _layer_check(_phm),
    "batchnorm_layer": _layer_check(_bn_layer),
    "residual_block": _layer_check(_residual),
    "gru_step": _layer_check(_gru_step),
}

_TINY_SED = dict(family="phsed", n=2, stage_widths=(2, 2, 2, 2), depths=(1, 1, 1, 1), num_classes=3,
                 input_channels=4, input_size=(3, 8), pool_sizes=((1, 2), (1, 2), (1, 2), (1, 1)),
                 gru_hidden=4, fc_hidden=4, dropout=0.0)

MODEL_CHECKS = {
    "phvgg_lite": _model_check(dict(family="phvgg", n=2, stage_widths=(2, 4), depths=(1, 1), num_classes=4,
                                    input_channels=2, classifier_widths=(4,), input_size=(4, 4)), (4, 2, 4, 4)),
    "phresnet_lite": _model_check(dict(family="phresnet", n=2, stage_widths=(2, 4), depths=(1, 1), num_classes=4,
                                       input_channels=2, stem_width=2, input_size=(4, 4)), (4, 2, 4, 4)),
    "phsed_lite": _model_check(_TINY_SED, (2, 4, 3, 8)),
}

REGISTRY = {
    "ops": {name: (fn, TOL) for name, fn in OP_CHECKS.items()},
    "layers": {**{name: (fn, TOL) for name, fn in LAYER_CHECKS.items()},
               "gru_unroll_5": (_layer_check(_gru_unroll), RECURRENT_TOL)},
    "models": {name: (fn, TOL) for name, fn in MODEL_CHECKS.items()},
}


def run_gradchecks(scope: str = "all", seed: int = 0) -> list:
    """Run every registered check in ``scope`` (ops, layers, models or all)."""
    scopes = list(REGISTRY) if scope == "all" else [scope]
    results = []
    for sc in scopes:
        if sc not in REGISTRY:
            raise ValueError(f"unknown gradcheck scope {sc!r}")
        for i, (name, (fn, tol)) in enumerate(REGISTRY[sc].items()):
            rng = np.random.default_rng([seed, i, len(sc)])
            results.append(GradCheckResult(name, sc, float(fn(rng)), tol))
    return results
