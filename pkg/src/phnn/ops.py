"""Differentiable operations on :class:`~phnn.tensor.Tensor`.

Each function computes its forward value with numpy and records a backward
rule on the active tape.  Convolutions are cross-correlations (no kernel
flip) evaluated through an im2col matrix product.
"""

from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    DegenerateBatch,
    InvalidTarget,
    KernelTooLarge,
    ShapeMismatch,
    WindowMismatch,
)
from .tensor import DTYPE, Tensor, record

Scalar = Union[int, float]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
BCE_CLIP = 1e-12


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


# ---------------------------------------------------------------- elementwise

def _leading_broadcast(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape or (a.ndim == b.ndim + 1 and a.shape[1:] == b.shape)


def elementwise(kind: str, a: Tensor, b) -> Tensor:
    """Pointwise ``add``/``sub``/``mul`` against a tensor or scalar, or ``scale`` by a scalar.

    A tensor right operand may omit the leading (batch) axis of ``a``.
    """
    if kind not in ("add", "sub", "mul", "scale"):
        raise ValueError(f"unknown elementwise kind {kind!r}")
    if kind == "scale" or not isinstance(b, Tensor):
        if isinstance(b, Tensor):
            raise ShapeMismatch("scale takes a scalar factor")
        c = float(b)
        if kind in ("mul", "scale"):
            return record(kind, (a,), a.data * c, lambda g: (g * c,))
        sign = 1.0 if kind == "add" else -1.0
        return record(kind, (a,), a.data + sign * c, lambda g: (g,))

    if not _leading_broadcast(a.data, b.data):
        if _leading_broadcast(b.data, a.data) and kind in ("add", "mul"):
            return elementwise(kind, b, a)
        raise ShapeMismatch(f"cannot combine shapes {a.shape} and {b.shape}")
    reduce_b = a.data.shape != b.data.shape

    def fold(g: np.ndarray) -> np.ndarray:
        return g.sum(axis=0) if reduce_b else g

    if kind == "add":
        return record("add", (a, b), a.data + b.data, lambda g: (g, fold(g)))
    if kind == "sub":
        return record("sub", (a, b), a.data - b.data, lambda g: (g, fold(-g)))
    ad, bd = a.data, b.data
    return record("mul", (a, b), ad * bd, lambda g: (g * bd, fold(g * ad)))


def add(a: Tensor, b) -> Tensor:
    return elementwise("add", a, b)


def sub(a: Tensor, b) -> Tensor:
    return elementwise("sub", a, b)


def mul(a: Tensor, b) -> Tensor:
    return elementwise("mul", a, b)


def scale(a: Tensor, c: Scalar) -> Tensor:
    return elementwise("scale", a, c)


def add_n(terms: Sequence[Tensor]) -> Tensor:
    """Sum of equally shaped tensors as a single tape node."""
    terms = list(terms)
    shape = terms[0].shape
    if any(t.shape != shape for t in terms):
        raise ShapeMismatch("add_n operands differ in shape")
    out = terms[0].data.copy()
    for t in terms[1:]:
        out += t.data
    return record("add_n", tuple(terms), out, lambda g: tuple(g for _ in terms))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for a of shape [m,p] or [B,m,p] and b of shape [p,q]."""
    if b.ndim != 2 or a.ndim not in (2, 3) or a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"matmul of {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ bd.T
        if ad.ndim == 3:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = ad.T @ g
        return ga, gb

    return record("matmul", (a, b), ad @ bd, back)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with weight stored [out, in]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"linear of {x.shape} with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeMismatch(f"bias {bias.shape} for weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out += bias.data

    def back(g):
        gx = g @ wd
        gw = g.T @ xd
        return (gx, gw, g.sum(axis=0)) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record("linear", inputs, out, back)


def kron_block(A: Tensor, F: Tensor) -> Tensor:
    """Kronecker product of A [n,n] with F [d/n, s/n, *spatial] over the two channel axes.

    Block (u, v) of the result is ``A[u, v] * F``; spatial axes are untouched.
    """
    if A.ndim != 2 or A.shape[0] != A.shape[1] or F.ndim < 2:
        raise ShapeMismatch(f"kron_block of {A.shape} and {F.shape}")
    n = A.shape[0]
    do, si = F.shape[:2]
    spatial = F.shape[2:]
    Ad, Fd = A.data, F.data
    lift = Ad.reshape(n, 1, n, 1, *([1] * len(spatial)))
    out = (lift * Fd[None, :, None, :]).reshape(n * do, n * si, *spatial)

    def back(g):
        gb = g.reshape(n, do, n, si, -1)
        f2 = Fd.reshape(do, si, -1)
        gA = np.einsum("uovpk,opk->uv", gb, f2)
        gF = np.einsum("uv,uovpk->opk", Ad, gb).reshape(Fd.shape)
        return gA, gF

    return record("kron_block", (A, F), out, back)


def kron_sum(A: Tensor, F: Tensor) -> Tensor:
    """``sum_i kron_block(A[i], F[i])`` for stacks A [n,n,n] and F [n, d/n, s/n, *spatial]."""
    if A.ndim != 3 or A.shape[1] != A.shape[2] or F.ndim < 3 or F.shape[0] != A.shape[0]:
        raise ShapeMismatch(f"kron_sum of {A.shape} and {F.shape}")
    m, n = A.shape[0], A.shape[1]
    do, si = F.shape[1:3]
    spatial = F.shape[3:]
    Af = A.data.reshape(m, n * n)
    Ff = F.data.reshape(m, -1)
    blocks = (Af.T @ Ff).reshape(n, n, do, si, -1)
    out = np.ascontiguousarray(blocks.transpose(0, 2, 1, 3, 4)).reshape(n * do, n * si, *spatial)

    def back(g):
        gb = g.reshape(n, do, n, si, -1).transpose(0, 2, 1, 3, 4).reshape(n * n, -1)
        gA = (Ff @ gb.T).reshape(A.shape)
        gF = (Af @ gb).reshape(F.shape)
        return gA, gF

    return record("kron_sum", (A, F), out, back)


# ---------------------------------------------------------------- convolution

def _pair(v) -> tuple:
    return (int(v), int(v)) if np.isscalar(v) else (int(v[0]), int(v[1]))


def _conv_core(x: Tensor, w: Tensor, bias: Optional[Tensor], stride: tuple, padding: tuple, op: str) -> Tensor:
    B, C, H, W = x.shape
    Cout, Cin, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    if Cin != C:
        raise ShapeMismatch(f"input has {C} channels, weight expects {Cin}")
    if bias is not None and bias.shape != (Cout,):
        raise ShapeMismatch(f"bias {bias.shape} for {Cout} output channels")
    if sh < 1 or sw < 1:
        raise ValueError("stride must be >= 1")
    Hp, Wp = H + 2 * ph, W + 2 * pw
    if kh > Hp or kw > Wp:
        raise KernelTooLarge(f"kernel {kh}x{kw} exceeds padded input {Hp}x{Wp}")
    Ho = (Hp - kh) // sh + 1
    Wo = (Wp - kw) // sw + 1

    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    # rows ordered (b, i, j); columns ordered (c, ki, kj) to match w.reshape(Cout, -1)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(Cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, Cout)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            gxp = np.zeros((B, C, Hp, Wp), dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + sh * (Ho - 1) + 1:sh, j:j + sw * (Wo - 1) + 1:sw] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
            gx = gxp[:, :, ph:ph + H, pw:pw + W]
        if bias is not None:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    inputs = (x, w, bias) if bias is not None else (x, w)
    return record(op, inputs, np.ascontiguousarray(out), back)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation of x [B,Cin,H,W] with weight [Cout,Cin,k,k]."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4-d input and weight, got {x.shape}, {weight.shape}")
    return _conv_core(x, weight, bias, _pair(stride), _pair(padding), "conv2d")


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """1D cross-correlation of x [B,Cin,L] with weight [Cout,Cin,k]."""
    if x.ndim != 3 or weight.ndim != 3:
        raise ShapeMismatch(f"conv1d expects 3-d input and weight, got {x.shape}, {weight.shape}")
    x4 = reshape(x, (x.shape[0], x.shape[1], 1, x.shape[2]))
    w4 = reshape(weight, (weight.shape[0], weight.shape[1], 1, weight.shape[2]))
    y = _conv_core(x4, w4, bias, (1, int(stride)), (0, int(padding)), "conv1d")
    return reshape(y, (y.shape[0], y.shape[1], y.shape[3]))


# ---------------------------------------------------------------- nonlinearities

def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def activation(kind: str, x: Tensor) -> Tensor:
    xd = x.data
    if kind == "relu":
        mask = xd > 0
        return record("relu", (x,), xd * mask, lambda g: (g * mask,))
    if kind == "sigmoid":
        s = _sigmoid(xd)
        return record("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))
    if kind == "tanh":
        t = np.tanh(xd)
        return record("tanh", (x,), t, lambda g: (g * (1.0 - t * t),))
    raise ValueError(f"unknown activation {kind!r}")


def relu(x: Tensor) -> Tensor:
    return activation("relu", x)


def sigmoid(x: Tensor) -> Tensor:
    return activation("sigmoid", x)


def tanh(x: Tensor) -> Tensor:
    return activation("tanh", x)


# ---------------------------------------------------------------- pooling

def pool2d(kind: str, x: Tensor, window: tuple = (2, 2)) -> Tensor:
    """Non-overlapping max/avg pooling, or global average pooling to 1x1."""
    if x.ndim != 4:
        raise ShapeMismatch(f"pool2d expects [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    xd = x.data
    if kind == "global_avg":
        inv = 1.0 / (H * W)
        return record("global_avg", (x,), xd.mean(axis=(2, 3), keepdims=True),
                      lambda g: (np.broadcast_to(g * inv, xd.shape).copy(),))
    ph, pw = _pair(window)
    if ph < 1 or pw < 1 or H % ph or W % pw:
        raise WindowMismatch(f"window ({ph},{pw}) does not tile {H}x{W}")
    Ho, Wo = H // ph, W // pw
    if kind == "avg":
        blocks = xd.reshape(B, C, Ho, ph, Wo, pw)
        inv = 1.0 / (ph * pw)

        def back_avg(g):
            gb = np.broadcast_to((g * inv)[:, :, :, None, :, None], (B, C, Ho, ph, Wo, pw))
            return (gb.reshape(B, C, H, W).copy(),)

        return record("avg_pool", (x,), blocks.mean(axis=(3, 5)), back_avg)
    if kind == "max":
        blocks = xd.reshape(B, C, Ho, ph, Wo, pw).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, ph * pw)
        idx = blocks.argmax(axis=-1)  # first maximal element on ties
        out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

        def back_max(g):
            gb = np.zeros((B, C, Ho, Wo, ph * pw), dtype=DTYPE)
            np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
            gx = gb.reshape(B, C, Ho, Wo, ph, pw).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
            return (gx,)

        return record("max_pool", (x,), out, back_max)
    raise ValueError(f"unknown pooling kind {kind!r}")


# ---------------------------------------------------------------- normalisation

def batchnorm2d(x: Tensor, weight: Tensor, bias: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = BN_MOMENTUM,
                eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalisation of x [B,C,H,W].

    In training mode the batch statistics are used and the running buffers are
    updated in place (unbiased variance); in eval mode the running buffers are used.
    """
    if x.ndim != 4 or weight.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeMismatch(f"batchnorm2d of {x.shape} with affine {weight.shape}")
    B, C, H, W = x.shape
    xd = x.data
    gamma = weight.data.reshape(1, C, 1, 1)
    beta = bias.data.reshape(1, C, 1, 1)
    if not training:
        invstd = 1.0 / np.sqrt(running_var + eps)
        xhat = (xd - running_mean.reshape(1, C, 1, 1)) * invstd.reshape(1, C, 1, 1)

        def back_eval(g):
            return (g * gamma * invstd.reshape(1, C, 1, 1),
                    (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

        return record("batchnorm_eval", (x, weight, bias), xhat * gamma + beta, back_eval)

    m = B * H * W
    if m < 2:
        raise DegenerateBatch(f"batchnorm needs at least 2 values per channel, got {m}")
    mean = xd.mean(axis=(0, 2, 3))
    centered = xd - mean.reshape(1, C, 1, 1)
    var = (centered * centered).mean(axis=(0, 2, 3))
    if not np.all(var + eps > 0):
        raise DegenerateBatch("variance denominator underflowed")
    invstd = (1.0 / np.sqrt(var + eps)).reshape(1, C, 1, 1)
    xhat = centered * invstd
    running_mean *= 1.0 - momentum
    running_mean += momentum * mean
    running_var *= 1.0 - momentum
    running_var += momentum * var * (m / (m - 1))

    def back_train(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        dxhat = g * gamma
        gx = invstd / m * (m * dxhat - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                           - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        return gx, ggamma, gbeta

    return record("batchnorm_train", (x, weight, bias), xhat * gamma + beta, back_train)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted dropout: zero with probability p and rescale survivors by 1/(1-p)."""
    if not training or p <= 0.0:
        return x
    if p >= 1.0:
        raise ValueError("dropout probability must be < 1")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return record("dropout", (x,), x.data * mask, lambda g: (g * mask,))


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(src),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return record("transpose", (x,), np.ascontiguousarray(x.data.transpose(axes)),
                  lambda g: (g.transpose(inverse),))


def select(x: Tensor, index: int, axis: int = 1) -> Tensor:
    """Slice a single position along ``axis`` (the axis is dropped)."""
    shape = x.shape

    def back(g):
        out = np.zeros(shape, dtype=DTYPE)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        out[tuple(sl)] = g
        return (out,)

    return record("select", (x,), np.take(x.data, index, axis=axis), back)


def stack(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return record("stack", tuple(tensors), out, back)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    cuts = np.cumsum(sizes)[:-1]
    return record("concat", tuple(tensors), out, lambda g: tuple(np.split(g, cuts, axis=axis)))


def pad_channels(x: Tensor, before: int) -> Tensor:
    """Prepend ``before`` all-zero channels on axis 1."""
    if before == 0:
        return x
    widths = [(0, 0)] * x.ndim
    widths[1] = (before, 0)
    return record("pad_channels", (x,), np.pad(x.data, widths), lambda g: (g[:, before:],))


def total(x: Tensor) -> Tensor:
    return record("sum", (x,), np.array(x.data.sum()), lambda g: (np.full(x.shape, float(g)),))


def mean(x: Tensor) -> Tensor:
    inv = 1.0 / x.size
    return record("mean", (x,), np.array(x.data.mean()), lambda g: (np.full(x.shape, float(g) * inv),))


# ---------------------------------------------------------------- losses

def loss(kind: str, pred: Tensor, target) -> Tensor:
    """Mean-reduced ``mse``, ``softmax_cross_entropy`` or ``binary_cross_entropy``."""
    if kind == "mse":
        return mse_loss(pred, target)
    if kind == "softmax_cross_entropy":
        return softmax_cross_entropy(pred, target)
    if kind == "binary_cross_entropy":
        return binary_cross_entropy(pred, target)
    raise ValueError(f"unknown loss kind {kind!r}")


def _target_array(target) -> np.ndarray:
    return target.data if isinstance(target, Tensor) else np.asarray(target, dtype=DTYPE)


def mse_loss(pred: Tensor, target) -> Tensor:
    t = _target_array(target)
    if t.shape != pred.shape:
        raise ShapeMismatch(f"mse of {pred.shape} against {t.shape}")
    diff = pred.data - t
    inv = 1.0 / diff.size
    return record("mse", (pred,), np.array((diff * diff).sum() * inv), lambda g: (g * 2.0 * inv * diff,))


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Cross-entropy of logits [B,C] against integer class indices [B]."""
    if logits.ndim != 2:
        raise ShapeMismatch(f"logits must be [B,C], got {logits.shape}")
    labels = np.asarray(target.data if isinstance(target, Tensor) else target)
    B, C = logits.shape
    if labels.shape != (B,):
        raise ShapeMismatch(f"{labels.shape} labels for {B} rows")
    if labels.dtype.kind == "f":
        if not np.all(labels == np.round(labels)):
            raise InvalidTarget("class indices must be integral")
    labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise InvalidTarget(f"class index outside [0, {C})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(B)
    value = (logsum - z[rows, labels]).mean()

    def back(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / B),)

    return record("softmax_cross_entropy", (logits,), np.array(value), back)


def binary_cross_entropy(prob: Tensor, target) -> Tensor:
    """BCE of probabilities in [0,1] against soft targets in [0,1]."""
    t = _target_array(target)
    if t.shape != prob.shape:
        raise ShapeMismatch(f"bce of {prob.shape} against {t.shape}")
    if np.any(t < 0) or np.any(t > 1):
        raise InvalidTarget("binary targets must lie in [0, 1]")
    pd = prob.data
    if np.any(pd < 0) or np.any(pd > 1):
        raise InvalidTarget("predictions must be probabilities")
    p = np.clip(pd, BCE_CLIP, 1.0 - BCE_CLIP)
    inv = 1.0 / p.size
    value = -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).sum() * inv

    def back(g):
        return (g * inv * (p - t) / (p * (1.0 - p)),)

    return record("binary_cross_entropy", (prob,), np.array(value), back)
