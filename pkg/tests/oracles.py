"""Independent reference implementations used as test oracles.

None of these touch the library's Kronecker or im2col code paths.
"""

import numpy as np


def direct_conv2d(x, w, b=None, stride=1, pad=0):
    """Loop-based cross-correlation of x [B,C,H,W] with w [D,C,k,k]."""
    B, C, H, W = x.shape
    D, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((B, D, Ho, Wo))
    for i in range(Ho):
        for j in range(Wo):
            patch = xp[:, :, i * stride:i * stride + k, j * stride:j * stride + k]
            out[:, :, i, j] = np.einsum("bckl,dckl->bd", patch, w)
    if b is not None:
        out += b[None, :, None, None]
    return out


def brute_kron(A, F):
    """Elementwise Kronecker product over the two channel axes of F [do, si, ...]."""
    n = A.shape[0]
    do, si = F.shape[:2]
    out = np.zeros((n * do, n * si) + F.shape[2:])
    for u in range(n):
        for v in range(n):
            for a in range(do):
                for c in range(si):
                    out[u * do + a, v * si + c] = A[u, v] * F[a, c]
    return out


def brute_kron_sum(A, F):
    return sum(brute_kron(A[i], F[i]) for i in range(A.shape[0]))


def hamilton_conv(x, W, stride=1, pad=0):
    """Quaternion convolution written out component by component.

    ``W`` holds the four real filter banks [4, d/4, s/4, k, k]; the input
    channels are split into the four components x0..x3.
    """
    W0, W1, W2, W3 = W
    q = x.shape[1] // 4
    x0, x1, x2, x3 = (x[:, i * q:(i + 1) * q] for i in range(4))

    def c(w, xi):
        return direct_conv2d(xi, w, None, stride, pad)

    y0 = c(W0, x0) - c(W1, x1) - c(W2, x2) - c(W3, x3)
    y1 = c(W1, x0) + c(W0, x1) - c(W3, x2) + c(W2, x3)
    y2 = c(W2, x0) + c(W3, x1) + c(W0, x2) - c(W1, x3)
    y3 = c(W3, x0) - c(W2, x1) + c(W1, x2) + c(W0, x3)
    return np.concatenate([y0, y1, y2, y3], axis=1)
