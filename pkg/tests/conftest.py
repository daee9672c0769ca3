"""Shared fixtures and independent scalar oracles.

The oracles here deliberately avoid the package's vectorized code paths:
quaternions are plain 4-tuples, convolutions are naive quadruple loops,
and the real block-matrix route goes through scipy.  They exist to check
the fast implementations against straightforward evaluations.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from quatnet.qcore import Quaternion
from quatnet.qtensor import QTensor

# ---------------------------------------------------------------------------
# Scalar 4-tuple quaternion arithmetic (oracle side).
# ---------------------------------------------------------------------------

def qmul(p, q):
    pr, pi, pj, pk = p
    qr, qi, qj, qk = q
    return (pr * qr - pi * qi - pj * qj - pk * qk,
            pr * qi + pi * qr + pj * qk - pk * qj,
            pr * qj - pi * qk + pj * qr + pk * qi,
            pr * qk + pi * qj - pj * qi + pk * qr)


def qconj(q):
    return (q[0], -q[1], -q[2], -q[3])


def qadd(p, q):
    return (p[0] + q[0], p[1] + q[1], p[2] + q[2], p[3] + q[3])


def qnorm(q):
    return math.sqrt(q[0] ** 2 + q[1] ** 2 + q[2] ** 2 + q[3] ** 2)


def tensor_tuples(t: QTensor) -> np.ndarray:
    """(..., 4) array view of a tensor for tuple-style indexing."""
    return np.moveaxis(t.planes, 0, -1)


def tuples_tensor(arr: np.ndarray) -> QTensor:
    return QTensor(np.ascontiguousarray(np.moveaxis(arr, -1, 0)))


# ---------------------------------------------------------------------------
# Naive convolution oracles: literal centered sums, quadruple loops.
# The stored kernel array samples the centered function, w_arr[a, b]
# = w(a - h, b - h); true convolution pairs w(r, s) with q(x - r, y - s).
# ---------------------------------------------------------------------------

def conv_oracle(kernel: QTensor, inp: QTensor, mode: str = "left",
                kernel_right: QTensor | None = None,
                stride=(1, 1), padding=(0, 0), flip: bool = True
                ) -> np.ndarray:
    """Scalar-interpreter convolution; returns a (..., 4) tuple array."""
    w = tensor_tuples(kernel)
    q = tensor_tuples(inp)
    wr = tensor_tuples(kernel_right) if kernel_right is not None else None
    ph, pw = padding
    if ph or pw:
        q = np.pad(q, [(ph, ph), (pw, pw), (0, 0)])
    n, m = q.shape[0], q.shape[1]
    ell = w.shape[0]
    oh = (n - ell) // stride[0] + 1
    ow = (m - ell) // stride[1] + 1
    out = np.zeros((oh, ow, 4))
    for x in range(oh):
        for y in range(ow):
            acc = (0.0, 0.0, 0.0, 0.0)
            for a in range(ell):
                for b in range(ell):
                    wa, wb = (ell - 1 - a, ell - 1 - b) if flip else (a, b)
                    tap = tuple(w[wa, wb])
                    sample = tuple(q[x * stride[0] + a, y * stride[1] + b])
                    if mode == "left":
                        term = qmul(tap, sample)
                    elif mode == "right":
                        term = qmul(sample, tap)
                    else:
                        term = qmul(qmul(tap, sample), tuple(wr[wa, wb]))
                    acc = qadd(acc, term)
            out[x, y] = acc
    return out


def left_matrix_tuple(q) -> np.ndarray:
    r, i, j, k = q
    return np.array([[r, -i, -j, -k],
                     [i, r, -k, j],
                     [j, k, r, -i],
                     [k, -j, i, r]])


def block_conv_oracle(kernel: QTensor, inp: QTensor, stride=(1, 1),
                      padding=(0, 0), flip: bool = False) -> np.ndarray:
    """Left convolution through the real 4x4 block representation.

    Every kernel quaternion becomes its left-multiplication matrix and
    the input a 4-vector field; the quaternion convolution then equals
    16 real-valued 2-D correlations combined per component.
    """
    from scipy.signal import convolve2d, correlate2d

    w = tensor_tuples(kernel)
    q = inp.planes
    ph, pw = padding
    if ph or pw:
        q = np.pad(q, [(0, 0), (ph, ph), (pw, pw)])
    ell = w.shape[0]
    blocks = np.zeros((4, 4, ell, ell))
    for a in range(ell):
        for b in range(ell):
            blocks[:, :, a, b] = left_matrix_tuple(tuple(w[a, b]))
    oh = (q.shape[1] - ell) // stride[0] + 1
    ow = (q.shape[2] - ell) // stride[1] + 1
    out = np.zeros((4, oh, ow))
    for c1 in range(4):
        acc = np.zeros((q.shape[1] - ell + 1, q.shape[2] - ell + 1))
        for c2 in range(4):
            if flip:
                acc += convolve2d(q[c2], blocks[c1, c2], mode="valid")
            else:
                acc += correlate2d(q[c2], blocks[c1, c2], mode="valid")
        out[c1] = acc[::stride[0], ::stride[1]][:oh, :ow]
    return out


# ---------------------------------------------------------------------------
# Random value helpers.
# ---------------------------------------------------------------------------

def random_quaternion(rng, scale: float = 1.0) -> Quaternion:
    return Quaternion(*(scale * rng.standard_normal(4)))


def random_versor(rng) -> Quaternion:
    while True:
        v = rng.standard_normal(4)
        n = np.linalg.norm(v)
        if n > 1e-6:
            return Quaternion(*(v / n))


def random_qtensor(rng, shape, scale: float = 1.0) -> QTensor:
    return QTensor(scale * rng.standard_normal((4,) + tuple(shape)))


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(20240817))
