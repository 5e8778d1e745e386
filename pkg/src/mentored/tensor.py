"""Dense array primitives used by the layers.

Tensors are plain numpy arrays. The few operations defined here pin their
summation order so that results are reproducible bit for bit: ``conv2d``
accumulates over (channel, kernel row, kernel column) in that order, exactly
like a naive nested loop would.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import NegativeStd, NonFiniteInput, ShapeMismatch

Tensor = np.ndarray

F32 = np.float32
F64 = np.float64


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator keyed by ``seed`` and an optional stream path.

    Distinct stream paths give independent sequences for the same seed, so
    weight init, dropout masks and shuffling never share draws.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not np.isfinite(x).all():
        raise NonFiniteInput(f"non-finite values in {what}")
    return x


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"cannot multiply {a.shape} by {b.shape}")
    return np.matmul(a, b)


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeMismatch(f"extent {size} (pad {pad}) incompatible with kernel {k} / stride {stride}")
    return span // stride + 1


def _check_conv(x: Tensor, w: Tensor, stride: int, pad: int) -> tuple[int, int]:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d expects NCHW input and FCkk filters, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, filters expect {w.shape[1]}")
    if stride < 1 or pad < 0:
        raise ShapeMismatch("stride must be positive and pad nonnegative")
    ho = conv_output_size(x.shape[2], w.shape[2], stride, pad)
    wo = conv_output_size(x.shape[3], w.shape[3], stride, pad)
    return ho, wo


def _pad(x: Tensor, pad: int) -> Tensor:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0, finite: bool = False) -> Tensor:
    """Cross-correlation of ``x`` [N,C,H,W] with ``w`` [F,C,kH,kW]."""
    ho, wo = _check_conv(x, w, stride, pad)
    if finite:
        check_finite(x, "conv2d input")
    n, c = x.shape[:2]
    f, _, kh, kw = w.shape
    xp = _pad(x, pad)
    out = np.zeros((n, f, ho, wo), dtype=np.result_type(x, w))
    for ci in range(c):
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, ci, i:i + stride * ho:stride, j:j + stride * wo:stride]
                out += patch[:, None, :, :] * w[None, :, ci, i, j, None, None]
    return out


def conv2d_grads(x: Tensor, w: Tensor, dout: Tensor, stride: int = 1, pad: int = 0) -> tuple[Tensor, Tensor]:
    """Gradients of ``sum(dout * conv2d(x, w))`` with respect to ``x`` and ``w``."""
    ho, wo = _check_conv(x, w, stride, pad)
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    if dout.shape != (n, f, ho, wo):
        raise ShapeMismatch(f"upstream gradient {dout.shape} does not match output {(n, f, ho, wo)}")
    xp = _pad(x, pad)
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for ci in range(c):
        for i in range(kh):
            for j in range(kw):
                rows = slice(i, i + stride * ho, stride)
                cols = slice(j, j + stride * wo, stride)
                dw[:, ci, i, j] = np.tensordot(dout, xp[:, ci, rows, cols], axes=([0, 2, 3], [0, 1, 2]))
                dxp[:, ci, rows, cols] += np.tensordot(dout, w[:, ci, i, j], axes=([1], [0]))
    if pad:
        dxp = dxp[:, :, pad:pad + h, pad:pad + wd]
    return dxp, dw


def gaussian_fill(shape, mean: float, std: float, rng: np.random.Generator, dtype=F32) -> Tensor:
    """I.i.d. normal samples via the Box-Muller transform on uniform draws."""
    if std < 0:
        raise NegativeStd(f"std must be >= 0, got {std}")
    shape = tuple(int(s) for s in shape)
    count = math.prod(shape)
    half = (count + 1) // 2
    u1 = 1.0 - rng.random(half)  # (0, 1], keeps log finite
    u2 = rng.random(half)
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:count]
    return (mean + std * z).reshape(shape).astype(dtype)
