"""Independent reference implementations used only by the tests.

Nothing here imports the package code it checks: loops are scalar and
written from the definitions, not from the vectorised implementations.
"""
from __future__ import annotations

import math

import numpy as np


def naive_conv2d(x, w, stride=1, pad=0):
    """7-loop cross-correlation accumulating in the input dtype, (c, i, j) innermost."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    dt = np.result_type(x, w).type
    out = np.zeros((n, f, ho, wo), dtype=dt)
    for b in range(n):
        for o in range(f):
            for r in range(ho):
                for q in range(wo):
                    acc = dt(0)
                    for ci in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                acc = dt(acc + dt(xp[b, ci, r * stride + i, q * stride + j] * w[o, ci, i, j]))
                    out[b, o, r, q] = acc
    return out


def scalar_psi(mentor, mentee):
    """Probe RMSE by explicit loops over batch, channel/unit and position."""
    batch = mentor.shape[0]
    if mentor.ndim == 2:
        a = min(mentor.shape[1], mentee.shape[1])
        total = 0.0
        for b in range(batch):
            for k in range(a):
                d = float(mentee[b, k]) - float(mentor[b, k])
                total += d * d
        return math.sqrt(total / (a * batch))
    c = min(mentor.shape[1], mentee.shape[1])
    h, w = mentor.shape[2:]
    total = 0.0
    for b in range(batch):
        for ch in range(c):
            for i in range(h):
                for j in range(w):
                    d = float(mentee[b, ch, i, j]) - float(mentor[b, ch, i, j])
                    total += d * d
    return math.sqrt(total / (c * h * w * batch))


def numeric_grad(f, x, h=1e-5):
    """Central differences of the scalar function ``f`` with respect to array ``x`` (in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    for k in range(x.size):
        old = x.flat[k]
        x.flat[k] = old + h
        fp = f()
        x.flat[k] = old - h
        fm = f()
        x.flat[k] = old
        g.flat[k] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b, floor=1e-4):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), floor))


def plain_sgd(params, grads, lr):
    """w <- w - lr * g, written out separately from the optimizer class."""
    return [p - lr * g for p, g in zip(params, grads)]
