"""In-place parameter updates over a list of numpy arrays.

The gradients handed to ``step`` are already the combined stream (label
loss, probes and l1/l2 penalty); no optimizer applies its own decay.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeMismatch

KINDS = ("sgd", "polyak_sgd", "rmsprop_nesterov", "adagrad_polyak")


def zero_like(params):
    return [np.zeros_like(p) for p in params]


class Optimizer:
    """sgd, polyak_sgd, rmsprop_nesterov or adagrad_polyak.

    rmsprop_nesterov uses the look-ahead reformulation
    ``w += -mu * v_prev + (1 + mu) * v`` so no second gradient evaluation is
    needed. adagrad_polyak scales the gradient by the accumulated RMS first and
    applies classical momentum to the scaled step.
    """

    def __init__(self, kind="rmsprop_nesterov", momentum=0.9, rms_decay=0.9, epsilon=1e-8):
        if kind not in KINDS:
            raise ConfigError(f"unknown optimizer {kind!r}; expected one of {KINDS}")
        if not 0 <= momentum < 1 or not 0 <= rms_decay < 1 or epsilon <= 0:
            raise ConfigError("momentum and rms_decay must lie in [0, 1) and epsilon must be positive")
        self.kind = kind
        self.momentum = momentum
        self.rms_decay = rms_decay
        self.epsilon = epsilon
        self.velocity: list[np.ndarray] | None = None
        self.cache: list[np.ndarray] | None = None

    def reset(self, params=None):
        """Zero every accumulator; ``params`` (re)defines the slot shapes."""
        if params is not None:
            self.velocity = zero_like(params)
            self.cache = zero_like(params)
        elif self.velocity is not None:
            for slot in self.velocity + self.cache:
                slot.fill(0)

    def step(self, params, grads, lr):
        if self.velocity is None:
            self.reset(params)
        if len(params) != len(grads) or len(params) != len(self.velocity):
            raise ShapeMismatch("parameter, gradient and slot counts differ")
        mu = self.momentum
        for p, g, v, c in zip(params, grads, self.velocity, self.cache):
            if p.shape != g.shape or p.shape != v.shape:
                raise ShapeMismatch(f"gradient {g.shape} does not match parameter {p.shape}")
            if self.kind == "sgd":
                p -= lr * g
            elif self.kind == "polyak_sgd":
                v *= mu
                v -= lr * g
                p += v
            elif self.kind == "rmsprop_nesterov":
                c *= self.rms_decay
                c += (1 - self.rms_decay) * g * g
                v_prev = v.copy()
                v *= mu
                v -= lr * g / np.sqrt(c + self.epsilon)
                p += (1 + mu) * v - mu * v_prev
            else:
                c += g * g
                v *= mu
                v -= lr * g / np.sqrt(c + self.epsilon)
                p += v
        return params
