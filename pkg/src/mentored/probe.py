"""Activation probes between a frozen mentor and a mentee.

A probe is the RMS difference between matched activations of one mentor
layer and one mentee layer. Matching keeps the first ``a`` components in
index order, where ``a`` is the smaller width; for convolutional maps the
first ``min(C)`` channels are compared element-wise over the shared H×W grid.
Squared differences are averaged over the batch before the square root.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BatchMismatch, NegativeWeight, ProbeShapeError, SpatialMismatch

SINGULAR_PSI = 1e-12

BODY = "body"
SOFTMAX = "softmax"


@dataclass(frozen=True)
class ProbeSpec:
    mentor_layer: int
    mentee_layer: int
    group: str = BODY
    weight: float = 1.0  # per-probe multiplier on beta

    def __post_init__(self):
        if self.group not in (BODY, SOFTMAX):
            raise ProbeShapeError(f"probe group must be 'body' or 'softmax', got {self.group!r}")
        if self.weight < 0:
            raise NegativeWeight(f"probe weight must be >= 0, got {self.weight}")


@dataclass(frozen=True)
class ProbeSet:
    body: tuple[ProbeSpec, ...] = ()
    softmax: ProbeSpec | None = None
    pairs: frozenset = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        seen = set()
        for p in self.all():
            key = (p.mentor_layer, p.mentee_layer)
            if key in seen:
                raise ProbeShapeError(f"duplicate probe pair {key}")
            seen.add(key)
        object.__setattr__(self, "pairs", frozenset(seen))

    def all(self):
        return list(self.body) + ([self.softmax] if self.softmax else [])

    def __len__(self):
        return len(self.body) + (self.softmax is not None)

    @classmethod
    def from_entries(cls, entries):
        body, softmax = [], None
        for entry in entries:
            spec = ProbeSpec(**entry) if isinstance(entry, dict) else entry
            if spec.group == SOFTMAX:
                if softmax is not None:
                    raise ProbeShapeError("only one softmax probe is allowed")
                softmax = spec
            else:
                body.append(spec)
        return cls(tuple(body), softmax)


def _views(mentor_act, mentee_act):
    """Flatten both activations to [batch, a] over their matched components."""
    if mentor_act.shape[0] != mentee_act.shape[0]:
        raise BatchMismatch(f"batch extents differ: {mentor_act.shape[0]} vs {mentee_act.shape[0]}")
    if mentor_act.ndim != mentee_act.ndim or mentor_act.ndim not in (2, 4):
        raise ProbeShapeError(
            f"probe needs two flat [B,D] or two conv [B,C,H,W] activations, got {mentor_act.shape} and {mentee_act.shape}")
    b = mentor_act.shape[0]
    if mentor_act.ndim == 2:
        a = min(mentor_act.shape[1], mentee_act.shape[1])
        return mentor_act[:, :a], mentee_act[:, :a], a
    if mentor_act.shape[2:] != mentee_act.shape[2:]:
        raise SpatialMismatch(f"feature maps differ spatially: {mentor_act.shape[2:]} vs {mentee_act.shape[2:]}")
    c = min(mentor_act.shape[1], mentee_act.shape[1])
    m = mentor_act[:, :c].reshape(b, -1)
    s = mentee_act[:, :c].reshape(b, -1)
    return m, s, m.shape[1]


def match_width(mentor_act, mentee_act) -> int:
    return _views(mentor_act, mentee_act)[2]


def probe_loss(mentor_act, mentee_act) -> float:
    m, s, a = _views(mentor_act, mentee_act)
    d = s - m
    return float(np.sqrt((d * d).sum() / (a * len(d))))


def probe_grad(mentor_act, mentee_act, psi: float | None = None):
    """Gradient of the probe with respect to the mentee activation only."""
    m, s, a = _views(mentor_act, mentee_act)
    if psi is None:
        psi = probe_loss(mentor_act, mentee_act)
    grad = np.zeros_like(mentee_act)
    if psi < SINGULAR_PSI:
        return grad
    matched = (s - m) / mentee_act.dtype.type(a * len(s) * psi)
    if mentee_act.ndim == 2:
        grad[:, :a] = matched
    else:
        c = min(mentor_act.shape[1], mentee_act.shape[1])
        grad[:, :c] = matched.reshape((len(s), c) + mentee_act.shape[2:])
    return grad


def combined_loss(loss_s, body_losses, softmax_loss, alpha, beta, gamma, multipliers=None) -> float:
    """alpha * L_s + beta * sum(m_i * psi_i) + gamma * psi_softmax.

    Terms whose weight is zero are skipped entirely, so an unused label loss
    or probe may be passed as ``None``.
    """
    for name, w in (("alpha", alpha), ("beta", beta), ("gamma", gamma)):
        if w < 0:
            raise NegativeWeight(f"{name} must be >= 0, got {w}")
    body_losses = list(body_losses or ())
    multipliers = list(multipliers) if multipliers is not None else [1.0] * len(body_losses)
    e = 0.0
    if alpha:
        e += alpha * loss_s
    if beta:
        e += beta * sum(w * psi for w, psi in zip(multipliers, body_losses, strict=True))
    if gamma:
        e += gamma * softmax_loss
    return e
