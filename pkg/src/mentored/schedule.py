"""Annealed loss weights and the learning-rate schedule.

The mentoring phase covers iterations ``[0, T_m)`` with ``T_m = rho * total``;
afterwards every preset except ``gullible`` settles at (1, 0, 0), i.e. plain
supervised training.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError

PERSONALITIES = ("independent", "adamant", "obedient", "gullible")
RAMPS = {"linear": 1, "quadratic": 2}


@dataclass(frozen=True)
class AnnealFn:
    """One annealing function g(t).

    ``constant`` returns ``v0``; ``linear`` interpolates ``v0 -> v1`` over
    ``[0, t_m]`` then clamps; ``ramp`` climbs ``v0 -> 1`` as
    ``v0 + (1 - v0) * (t / t_m) ** power`` then holds at 1.
    """

    kind: str
    v0: float
    v1: float = 0.0
    t_m: float = 0.0
    power: int = 1

    def __post_init__(self):
        if self.kind not in ("constant", "linear", "ramp"):
            raise ConfigError(f"unknown anneal kind {self.kind!r}")
        for v in (self.v0, self.v1):
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"anneal endpoints must lie in [0, 1], got {v}")
        if self.kind != "constant" and self.t_m <= 0:
            raise ConfigError("annealing needs a positive mentoring-phase length")

    def __call__(self, t: float) -> float:
        if self.kind == "constant":
            return self.v0
        frac = min(t / self.t_m, 1.0)
        if self.kind == "linear":
            return self.v1 if frac >= 1.0 else self.v0 + (self.v1 - self.v0) * frac
        return 1.0 if frac >= 1.0 else self.v0 + (1.0 - self.v0) * frac ** self.power


@dataclass(frozen=True)
class ScheduleSet:
    g_alpha: AnnealFn
    g_beta: AnnealFn
    g_gamma: AnnealFn
    gamma_scale: float = 1.0
    probe_multipliers: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if not 0.0 <= self.gamma_scale <= 1.0:
            raise ConfigError(f"gamma_scale must lie in [0, 1], got {self.gamma_scale}")

    def eval(self, t: float) -> tuple[float, float, float]:
        if t < 0:
            raise ValueError(f"iteration must be >= 0, got {t}")
        return self.g_alpha(t), self.g_beta(t), self.gamma_scale * self.g_gamma(t)

    def always_plain(self) -> bool:
        """True when the probe terms never contribute."""
        return self.g_beta == AnnealFn("constant", 0.0) and (
            self.g_gamma == AnnealFn("constant", 0.0) or self.gamma_scale == 0.0)


def preset(personality: str, total_iterations: int, rho: float = 0.5, alpha0: float | None = None,
           beta0: float | None = None, gamma0: float | None = None, gamma_scale: float = 1.0,
           ramp: str = "quadratic", probe_multipliers=()) -> ScheduleSet:
    if total_iterations <= 0:
        raise ConfigError("total_iterations must be positive")
    if personality not in PERSONALITIES:
        raise ConfigError(f"unknown personality {personality!r}; expected one of {PERSONALITIES}")
    if ramp not in RAMPS:
        raise ConfigError(f"ramp must be one of {sorted(RAMPS)}")
    if not 0.0 < rho <= 1.0:
        raise ConfigError(f"rho must lie in (0, 1], got {rho}")
    t_m = rho * total_iterations
    const = lambda v: AnnealFn("constant", v)  # noqa: E731
    extra = dict(gamma_scale=gamma_scale, probe_multipliers=tuple(probe_multipliers))
    if personality == "independent":
        return ScheduleSet(const(1.0), const(0.0), const(0.0), **extra)
    if personality == "gullible":
        return ScheduleSet(const(0.0), const(1.0), const(0.0), **extra)
    if personality == "adamant":
        return ScheduleSet(
            const(1.0),
            AnnealFn("linear", 0.3 if beta0 is None else beta0, 0.0, t_m),
            AnnealFn("linear", 0.1 if gamma0 is None else gamma0, 0.0, t_m),
            **extra,
        )
    return ScheduleSet(
        AnnealFn("ramp", 0.1 if alpha0 is None else alpha0, 1.0, t_m, RAMPS[ramp]),
        AnnealFn("linear", 1.0 if beta0 is None else beta0, 0.0, t_m),
        AnnealFn("linear", 1.0 if gamma0 is None else gamma0, 0.0, t_m),
        **extra,
    )


@dataclass(frozen=True)
class LrSchedule:
    eta0: float
    drop_epoch: int = 75
    drop_factor: float = 100.0
    recovery_factor: float = 10.0

    def __post_init__(self):
        if self.eta0 <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.eta0}")

    def lr_at(self, epoch: int, recoveries: int = 0) -> float:
        # repeated division keeps each recovery an exact /10 of the previous rate
        eta = self.eta0
        if epoch >= self.drop_epoch:
            eta /= self.drop_factor
        for _ in range(recoveries):
            eta /= self.recovery_factor
        return eta


def lr_at(sched: LrSchedule, epoch: int, recoveries: int = 0) -> float:
    return sched.lr_at(epoch, recoveries)
