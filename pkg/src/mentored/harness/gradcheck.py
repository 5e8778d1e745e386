"""Finite-difference check of the full mentored objective.

The objective is ``e`` plus the l1/l2 penalty, evaluated on one fixed batch
with the mentee in train mode. Dropout masks are frozen by re-seeding the
generator before every evaluation, so the objective is a deterministic
function of the mentee parameters.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .. import net as netlib
from ..probe import ProbeSet
from ..schedule import AnnealFn, ScheduleSet
from ..tensor import F64, gaussian_fill, make_rng
from ..data import Dataset
from .config import ExperimentConfig
from .loop import Trainer

STEP = 1e-5
TOLERANCE = 1e-5
# denominator floor so an exactly-zero gradient (a bias feeding batch norm)
# compares finite-difference noise against a scale instead of against itself
NORM_FLOOR = 1e-4
CASES = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (1.0, 0.5, 0.25))

TINY_MENTOR = [
    {"kind": "dense", "units": 12, "init_std": 0.5}, {"kind": "relu"},
    {"kind": "dense", "units": 10, "init_std": 0.5}, {"kind": "relu"},
    {"kind": "dense", "units": 8, "init_std": 0.5}, {"kind": "relu"},
    {"kind": "dense", "units": 3, "init_std": 0.5}, {"kind": "softmax"},
]
TINY_MENTEE = [
    {"kind": "dense", "units": 10, "init_std": 0.5}, {"kind": "batchnorm"}, {"kind": "relu"},
    {"kind": "dropout", "rate": 0.25},
    {"kind": "dense", "units": 8, "init_std": 0.5}, {"kind": "relu"},
    {"kind": "dense", "units": 3, "init_std": 0.5}, {"kind": "softmax"},
]
TINY_PROBES = [
    {"mentor_layer": 1, "mentee_layer": 2},
    {"mentor_layer": 5, "mentee_layer": 5},
    {"mentor_layer": -1, "mentee_layer": -1, "group": "softmax"},
]


def constant_schedule(alpha, beta, gamma) -> ScheduleSet:
    return ScheduleSet(AnnealFn("constant", alpha), AnnealFn("constant", beta), AnnealFn("constant", gamma))


class _Objective:
    def __init__(self, cfg, mentee, mentor, probes, x, y, weights, seed):
        self.trainer = Trainer(cfg, mentee, Dataset(x, y, mentee.output_shape[0]), mentor=mentor, probes=probes,
                               schedule=constant_schedule(*weights), out_dir=".")
        self.x, self.y, self.seed = x, y, seed
        self.cfg = cfg

    def value(self):
        self.trainer.rng = make_rng(self.seed, 99)
        _, _, _, e, inj = self.trainer._objective(self.x, self.y, 0, "train")
        reg, _ = netlib.reg_penalty(self.trainer.student, self.cfg.l1, self.cfg.l2)
        return e + reg, inj

    def analytic(self):
        _, inj = self.value()
        grads = self.trainer.student.backward(inj)
        _, reg = netlib.reg_penalty(self.trainer.student, self.cfg.l1, self.cfg.l2)
        return [g if r is None else g + r for g, r in zip(grads, reg)]


def relative_error(analytic, numeric) -> float:
    """Norm-wise relative error of one parameter tensor."""
    denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), NORM_FLOOR)
    return float(np.linalg.norm(analytic - numeric) / denom)


def check_case(mentee, mentor, probes, x, y, weights, cfg, seed=0, step=STEP):
    obj = _Objective(cfg, mentee, mentor, probes, x, y, weights, seed)
    mentor_before = [a.copy() for _, a in mentor.state()]
    analytic = obj.analytic()
    mentor_grads = mentor.backward({len(mentor) - 1: np.ones_like(mentor.cache[-1])}) if mentor.cache else []
    worst, worst_name, max_abs = 0.0, None, 0.0
    for (i, name, arr), g in zip(mentee.trainable(), analytic):
        numeric = np.zeros_like(arr)
        for k in range(arr.size):
            old = arr.flat[k]
            arr.flat[k] = old + step
            fp = obj.value()[0]
            arr.flat[k] = old - step
            fm = obj.value()[0]
            arr.flat[k] = old
            numeric.flat[k] = (fp - fm) / (2 * step)
        rel = relative_error(g, numeric)
        max_abs = max(max_abs, float(np.abs(g - numeric).max()))
        if rel > worst:
            worst, worst_name = rel, f"{i}.{name}"
    mentor_unchanged = all(np.array_equal(a, b) for (_, a), b in zip(mentor.state(), mentor_before))
    return {
        "weights": list(weights),
        "max_rel_error": worst,
        "worst_param": worst_name,
        "max_abs_error": max_abs,
        "mentor_grad_entries": len(mentor_grads),
        "mentor_unchanged": mentor_unchanged,
        "passed": worst <= TOLERANCE and not mentor_grads and mentor_unchanged,
    }


def gradcheck(cfg: ExperimentConfig | None = None, batch=4, seed=0, out_path=None, cases=CASES,
              mentor_arch=None, mentee_arch=None, probes=None, input_shape=(6,)):
    """Compare analytic and central-difference gradients of the mentored objective in f64."""
    cfg = cfg or ExperimentConfig(l1=1e-4, l2=1e-4)
    rng = make_rng(seed, 1)
    mentor = netlib.Network.from_specs(mentor_arch or TINY_MENTOR, input_shape, rng, dtype=F64).freeze()
    mentee = netlib.Network.from_specs(mentee_arch or TINY_MENTEE, input_shape, rng, dtype=F64)
    x = gaussian_fill((batch,) + tuple(input_shape), 0.0, 1.0, rng, dtype=F64)
    y = rng.integers(0, mentee.output_shape[0], size=batch)
    probe_set = ProbeSet.from_entries(probes or TINY_PROBES)
    results = [check_case(mentee, mentor, probe_set, x, y, w, cfg, seed) for w in cases]
    report = {
        "step": STEP,
        "tolerance": TOLERANCE,
        "batch": batch,
        "mentee_params": int(sum(a.size for _, _, a in mentee.trainable())),
        "cases": results,
        "max_rel_error": max(r["max_rel_error"] for r in results),
        "passed": all(r["passed"] for r in results),
    }
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(json.dumps(report, indent=2) + "\n")
    return report
