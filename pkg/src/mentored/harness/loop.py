"""The mentored training loop.

One loop serves every run type. With a mentor and a schedule whose probe
weights are active it performs mentored training; with the independent
schedule (or no mentor) it is a plain supervised trainer. Terms with zero
weight are skipped outright, which is what makes the independent run through
this loop bitwise identical to plain training.
"""
from __future__ import annotations

import csv
import io
import math
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import net as netlib
from ..errors import EmptyDataset, NonFiniteActivation, ProbeShapeError, UnlabeledDataset, UnrecoverableRun
from ..data import BatchPlan, Dataset, batches
from ..optim import Optimizer
from ..probe import ProbeSet, ProbeSpec, combined_loss, probe_grad, probe_loss
from ..schedule import LrSchedule, ScheduleSet, preset
from ..tensor import make_rng
from .config import ExperimentConfig

METRICS_VERSION = "# mentored-metrics v1"
COLUMNS = ["epoch", "iteration", "alpha", "beta", "gamma", "lr", "loss_s", "psi", "e", "reg",
           "train_acc", "test_acc", "test_loss", "recoveries", "seconds"]

DROPOUT_STREAM = 21
EVAL_CHUNK = 1000


class Diverged(Exception):
    """Raised inside an epoch when a non-finite or exploding value shows up."""


@dataclass
class RunArtifacts:
    out_dir: Path
    metrics: Path
    last: Path
    best: Path
    rolling: Path
    config: Path
    rows: list = field(default_factory=list)
    final: dict = field(default_factory=dict)  # metrics of the weights the run ends with
    recoveries: int = 0
    stopped_early: bool = False
    frozen_eligible: bool = False

    @property
    def test_acc(self):
        return self.final["test_acc"]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (list, tuple)):
        return ";".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    buf.write(METRICS_VERSION + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in COLUMNS])
    return buf.getvalue()


def read_metrics(path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def evaluate(net: netlib.Network, ds: Dataset, chunk: int = EVAL_CHUNK):
    """Eval-mode top-1 accuracy and mean cross-entropy."""
    if len(ds) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    if ds.labels is None:
        raise UnlabeledDataset("evaluation needs labels")
    correct, loss_sum = 0, 0.0
    for start in range(0, len(ds), chunk):
        x, y = ds.images[start:start + chunk], ds.labels[start:start + chunk]
        probs = net.forward(x, "eval", check=False)
        loss, _ = netlib.cross_entropy(probs, y)
        loss_sum += loss * len(y)
        correct += int((probs.argmax(axis=1) == y).sum())
    return correct / len(ds), loss_sum / len(ds)


def resolve_probes(probes: ProbeSet, mentor: netlib.Network, mentee: netlib.Network) -> ProbeSet:
    """Normalise negative layer indices and check each pair is comparable."""
    def norm(idx, net, who):
        j = idx + len(net) if idx < 0 else idx
        if not 0 <= j < len(net):
            raise ProbeShapeError(f"{who} layer {idx} out of range for a {len(net)}-layer network")
        return j

    out = []
    for p in probes.all():
        l, j = norm(p.mentor_layer, mentor, "mentor"), norm(p.mentee_layer, mentee, "mentee")
        ml, sl = mentor.layers[l], mentee.layers[j]
        if p.group == "softmax":
            if not (isinstance(ml, netlib.SoftmaxT) and isinstance(sl, netlib.SoftmaxT)):
                raise ProbeShapeError("the softmax probe must connect the two softmax layers")
            if ml.out_shape != sl.out_shape:
                raise ProbeShapeError(f"softmax probe needs equal class counts, got {ml.out_shape} and {sl.out_shape}")
        else:
            ms, ss = ml.out_shape, sl.out_shape
            if len(ms) != len(ss) or len(ms) not in (1, 3):
                raise ProbeShapeError(f"probe ({l}, {j}) pairs incompatible activations {ms} and {ss}")
            if len(ms) == 3 and ms[1:] != ss[1:]:
                raise ProbeShapeError(f"probe ({l}, {j}) pairs feature maps of different sizes {ms} and {ss}")
        out.append(ProbeSpec(l, j, p.group, p.weight))
    return ProbeSet.from_entries(out)


class Trainer:
    def __init__(self, cfg: ExperimentConfig, student: netlib.Network, train: Dataset, test: Dataset | None = None,
                 mentor: netlib.Network | None = None, probes: ProbeSet | None = None,
                 schedule: ScheduleSet | None = None, out_dir=None, on_recover=None):
        if len(train) == 0:
            raise EmptyDataset("training set is empty")
        if not isinstance(student.layers[-1], netlib.SoftmaxT):
            raise ProbeShapeError("the trained network must end in a softmax layer")
        self.cfg = cfg
        self.student = student
        self.train = train
        self.test = test if test is not None and test.labeled else None
        self.mentor = mentor.freeze() if mentor is not None else None
        probes = probes if probes is not None else ProbeSet()
        self.probes = resolve_probes(probes, mentor, student) if mentor is not None and len(probes) else ProbeSet()
        self.plan = BatchPlan(cfg.batch_size, cfg.seed)
        self.per_epoch = math.ceil(len(train) / cfg.batch_size)
        total = max(cfg.epochs * self.per_epoch, 1)
        self.schedule = schedule or preset(
            cfg.personality, total, cfg.rho, cfg.alpha0, cfg.beta0, cfg.gamma0, cfg.gamma_scale, cfg.ramp)
        self.lr_sched = LrSchedule(cfg.lr, cfg.lr_drop_epoch, cfg.lr_drop_factor, cfg.recovery_factor)
        self.opt = Optimizer(cfg.optimizer, cfg.momentum, cfg.rms_decay, cfg.epsilon)
        self.rng = make_rng(cfg.seed, DROPOUT_STREAM)
        self.out_dir = Path(out_dir or cfg.out_dir)
        self.on_recover = on_recover
        self._pending_faults = list(cfg.inject_nan)
        self.recoveries = 0
        self.t = 0
        self.lr = self.lr_sched.lr_at(0)
        self.rolling = student.snapshot()
        self.logit_layer = len(student) - 2
        self.out_temperature = student.layers[-1].temperature

    # -- one mini-batch --------------------------------------------------

    def _objective(self, x, y, t, mode):
        """Forward both networks, returning the loss pieces and injected gradients."""
        alpha, beta, gamma = self.schedule.eval(t)
        rng = self.rng if mode == "train" else None
        probs = self.student.forward(x, mode, rng)
        inj = defaultdict(lambda: 0)
        loss_s = None
        if alpha > 0 and y is not None:
            loss_s, g = netlib.cross_entropy(probs, y, self.out_temperature)
            inj[self.logit_layer] = alpha * g
        psis = [None] * len(self.probes)
        body_on = beta > 0 and self.probes.body
        soft_on = gamma > 0 and self.probes.softmax is not None
        if body_on or soft_on:
            self.mentor.forward(x, "eval")
            mc, sc = self.mentor.cache, self.student.cache
            if body_on:
                for k, p in enumerate(self.probes.body):
                    psi = probe_loss(mc[p.mentor_layer], sc[p.mentee_layer])
                    psis[k] = psi
                    if p.weight:
                        inj[p.mentee_layer] = inj[p.mentee_layer] + \
                            (beta * p.weight) * probe_grad(mc[p.mentor_layer], sc[p.mentee_layer], psi)
            if soft_on:
                p = self.probes.softmax
                T = self.cfg.temperature
                pm = netlib.softmax_t(mc[p.mentor_layer - 1], T)
                ps = netlib.softmax_t(sc[p.mentee_layer - 1], T)
                psi = probe_loss(pm, ps)
                psis[-1] = psi
                g = netlib.softmax_t_backward(ps, probe_grad(pm, ps, psi), T)
                inj[p.mentee_layer - 1] = inj[p.mentee_layer - 1] + gamma * g
        body = psis[:len(self.probes.body)]
        e = combined_loss(loss_s, body, psis[-1] if soft_on else None, alpha if loss_s is not None else 0.0,
                          beta if body_on else 0.0,
                          gamma if soft_on else 0.0, [p.weight for p in self.probes.body])
        return probs, loss_s, psis, e, dict(inj)

    def _step(self, x, y, t, lr, inject=False):
        try:
            probs, loss_s, psis, e, inj = self._objective(x, y, t, "train")
        except NonFiniteActivation as exc:
            raise Diverged(str(exc)) from None
        if not math.isfinite(e) or any(p is not None and not math.isfinite(p) for p in psis):
            raise Diverged("non-finite loss")
        grads = self.student.backward(inj)
        reg, reg_grads = netlib.reg_penalty(self.student, self.cfg.l1, self.cfg.l2)
        grads = [g if r is None else g + r for g, r in zip(grads, reg_grads)]
        sq = sum(float(np.vdot(g, g)) for g in grads)
        if not math.isfinite(sq) or math.sqrt(sq) > self.cfg.grad_norm_limit:
            raise Diverged(f"gradient norm {math.sqrt(sq) if math.isfinite(sq) else sq}")
        params = [arr for _, _, arr in self.student.trainable()]
        self.opt.step(params, grads, lr)
        if inject:
            params[0].flat[0] = np.nan
        if not all(np.isfinite(p).all() for p in params):
            raise Diverged("non-finite parameters")
        correct = None if y is None else int((probs.argmax(axis=1) == y).sum())
        return loss_s, psis, e, reg, correct

    # -- epochs ----------------------------------------------------------

    def _train_epoch(self, epoch, lr):
        inject = bool(self._pending_faults) and self._pending_faults[0] == epoch
        if inject:
            self._pending_faults.pop(0)
        sums = defaultdict(float)
        psi_sums = np.zeros(len(self.probes))
        psi_counts = np.zeros(len(self.probes))
        correct = seen = 0
        labels = self.train.labels
        for b, idx in enumerate(batches(len(self.train), self.plan, epoch)):
            x = self.train.images[idx]
            y = labels[idx] if labels is not None else None
            loss_s, psis, e, reg, ok = self._step(x, y, self.t, lr, inject=inject and b == 0)
            n = len(idx)
            if loss_s is not None:
                sums["loss_s"] += loss_s * n
                sums["loss_n"] += n
            for k, psi in enumerate(psis):
                if psi is not None:
                    psi_sums[k] += psi
                    psi_counts[k] += 1
            sums["e"] += e * n
            sums["reg"] += reg * n
            if ok is not None:
                correct += ok
            seen += n
            self.t += 1
        return self._row(epoch + 1, self.t - 1, lr, sums, psi_sums, psi_counts, correct if labels is not None else None,
                         seen)

    def _row(self, epoch, t, lr, sums, psi_sums, psi_counts, correct, seen):
        alpha, beta, gamma = self.schedule.eval(t)
        psi = [float(s / c) if c else None for s, c in zip(psi_sums, psi_counts)]
        return {
            "epoch": epoch,
            "iteration": t,
            "alpha": float(alpha),
            "beta": float(beta),
            "gamma": float(gamma),
            "lr": float(lr),
            "loss_s": sums["loss_s"] / sums["loss_n"] if sums["loss_n"] else None,
            "psi": psi if any(v is not None for v in psi) else None,
            "e": sums["e"] / seen,
            "reg": sums["reg"] / seen,
            "train_acc": None if correct is None else correct / seen,
            "recoveries": self.recoveries,
        }

    def _initial_row(self):
        """Eval-mode pass over the training set at the initial weights."""
        sums = defaultdict(float)
        psi_sums = np.zeros(len(self.probes))
        psi_counts = np.zeros(len(self.probes))
        correct, labels = 0, self.train.labels
        for start in range(0, len(self.train), self.cfg.batch_size):
            x = self.train.images[start:start + self.cfg.batch_size]
            y = labels[start:start + self.cfg.batch_size] if labels is not None else None
            probs, loss_s, psis, e, _ = self._objective(x, y, 0, "eval")
            n = len(x)
            if loss_s is not None:
                sums["loss_s"] += loss_s * n
                sums["loss_n"] += n
            for k, psi in enumerate(psis):
                if psi is not None:
                    psi_sums[k] += psi
                    psi_counts[k] += 1
            sums["e"] += e * n
            if y is not None:
                correct += int((probs.argmax(axis=1) == y).sum())
        sums["reg"] = netlib.reg_penalty(self.student, self.cfg.l1, self.cfg.l2)[0] * len(self.train)
        return self._row(0, 0, self.lr_sched.lr_at(0), sums, psi_sums, psi_counts,
                         correct if labels is not None else None, len(self.train))

    def recover(self):
        """Restore the previous epoch's parameters and divide the learning rate by ten."""
        if self.recoveries >= self.cfg.max_recoveries:
            raise UnrecoverableRun(f"gave up after {self.recoveries} recoveries")
        self.student.restore(self.rolling)
        self.recoveries += 1
        self.opt.reset()
        self.lr = self.lr / self.cfg.recovery_factor
        return self.lr

    def _test_metrics(self, row):
        if self.test is None:
            row["test_acc"] = row["test_loss"] = None
            return
        row["test_acc"], row["test_loss"] = evaluate(self.student, self.test)

    def _meta(self, row):
        return {"seed": self.cfg.seed, "epoch": row["epoch"],
                "metrics": {k: v for k, v in row.items() if k != "seconds"}}

    def run(self) -> RunArtifacts:
        cfg = self.cfg
        out = self.out_dir
        out.mkdir(parents=True, exist_ok=True)
        arts = RunArtifacts(out, out / "metrics.csv", out / "last.ckpt", out / "best.ckpt", out / "rolling.ckpt",
                            out / "config.json")
        arts.config.write_text(cfg.dumps())
        clock = time.perf_counter()

        def stamp(row):
            row["seconds"] = None if cfg.deterministic else round(time.perf_counter() - clock, 3)
            arts.rows.append(row)
            arts.metrics.write_text(metrics_csv(arts.rows))

        row = self._initial_row()
        self._test_metrics(row)
        stamp(row)
        self.rolling = self.student.snapshot()
        netlib.save(self.student, arts.rolling, self._meta(row))

        best_loss, best_snap, best_row, waited = None, None, None, 0
        for epoch in range(cfg.epochs):
            self.lr = self.lr_sched.lr_at(epoch, self.recoveries)
            t_start = self.t
            while True:
                try:
                    row = self._train_epoch(epoch, self.lr)
                    break
                except Diverged:
                    self.t = t_start
                    self.recover()
                    if self.on_recover is not None:
                        self.on_recover(self, epoch)
            self._test_metrics(row)
            stamp(row)
            self.rolling = self.student.snapshot()
            netlib.save(self.student, arts.rolling, self._meta(row))
            if epoch >= cfg.lr_drop_epoch and self.test is not None:
                if best_loss is None or row["test_loss"] < best_loss:
                    best_loss, best_snap, best_row, waited = row["test_loss"], self.student.snapshot(), row, 0
                    netlib.save(self.student, arts.best, self._meta(row))
                else:
                    waited += 1
                    if waited >= cfg.early_stop_patience:
                        self.student.restore(best_snap)
                        arts.stopped_early = True
                        row = best_row
                        break
        arts.final = best_row if arts.stopped_early else row
        netlib.save(self.student, arts.last, self._meta(arts.final))
        if best_snap is None:
            netlib.save(self.student, arts.best, self._meta(arts.final))
        arts.recoveries = self.recoveries
        return arts
