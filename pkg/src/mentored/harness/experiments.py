"""Run types built on the training loop: mentor, mentee, unsupervised
pretraining, classifier fine-tuning and the redaction grid."""
from __future__ import annotations

import csv
import hashlib
import logging
from functools import lru_cache
from pathlib import Path

import numpy as np

from .. import net as netlib
from ..data import Dataset, RedactionSpec, load_idx, preprocess, redact
from ..errors import ArchMismatch, DataError
from ..probe import ProbeSet
from ..schedule import preset
from ..tensor import make_rng
from .config import ExperimentConfig
from .loop import RunArtifacts, Trainer

log = logging.getLogger(__name__)

INIT_STREAM = 31
SUBSET_STREAM = 32


@lru_cache(maxsize=8)
def _load_split(train_images, train_labels, test_images, test_labels, mean_mode, with_labels):
    try:
        train = load_idx(train_images, train_labels if with_labels else None)
        train = preprocess(train, mode=mean_mode)
        test = None
        if with_labels and test_images and test_labels:
            test = preprocess(load_idx(test_images, test_labels, class_count=train.class_count), mean=train.mean)
    except FileNotFoundError as exc:
        raise DataError(f"missing data file: {exc.filename}") from None
    return train, test


def load_data(cfg: ExperimentConfig, labels: bool = True) -> tuple[Dataset, Dataset | None]:
    """Training and test splits per the config; the train mean is computed before redaction."""
    if labels and not cfg.train_labels:
        raise DataError("this run needs train_labels")
    train, test = _load_split(cfg.train_images, cfg.train_labels, cfg.test_images, cfg.test_labels,
                              cfg.mean_mode, labels)
    redact_seed = cfg.seed if cfg.redact_seed is None else cfg.redact_seed
    if cfg.redact_p is not None:
        train = redact(train, RedactionSpec(cfg.redact_p, redact_seed))
    if cfg.subset_size is not None:
        idx = make_rng(redact_seed, SUBSET_STREAM).permutation(len(train))[:cfg.subset_size]
        train = train.subset(np.sort(idx))
    return train, test


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def build_student(cfg: ExperimentConfig, arch, train: Dataset) -> netlib.Network:
    rng = make_rng(cfg.seed, INIT_STREAM)
    return netlib.build(arch, train.images.shape[1:], rng, classes=train.class_count, dropout=cfg.dropout,
                        init_std=cfg.init_std, batchnorm=cfg.batchnorm)


def _out(cfg, out_dir):
    return Path(out_dir or cfg.out_dir)


def train_plain(cfg: ExperimentConfig, arch, out_dir=None, data=None, **kw) -> RunArtifacts:
    """Supervised training with the independent schedule (no mentor)."""
    train, test = data or load_data(cfg)
    student = build_student(cfg, arch, train)
    schedule = preset("independent", max(cfg.epochs, 1))
    return Trainer(cfg, student, train, test, schedule=schedule, out_dir=_out(cfg, out_dir), **kw).run()


def train_mentor(cfg: ExperimentConfig, out_dir=None, data=None, **kw) -> RunArtifacts:
    arts = train_plain(cfg, cfg.mentor_arch, out_dir, data, **kw)
    arts.frozen_eligible = True
    return arts


def load_mentor(path) -> netlib.Network:
    return netlib.load(path).freeze()


def train_mentee(cfg: ExperimentConfig, mentor_checkpoint=None, out_dir=None, data=None, **kw) -> RunArtifacts:
    mentor_path = mentor_checkpoint or cfg.mentor_checkpoint
    if not mentor_path:
        raise DataError("train-mentee needs a mentor checkpoint")
    before = file_digest(mentor_path)
    mentor = load_mentor(mentor_path)
    train, test = data or load_data(cfg)
    if cfg.init_checkpoint:
        student = netlib.load(cfg.init_checkpoint)
    else:
        student = build_student(cfg, cfg.mentee_arch, train)
    trainer = Trainer(cfg, student, train, test, mentor=mentor, probes=ProbeSet.from_entries(cfg.probes),
                      out_dir=_out(cfg, out_dir), **kw)
    arts = trainer.run()
    if file_digest(mentor_path) != before:
        raise RuntimeError(f"mentor checkpoint {mentor_path} changed during training")
    return arts


def pretrain_unsupervised(cfg: ExperimentConfig, mentor_checkpoint=None, dataset: Dataset | None = None,
                          out_dir=None, **kw) -> RunArtifacts:
    """Gullible training on label-free data: only the body probes are back-propagated."""
    mentor_path = mentor_checkpoint or cfg.mentor_checkpoint
    if not mentor_path:
        raise DataError("pretrain-unsupervised needs a mentor checkpoint")
    mentor = load_mentor(mentor_path)
    if dataset is None:
        dataset, _ = load_data(cfg, labels=False)
    dataset = dataset.unlabeled()
    cfg = cfg.replace(personality="gullible")
    if cfg.init_checkpoint:
        student = netlib.load(cfg.init_checkpoint)
    else:
        rng = make_rng(cfg.seed, INIT_STREAM)
        student = netlib.build(cfg.mentee_arch, dataset.images.shape[1:], rng, classes=mentor.output_shape[0],
                               dropout=cfg.dropout, init_std=cfg.init_std, batchnorm=cfg.batchnorm)
    trainer = Trainer(cfg, student, dataset, None, mentor=mentor, probes=ProbeSet.from_entries(cfg.probes),
                      out_dir=_out(cfg, out_dir), **kw)
    return trainer.run()


def head_index(net: netlib.Network) -> int:
    """Index of the final dense layer, which must be followed only by the softmax."""
    if len(net) < 2 or not isinstance(net.layers[-1], netlib.SoftmaxT) or not isinstance(net.layers[-2], netlib.Dense):
        raise ArchMismatch("classifier fine-tuning needs a network ending in dense + softmax")
    return len(net) - 2


def prepare_head(net: netlib.Network, classes: int, rng) -> netlib.Network:
    """Freeze everything below the classifier head.

    The head keeps its weights when the class count matches and is rebuilt
    from ``rng`` otherwise.
    """
    h = head_index(net)
    if net.layers[h].units != classes:
        specs = net.specs()
        specs[h] = dict(specs[h], units=classes)
        fresh = netlib.Network.from_specs(specs, net.input_shape, rng)
        for i in range(h):
            for name, arr in net.layers[i].params.items():
                fresh.layers[i].params[name][...] = arr
            for name, arr in net.layers[i].buffers.items():
                fresh.layers[i].buffers[name][...] = arr
        net = fresh
    for i, layer in enumerate(net.layers):
        layer.frozen = i < h
    return net


def finetune_classifier(checkpoint, cfg: ExperimentConfig, data=None, out_dir=None, **kw) -> RunArtifacts:
    """Retrain only the dense + softmax head of ``checkpoint`` on the configured dataset."""
    net = netlib.load(checkpoint)
    train, test = data or load_data(cfg)
    if tuple(train.images.shape[1:]) != net.input_shape:
        raise ArchMismatch(f"checkpoint expects inputs {net.input_shape}, dataset has {train.images.shape[1:]}")
    net = prepare_head(net, train.class_count, make_rng(cfg.seed, INIT_STREAM))
    schedule = preset("independent", max(cfg.epochs, 1))
    return Trainer(cfg.replace(personality="independent"), net, train, test, schedule=schedule,
                   out_dir=_out(cfg, out_dir), **kw).run()


def run_grid(cfg: ExperimentConfig, mentor_checkpoint=None, out_dir=None) -> Path:
    """Mentored vs independent mentees over the redaction grid; writes summary.csv."""
    out = _out(cfg, out_dir)
    rows = []
    for p in cfg.grid_p:
        for personality in cfg.grid_personalities:
            for seed in cfg.grid_seeds:
                run_cfg = cfg.replace(redact_p=p, personality=personality, seed=seed)
                run_dir = out / f"p{p}" / personality / f"seed{seed}"
                log.info("grid run p=%s %s seed=%s", p, personality, seed)
                arts = train_mentee(run_cfg, mentor_checkpoint, out_dir=run_dir)
                rows.append({"p": p, "personality": personality, "seed": seed,
                             "test_acc": arts.final["test_acc"], "epochs": arts.rows[-1]["epoch"],
                             "stopped_early": int(arts.stopped_early), "recoveries": arts.recoveries})
    summary = out / "summary.csv"
    out.mkdir(parents=True, exist_ok=True)
    with summary.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["p"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        for p in cfg.grid_p:
            for personality in cfg.grid_personalities:
                accs = [r["test_acc"] for r in rows if r["p"] == p and r["personality"] == personality]
                writer.writerow({"p": p, "personality": personality, "seed": "mean",
                                 "test_acc": repr(float(np.mean(accs)))})
    return summary
