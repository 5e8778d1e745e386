import json
import math

import numpy as np
import pytest

from mentored import net as netlib
from mentored.cli import main
from mentored.data import BatchPlan, Dataset, batches
from mentored.errors import (
    ArchMismatch,
    ConfigError,
    DataError,
    EmptyDataset,
    NotVisualizable,
    ProbeShapeError,
    UnlabeledDataset,
    UnrecoverableRun,
)
from mentored.harness import experiments as ex
from mentored.harness.config import ExperimentConfig
from mentored.harness.filters import export_filters, grid_shape, read_pgm, tile_grid, write_pgm
from mentored.harness.gradcheck import gradcheck
from mentored.harness.loop import COLUMNS, METRICS_VERSION, Trainer, evaluate, read_metrics, resolve_probes
from mentored.probe import ProbeSet
from mentored.schedule import preset
from mentored.tensor import make_rng

from conftest import mnist_paths
from oracles import plain_sgd


def cfg_for(tmp_path, **kw):
    base = dict(mnist_paths(), out_dir=str(tmp_path / "run"), deterministic=True, epochs=3, subset_size=600,
                batch_size=200)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def quick_mentor(tmp_path_factory, mnist):
    """A briefly trained MLP mentor; enough structure for probe tests."""
    out = tmp_path_factory.mktemp("mentor")
    cfg = ExperimentConfig(**mnist, epochs=2, subset_size=5000, deterministic=True, lr=2e-4)
    arts = ex.train_mentor(cfg, out_dir=out)
    return arts.last


# ---------------------------------------------------------------- config

def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"epochs": 3, "learning_rate": 0.1})
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "c.json")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "missing.json")


def test_config_round_trip_and_defaults(tmp_path):
    cfg = ExperimentConfig(seed=5, redact_p=10)
    (tmp_path / "c.json").write_text(cfg.dumps())
    assert ExperimentConfig.load(tmp_path / "c.json") == cfg
    assert (cfg.epochs, cfg.l1, cfg.l2, cfg.dropout, cfg.batch_size, cfg.lr_drop_epoch) == (150, 1e-4, 1e-4, 0.5,
                                                                                            500, 75)


def test_config_validation():
    for bad in ({"dropout": 1.0}, {"l1": -1.0}, {"temperature": 0.0}, {"redact_p": 0},
                {"probes": [{"mentor_layer": 1}]}):
        with pytest.raises(ConfigError):
            ExperimentConfig(**bad)


# ---------------------------------------------------------------- plain training

def test_zero_epoch_run_keeps_initial_weights(tmp_path, mnist):
    cfg = cfg_for(tmp_path, epochs=0)
    arts = ex.train_mentor(cfg)
    rows = read_metrics(arts.metrics)
    assert len(rows) == 1 and rows[0]["epoch"] == "0"
    train, _ = ex.load_data(cfg)
    init = ex.build_student(cfg, cfg.mentor_arch, train)
    assert netlib.checkpoint_bytes(netlib.load(arts.last)) == netlib.checkpoint_bytes(init)
    assert arts.frozen_eligible


def test_metrics_csv_layout(tmp_path, mnist):
    arts = ex.train_plain(cfg_for(tmp_path), "mlp-mentee")
    lines = arts.metrics.read_text().splitlines()
    assert lines[0] == METRICS_VERSION
    assert lines[1].split(",") == COLUMNS
    rows = read_metrics(arts.metrics)
    assert [r["epoch"] for r in rows] == ["0", "1", "2", "3"]
    assert all(r["seconds"] == "" for r in rows)  # deterministic mode
    assert json.loads(arts.config.read_text())["epochs"] == 3


def test_deterministic_runs_are_byte_identical(tmp_path, mnist):
    a = ex.train_plain(cfg_for(tmp_path, out_dir=str(tmp_path / "a")), "mlp-mentee")
    b = ex.train_plain(cfg_for(tmp_path, out_dir=str(tmp_path / "b")), "mlp-mentee")
    assert a.metrics.read_bytes() == b.metrics.read_bytes()
    assert a.last.read_bytes() == b.last.read_bytes()


def test_non_deterministic_mode_records_seconds(tmp_path, mnist):
    arts = ex.train_plain(cfg_for(tmp_path, deterministic=False, epochs=1), "mlp-mentee")
    assert float(read_metrics(arts.metrics)[-1]["seconds"]) > 0


def test_trainer_sgd_equals_hand_written_update(tmp_path, mnist):
    cfg = cfg_for(tmp_path, optimizer="sgd", lr=0.05, epochs=2)
    train, test = ex.load_data(cfg)
    arts = ex.train_plain(cfg, "mlp-mentee", data=(train, test))

    net = ex.build_student(cfg, "mlp-mentee", train)
    drop = make_rng(cfg.seed, 21)
    for epoch in range(cfg.epochs):
        for idx in batches(len(train), BatchPlan(cfg.batch_size, cfg.seed), epoch):
            probs = net.forward(train.images[idx], "train", drop)
            _, g = netlib.cross_entropy(probs, train.labels[idx])
            grads = net.backward({len(net) - 2: g})
            _, reg = netlib.reg_penalty(net, cfg.l1, cfg.l2)
            grads = [gr if r is None else gr + r for gr, r in zip(grads, reg)]
            params = [arr for _, _, arr in net.trainable()]
            for p, new in zip(params, plain_sgd(params, grads, cfg.lr)):
                p[...] = new
    assert netlib.checkpoint_bytes(netlib.load(arts.last)) == netlib.checkpoint_bytes(net)


# ---------------------------------------------------------------- mentored training

def test_independent_mentee_equals_plain_training(tmp_path, quick_mentor):
    cfg = cfg_for(tmp_path, redact_p=100, subset_size=None, personality="independent")
    plain = ex.train_plain(cfg.replace(out_dir=str(tmp_path / "plain")), cfg.mentee_arch)
    mentee = ex.train_mentee(cfg.replace(out_dir=str(tmp_path / "mentee")), quick_mentor)
    assert plain.metrics.read_bytes() == mentee.metrics.read_bytes()
    assert plain.last.read_bytes() == mentee.last.read_bytes()


def test_mentor_checkpoint_untouched(tmp_path, quick_mentor):
    before = quick_mentor.read_bytes()
    ex.train_mentee(cfg_for(tmp_path, epochs=2), quick_mentor)
    assert quick_mentor.read_bytes() == before


def test_obedient_probe_loss_falls(tmp_path, quick_mentor):
    # 20 epochs keep epoch 5 inside the first half, where the probes are active
    arts = ex.train_mentee(cfg_for(tmp_path, redact_p=100, subset_size=None, epochs=20), quick_mentor)
    rows = read_metrics(arts.metrics)
    psi = lambda r: sum(float(v) for v in r["psi"].split(";"))  # noqa: E731
    assert psi(rows[5]) < psi(rows[0])
    assert rows[-1]["psi"] == ""


def test_logged_weights_match_schedule(tmp_path, quick_mentor):
    cfg = cfg_for(tmp_path, epochs=3)
    arts = ex.train_mentee(cfg, quick_mentor)
    per_epoch = math.ceil(600 / cfg.batch_size)
    sched = preset("obedient", cfg.epochs * per_epoch)
    for row in read_metrics(arts.metrics):
        expect = sched.eval(int(row["iteration"]))
        assert tuple(float(row[k]) for k in ("alpha", "beta", "gamma")) == expect


def test_gullible_pretrain_without_labels(tmp_path, quick_mentor):
    cfg = cfg_for(tmp_path, train_labels=None, test_images=None, test_labels=None, epochs=3)
    arts = ex.pretrain_unsupervised(cfg, quick_mentor)
    rows = read_metrics(arts.metrics)
    assert all(r["loss_s"] == "" and r["train_acc"] == "" for r in rows)
    assert float(rows[-1]["psi"].split(";")[0]) < float(rows[0]["psi"].split(";")[0])
    assert [float(rows[-1][k]) for k in ("alpha", "beta", "gamma")] == [0.0, 1.0, 0.0]
    # the result seeds a mentee run
    ex.train_mentee(cfg_for(tmp_path, init_checkpoint=str(arts.last), epochs=1, out_dir=str(tmp_path / "m")),
                    quick_mentor)


def test_zero_epoch_pretrain_keeps_init(tmp_path, quick_mentor):
    init = netlib.build("mlp-mentee", (1, 28, 28), make_rng(3))
    path = netlib.save(init, tmp_path / "init.ckpt")
    arts = ex.pretrain_unsupervised(cfg_for(tmp_path, epochs=0, init_checkpoint=str(path)), quick_mentor)
    assert netlib.checkpoint_bytes(netlib.load(arts.last)) == netlib.checkpoint_bytes(init)


def test_probe_validation(quick_mentor):
    mentor = netlib.load(quick_mentor)
    mentee = netlib.build("mlp-mentee", (1, 28, 28), make_rng(0))
    resolved = resolve_probes(ProbeSet.from_entries(ExperimentConfig().probes), mentor, mentee)
    assert resolved.softmax.mentor_layer == len(mentor) - 1
    with pytest.raises(ProbeShapeError):
        resolve_probes(ProbeSet.from_entries([{"mentor_layer": 40, "mentee_layer": 2}]), mentor, mentee)
    with pytest.raises(ProbeShapeError):
        resolve_probes(ProbeSet.from_entries([{"mentor_layer": 2, "mentee_layer": 2, "group": "softmax"}]),
                       mentor, mentee)
    other = netlib.build("mlp-mentee", (1, 28, 28), make_rng(0), classes=5)
    with pytest.raises(ProbeShapeError):
        resolve_probes(ProbeSet.from_entries([{"mentor_layer": -1, "mentee_layer": -1, "group": "softmax"}]),
                       mentor, other)


def test_conv_probe_validation_and_run(tmp_path):
    rng = make_rng(0)
    mentor = netlib.build("conv-mentor", (1, 28, 28), rng, dropout=0.0).freeze()
    mentee = netlib.build("conv-mentee", (1, 28, 28), rng, dropout=0.0)
    with pytest.raises(ProbeShapeError):  # 24x24 maps against 8x8 maps
        resolve_probes(ProbeSet.from_entries([{"mentor_layer": 6, "mentee_layer": 2}]), mentor, mentee)
    x = make_rng(1).standard_normal((20, 1, 28, 28)).astype(np.float32)
    ds = Dataset(x, np.arange(20) % 10, 10)
    cfg = ExperimentConfig(epochs=2, batch_size=10, deterministic=True)
    trainer = Trainer(cfg, mentee, ds, ds, mentor=mentor, probes=ProbeSet.from_entries(cfg.probes),
                      out_dir=tmp_path)
    arts = trainer.run()
    assert len(read_metrics(arts.metrics)[1]["psi"].split(";")) == 2


# ---------------------------------------------------------------- recovery and early stopping

def test_nan_recovery_restores_previous_epoch(tmp_path, mnist):
    cfg = cfg_for(tmp_path, inject_nan=[2], epochs=4)
    seen = []

    def on_recover(trainer, epoch):
        rolling = netlib.load(tmp_path / "run" / "rolling.ckpt")
        same = all(np.array_equal(a, b) for (_, a), (_, b) in zip(trainer.student.state(), rolling.state()))
        seen.append((epoch, same, trainer.lr, trainer.lr_sched.lr_at(epoch),
                     [v.copy() for v in trainer.opt.velocity]))

    arts = ex.train_plain(cfg, "mlp-mentee", on_recover=on_recover)
    assert len(seen) == 1
    epoch, same, lr, base, velocity = seen[0]
    assert epoch == 2 and same and lr == base / 10
    assert all(not v.any() for v in velocity)
    rows = read_metrics(arts.metrics)
    assert [int(r["recoveries"]) for r in rows] == [0, 0, 0, 1, 1]
    assert float(rows[3]["lr"]) == float(rows[2]["lr"]) / 10


def test_nan_in_first_epoch_restores_initial_weights(tmp_path, mnist):
    cfg = cfg_for(tmp_path, inject_nan=[0], epochs=1)
    train, _ = ex.load_data(cfg)
    init = netlib.checkpoint_bytes(ex.build_student(cfg, "mlp-mentee", train))
    seen = []
    ex.train_plain(cfg, "mlp-mentee", on_recover=lambda t, e: seen.append(netlib.checkpoint_bytes(t.student)))
    assert seen == [init]


def test_seventh_divergence_is_unrecoverable(tmp_path, mnist):
    with pytest.raises(UnrecoverableRun):
        ex.train_plain(cfg_for(tmp_path, inject_nan=[1] * 7), "mlp-mentee")


def test_six_recoveries_are_tolerated(tmp_path, mnist):
    arts = ex.train_plain(cfg_for(tmp_path, inject_nan=[1] * 6), "mlp-mentee")
    assert arts.recoveries == 6


def test_exploding_gradient_triggers_recovery(tmp_path, mnist):
    with pytest.raises(UnrecoverableRun):
        ex.train_plain(cfg_for(tmp_path, grad_norm_limit=1e-9, max_recoveries=2, epochs=1), "mlp-mentee")


def test_early_stopping_waits_for_lr_drop(tmp_path, mnist):
    cfg = cfg_for(tmp_path, epochs=40, lr_drop_epoch=4, early_stop_patience=2, lr=3e-3, redact_p=5,
                  subset_size=None, batch_size=500)
    arts = ex.train_plain(cfg, "mlp-mentee")
    rows = read_metrics(arts.metrics)
    assert arts.stopped_early
    assert len(rows) - 1 >= cfg.lr_drop_epoch + cfg.early_stop_patience
    losses = {int(r["epoch"]): float(r["test_loss"]) for r in rows[1:]}
    best_epoch = min((e for e in losses if e > cfg.lr_drop_epoch), key=losses.get)
    assert arts.final["epoch"] == best_epoch
    assert netlib.load(arts.last).state()[0][1].tobytes() == netlib.load(arts.best).state()[0][1].tobytes()


def test_no_early_stop_before_epoch_75(tmp_path, mnist):
    arts = ex.train_plain(cfg_for(tmp_path, epochs=12, early_stop_patience=1, redact_p=5, subset_size=None),
                          "mlp-mentee")
    assert not arts.stopped_early and len(read_metrics(arts.metrics)) == 13


# ---------------------------------------------------------------- fine-tuning

def test_finetune_freezes_body_and_keeps_head(tmp_path, mnist):
    src = ex.train_plain(cfg_for(tmp_path, out_dir=str(tmp_path / "src"), epochs=1), "mlp-mentee")
    before = netlib.load(src.last)
    arts = ex.finetune_classifier(src.last, cfg_for(tmp_path, out_dir=str(tmp_path / "ft"), epochs=2))
    after = netlib.load(arts.last)
    head = len(after) - 2
    for (name, a), (_, b) in zip(before.state(), after.state()):
        if int(name.split(".")[0]) < head:
            assert np.array_equal(a, b), name
    assert not np.array_equal(before.layers[head].params["W"], after.layers[head].params["W"])


def test_prepare_head_class_count_rules():
    net = netlib.build("mlp-mentee", (1, 8, 8), make_rng(0))
    w = net.layers[-2].params["W"].copy()
    same = ex.prepare_head(net, 10, make_rng(1))
    np.testing.assert_array_equal(same.layers[-2].params["W"], w)
    wider = ex.prepare_head(netlib.build("mlp-mentee", (1, 8, 8), make_rng(0)), 47, make_rng(1))
    assert wider.layers[-2].params["W"].shape == (128, 47) and wider.output_shape == (47,)
    np.testing.assert_array_equal(wider.layers[0].params["W"], net.layers[0].params["W"])
    assert [l.frozen for l in wider.layers] == [True] * 4 + [False, False]


def test_finetune_arch_mismatch(tmp_path):
    bad = netlib.Network.from_specs([{"kind": "dense", "units": 3}, {"kind": "relu"}], (4,), make_rng(0))
    with pytest.raises(ArchMismatch):
        ex.head_index(bad)
    path = netlib.save(netlib.build("mlp-mentee", (1, 8, 8), make_rng(0)), tmp_path / "x.ckpt")
    ds = Dataset(np.zeros((4, 1, 28, 28), np.float32), np.arange(4) % 2, 2)
    with pytest.raises(ArchMismatch):
        ex.finetune_classifier(path, ExperimentConfig(), data=(ds, ds))


# ---------------------------------------------------------------- evaluation

def test_evaluate_memorised_and_uniform():
    net = netlib.Network.from_specs([{"kind": "dense", "units": 10}, {"kind": "softmax"}], (10,), make_rng(0))
    labels = make_rng(0).permutation(10)
    # one-hot inputs routed to their own label: a perfectly memorised table
    net.layers[0].params["W"][...] = 20 * np.eye(10, dtype=np.float32)[labels]
    acc, _ = evaluate(net, Dataset(np.eye(10, dtype=np.float32), labels, 10))
    assert acc == 1.0
    net.layers[0].params["W"][...] = 0
    big = make_rng(1).integers(0, 10, size=2000)
    acc, loss = evaluate(net, Dataset(make_rng(2).standard_normal((2000, 10)).astype(np.float32), big, 10))
    assert loss == pytest.approx(math.log(10), rel=1e-6)
    assert abs(acc - 0.1) <= 3 * math.sqrt(0.09 / 2000)


def test_evaluate_errors():
    net = netlib.Network.from_specs([{"kind": "dense", "units": 2}, {"kind": "softmax"}], (3,), make_rng(0))
    with pytest.raises(EmptyDataset):
        evaluate(net, Dataset(np.zeros((0, 3), np.float32), np.zeros(0, np.int64), 2))
    with pytest.raises(UnlabeledDataset):
        evaluate(net, Dataset(np.zeros((2, 3), np.float32), None, 2))


# ---------------------------------------------------------------- filters

def test_filter_grid_layout_example(tmp_path):
    net = netlib.Network.from_specs([{"kind": "conv", "filters": 8, "kh": 5, "kw": 5, "init_std": 1.0}],
                                    (1, 9, 9), make_rng(0))
    path = export_filters(net, 0, tmp_path / "f.pgm")
    img = read_pgm(path)
    assert grid_shape(8) == (2, 4)
    assert img.shape == (2 * 5 + 1, 4 * 5 + 3)
    assert (img[5, :] == 0).all() and (img[:, 5] == 0).all()
    assert img[:5, :5].min() == 0 and img[:5, :5].max() == 255
    assert path.read_bytes().startswith(b"P5\n23 11\n255\n")


def test_constant_filter_is_mid_gray():
    img = tile_grid([np.full((3, 3), 0.7), np.arange(9.0).reshape(3, 3)])
    assert (img[:, :3] == 128).all()


def test_pgm_round_trip(tmp_path):
    img = make_rng(0).integers(0, 256, size=(7, 5)).astype(np.uint8)
    np.testing.assert_array_equal(read_pgm(write_pgm(tmp_path / "a.pgm", img)), img)


def test_dense_rows_reshape_to_input_geometry(tmp_path):
    net = netlib.build("mlp-mentee", (1, 28, 28), make_rng(0))
    img = read_pgm(export_filters(net, 0, tmp_path / "d.pgm"))
    rows, cols = grid_shape(128)
    assert img.shape == (rows * 29 - 1, cols * 29 - 1)


def test_filters_not_visualizable(tmp_path):
    net = netlib.build("mlp-mentee", (1, 28, 28), make_rng(0))
    with pytest.raises(NotVisualizable):
        export_filters(net, 2, tmp_path / "r.pgm")  # relu
    with pytest.raises(NotVisualizable):
        export_filters(net, 4, tmp_path / "h.pgm")  # 128 inputs, not square


# ---------------------------------------------------------------- gradient check

def test_gradcheck_report(tmp_path):
    report = gradcheck(out_path=tmp_path / "gradcheck.json")
    assert report["passed"] and report["max_rel_error"] <= 1e-5
    assert [c["weights"] for c in report["cases"]] == [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.5, 0.25]]
    assert all(c["mentor_grad_entries"] == 0 and c["mentor_unchanged"] for c in report["cases"])
    assert json.loads((tmp_path / "gradcheck.json").read_text())["passed"] is True


# ---------------------------------------------------------------- CLI

def write_cfg(tmp_path, **kw):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(dict(mnist_paths(), epochs=1, subset_size=300, batch_size=300, **kw)))
    return str(path)


def test_cli_train_eval_export(tmp_path, mnist, capsys):
    cfg = write_cfg(tmp_path)
    assert main(["train-mentor", "--config", cfg, "--out", str(tmp_path / "m"), "--deterministic"]) == 0
    ckpt = str(tmp_path / "m" / "last.ckpt")
    capsys.readouterr()
    assert main(["eval", "--config", cfg, "--checkpoint", ckpt]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["count"] == 10000 and 0 <= result["accuracy"] <= 1
    assert main(["export-filters", "--checkpoint", ckpt, "--layer", "0", "--out", str(tmp_path / "f.pgm")]) == 0
    assert read_pgm(tmp_path / "f.pgm").shape[0] > 0
    assert main(["train-mentee", "--config", cfg, "--mentor", ckpt, "--out", str(tmp_path / "s"),
                 "--seed", "3"]) == 0
    assert json.loads((tmp_path / "s" / "config.json").read_text())["seed"] == 3


def test_cli_exit_codes(tmp_path, mnist):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": 1}))
    assert main(["train-mentor", "--config", str(bad)]) == 2
    missing = tmp_path / "missing.json"
    missing.write_text(json.dumps({"train_images": str(tmp_path / "nope.gz"), "epochs": 1}))
    assert main(["train-mentor", "--config", str(missing), "--out", str(tmp_path / "x")]) == 3
    assert main(["train-mentee", "--config", write_cfg(tmp_path), "--out", str(tmp_path / "y")]) == 3
    nan = write_cfg(tmp_path, inject_nan=[0] * 7)
    assert main(["train-mentor", "--config", nan, "--out", str(tmp_path / "z")]) == 4
    corrupt = tmp_path / "c.ckpt"
    corrupt.write_bytes(b"junk")
    assert main(["eval", "--config", write_cfg(tmp_path), "--checkpoint", str(corrupt)]) == 3


def test_cli_gradcheck(tmp_path):
    assert main(["gradcheck", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "gradcheck.json").read_text())["passed"]


def test_redaction_grid_summary(tmp_path, quick_mentor):
    cfg = cfg_for(tmp_path, epochs=1, subset_size=None, grid_p=[2, 1], grid_seeds=[0, 1])
    summary = ex.run_grid(cfg, quick_mentor)
    lines = summary.read_text().splitlines()
    assert lines[0].startswith("p,personality,seed,test_acc")
    assert len(lines) == 1 + 2 * 2 * 2 + 2 * 2
    assert sum(",mean," in ln for ln in lines) == 4


def test_missing_mentor_is_data_error(tmp_path):
    with pytest.raises(DataError):
        ex.train_mentee(ExperimentConfig(), None)


@pytest.mark.parametrize("name", ["mentor", "mentee", "pretrain", "generality", "grid"])
def test_example_configs_load(name):
    from conftest import ROOT
    cfg = ExperimentConfig.load(ROOT / "configs" / f"{name}.json")
    assert cfg.out_dir.startswith("runs/")
