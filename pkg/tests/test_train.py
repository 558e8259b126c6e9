import math

import numpy as np

from dynconv import autodiff as ad
from dynconv.config import RunConfig
from dynconv.task import build_task_model, make_linear_control
from dynconv.train import (CSV_HEADER, SGD, _batch_grads, evaluate, lr_at,
                           run_sweep, train)


def test_step_schedule_matches_closed_form():
    cfg = RunConfig(lr=0.5, schedule="step", step_size=2, gamma=0.1, epochs=6)
    got = [lr_at(cfg, e) for e in range(6)]
    want = [0.5 * 0.1 ** (e // 2) for e in range(6)]
    assert got == want


def test_cosine_schedule_matches_closed_form():
    cfg = RunConfig(lr=0.8, schedule="cosine", epochs=10)
    for e in (0, 3, 5, 10):
        assert lr_at(cfg, e) == 0.8 * 0.5 * (1.0 + math.cos(math.pi * e / 10))
    assert lr_at(cfg, 0) == 0.8
    assert abs(lr_at(cfg, 10)) < 1e-16


def test_sgd_momentum_two_steps_by_hand():
    p = ad.Parameter("p", np.array([1.0, 2.0]))
    opt = SGD([p], momentum=0.9)
    opt.step({p: np.array([0.5, 0.0])}, lr=0.1)
    # v1 = 0.5 -> p = 1 - 0.05
    assert np.allclose(p.value, [0.95, 2.0])
    opt.step({p: np.array([0.25, 0.0])}, lr=0.1)
    # v2 = 0.9*0.5 + 0.25 = 0.7 -> p = 0.95 - 0.07
    assert np.allclose(p.value, [0.88, 2.0])


def test_sgd_skips_parameters_without_gradients():
    p = ad.Parameter("p", np.array([1.0]))
    q = ad.Parameter("q", np.array([5.0]))
    opt = SGD([p, q], momentum=0.9)
    opt.step({p: np.array([1.0])}, lr=0.5)
    assert q.value[0] == 5.0 and p.value[0] == 0.5


def _tiny():
    tr, va = make_linear_control(n_train=48, n_val=16, seed=0)
    model = build_task_model(kind="static", seed=0)
    return model, tr, va


def test_zero_epochs_emits_header_and_initial_row_only(tmp_path):
    model, tr, va = _tiny()
    cfg = RunConfig(epochs=0, batch=16, seed=0)
    path = tmp_path / "m.csv"
    result = train(model, tr, va, cfg, csv_path=path)
    lines = path.read_text().splitlines()
    assert lines[0] == CSV_HEADER
    assert len(lines) == 2 and lines[1].startswith("0,")
    assert len(result.rows) == 1 and not result.aborted


def test_training_reduces_loss_and_logs_one_row_per_epoch(tmp_path):
    model, tr, va = _tiny()
    cfg = RunConfig(lr=0.3, epochs=4, batch=16, seed=0)
    path = tmp_path / "m.csv"
    result = train(model, tr, va, cfg, csv_path=path)
    assert len(result.rows) == 5  # initial row + 4 epochs
    assert result.rows[-1][1] < result.rows[0][1]  # train loss fell
    lines = path.read_text().splitlines()
    assert [line.split(",")[0] for line in lines] == ["epoch", "0", "1", "2", "3", "4"]


def test_same_seed_training_is_byte_identical(tmp_path):
    outs = []
    for name in ("a", "b"):
        model, tr, va = _tiny()
        cfg = RunConfig(lr=0.3, epochs=3, batch=16, seed=0)
        path = tmp_path / f"{name}.csv"
        train(model, tr, va, cfg, csv_path=path)
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]


def test_different_seed_changes_trajectory(tmp_path):
    outs = []
    for seed in (0, 1):
        model, tr, va = _tiny()
        cfg = RunConfig(lr=0.3, epochs=3, batch=16, seed=seed)
        path = tmp_path / f"s{seed}.csv"
        train(model, tr, va, cfg, csv_path=path)
        outs.append(path.read_bytes())
    assert outs[0] != outs[1]


def test_divergence_aborts_and_records_position(tmp_path):
    model, tr, va = _tiny()
    cfg = RunConfig(lr=1e25, epochs=3, batch=16, seed=0)
    path = tmp_path / "diverge.csv"
    with np.errstate(over="ignore", invalid="ignore"):
        result = train(model, tr, va, cfg, csv_path=path)
    assert result.aborted
    assert result.abort_epoch is not None and result.abort_step is not None
    lines = path.read_text().splitlines()
    assert lines[0] == CSV_HEADER and len(lines) >= 2  # partial log still written


def test_evaluate_accuracy_is_fraction_correct():
    model, tr, _ = _tiny()
    loss, acc = evaluate(model, tr, batch=16)
    logits = np.asarray(model.forward(tr.inputs, train=False))
    expect = float((np.argmax(logits, axis=1) == tr.labels).mean())
    assert abs(acc - expect) < 1e-12
    assert loss > 0.0


def test_run_sweep_writes_per_run_and_summary_csvs(tmp_path):
    cfg = RunConfig(lr=0.2, epochs=1, batch=32, seed=0)
    results = run_sweep(tmp_path, seeds=(0,), arms=("static", "dcd"), cfg=cfg,
                        task_kw={"n_train": 64, "n_val": 32})
    assert set(results) == {"static", "dcd"}
    assert (tmp_path / "static_seed0.csv").exists()
    assert (tmp_path / "dcd_seed0.csv").exists()
    summary = (tmp_path / "summary.csv").read_text().splitlines()
    assert summary[0] == "arm,seed,final_val_acc"
    assert len(summary) == 3


def _bn_free_model():
    from dynconv.layers import StaticConv
    from dynconv.models import GlobalPool, Leaf, ModelGraph

    rng = np.random.default_rng(3)
    mix = StaticConv("mix", 8, 8, with_bn=False, activation="relu", rng=rng)
    fc = StaticConv("fc", 8, 4, bias=True, with_bn=False, activation=None, rng=rng)
    modules = [Leaf(mix, "mix"), Leaf(GlobalPool("pool", 8), "global_pool"),
               Leaf(fc, "classifier")]
    return ModelGraph("tiny/static", modules, 8, 4, 16, {})


def test_sharded_gradients_match_single_worker_without_batchnorm():
    # no batch norm -> the shard split cannot change the math, only the
    # floating-point reduction order
    tr, _ = make_linear_control(n_train=32, n_val=16, seed=0)
    x, y = tr.inputs[:16], tr.labels[:16]
    loss1, correct1, grads1 = _batch_grads(_bn_free_model(), x, y, 1)
    loss2, correct2, grads2 = _batch_grads(_bn_free_model(), x, y, 2)
    assert correct1 == correct2
    assert abs(loss1 - loss2) < 1e-12
    by_name1 = {p.name: g for p, g in grads1.items()}
    by_name2 = {p.name: g for p, g in grads2.items()}
    assert set(by_name1) == set(by_name2)
    for name, g in by_name1.items():
        assert np.allclose(g, by_name2[name], atol=1e-12), name


def test_workers_two_is_deterministic_per_worker_count(tmp_path):
    def run(path, workers):
        tr, va = make_linear_control(n_train=48, n_val=16, seed=0)
        model = build_task_model(kind="dcd", seed=0)
        cfg = RunConfig(lr=0.2, epochs=2, batch=16, seed=0, workers=workers)
        train(model, tr, va, cfg, csv_path=path)

    run(tmp_path / "a.csv", 2)
    run(tmp_path / "b.csv", 2)
    run(tmp_path / "c.csv", 1)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    # batch norm sees shard-sized batches, so counts are not interchangeable
    assert (tmp_path / "a.csv").read_bytes() != (tmp_path / "c.csv").read_bytes()


def test_worker_count_validation_and_config_key():
    with np.testing.assert_raises(Exception):
        RunConfig(workers=0)
    cfg = RunConfig.from_mapping({"train.workers": "3"})
    assert cfg.workers == 3
