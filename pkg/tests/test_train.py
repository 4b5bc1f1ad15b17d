import numpy as np
import pytest
from conftest import reduced_config

from dwacnn.core import Dataset, DimensionError, Series
from dwacnn.nn import (BUFFER_ORDER, PARAM_ORDER, init_model, model_backward, model_forward,
                       zero_model)
from dwacnn.train import (CheckpointError, DivergedError, MetricsLog, TrainConfig, evaluate,
                          load_checkpoint, lr_schedule, save_checkpoint, sgd_step, train_loop,
                          with_mode)


def separable(n_per_class=10, seed=0, L=16, K=3):
    rng = np.random.default_rng(seed)
    items = []
    for k in range(K):
        for i in range(n_per_class):
            v = rng.normal(0, 0.3, size=(L, 2))
            v[:, k % 2] += 2.0 * (k - 1)
            items.append(Series(v, k, f"{k}/{i}"))
    return Dataset(items, K, 2, L)


def test_lr_schedule():
    assert lr_schedule(0, 0.001, 0.001) == 0.001
    assert lr_schedule(1000, 0.001, 0.001) == 0.0005
    assert lr_schedule(12345, 0.01, 0.0) == 0.01
    with pytest.raises(ValueError):
        lr_schedule(-1, 0.001, 0.001)


def test_sgd_step_rates():
    cfg = TrainConfig(reduced_config(), lr0=0.5, alpha=1.0, lr_fc=0.25)
    m = zero_model(cfg.model)
    grads = {k: np.ones_like(v) for k, v in m.params.items()}
    sgd_step(m, grads, 1, cfg)
    assert np.all(m.params["conv1.w"] == -0.25)  # 0.5 / (1 + 1)
    assert np.all(m.params["fc1.w"] == -0.25)
    assert np.all(m.params["bn2.gamma"] == -0.25)
    grads["out.b"][0] = np.nan
    with pytest.raises(DivergedError, match="out.b.*iteration 7"):
        sgd_step(m, grads, 7, cfg)


def test_single_step_descent():
    ds = separable()
    cfg = TrainConfig(reduced_config(), lr0=0.05, lr_fc=0.05, batch_size=30, iterations=1)
    m = init_model(cfg.model, np.random.default_rng(3))
    X, y = ds.to_array(), ds.labels
    before, grads = model_backward(m, model_forward(m, X, update_stats=False)[1], y)
    sgd_step(m, grads, 0, cfg)
    after, _ = model_backward(m, model_forward(m, X, update_stats=False)[1], y)
    assert after < before


def test_descent_over_micro_runs():
    # 20 seeded micro runs, final training loss below initial
    wins = 0
    for seed in range(20):
        ds = separable(seed=seed)
        cfg = TrainConfig(reduced_config("linear"), lr0=0.05, lr_fc=0.05, batch_size=10,
                          iterations=15, eval_every=15, seed=seed)
        m0 = init_model(cfg.model, np.random.default_rng(seed))
        X, y = ds.to_array(), ds.labels
        start = model_backward(m0, model_forward(m0, X, update_stats=False)[1], y)[0]
        m, _, _ = train_loop(cfg, ds, None, ds, model=m0.copy())
        end = model_backward(m, model_forward(m, X, update_stats=False)[1], y)[0]
        wins += end < start
    assert wins == 20


def test_evaluate_zero_model_and_confusion():
    ds = separable()
    acc, conf = evaluate(zero_model(reduced_config()), ds)
    assert acc == pytest.approx(1 / 3)  # every output ties, argmax picks class 0
    assert conf.sum() == len(ds) and np.all(conf.sum(axis=1) == 10)
    assert np.all(conf[:, 0] == 10)
    with pytest.raises(DimensionError):
        evaluate(zero_model(reduced_config(dim=3)), ds)


@pytest.mark.parametrize("mode", ["dwa", "linear"])
def test_train_loop_deterministic(tmp_path, mode):
    ds = separable(6)
    cfg = TrainConfig(reduced_config(mode), lr0=0.01, lr_fc=0.01, batch_size=5, iterations=7,
                      eval_every=3, seed=11)
    runs = []
    for k in range(2):
        path = tmp_path / f"m{k}.tsv"
        model, log, _ = train_loop(cfg, ds, ds, ds, metrics_path=path, timing=False)
        save_checkpoint(model, tmp_path / f"c{k}.ckpt", cfg.iterations)
        runs.append((path.read_bytes(), (tmp_path / f"c{k}.ckpt").read_bytes(), log))
    assert runs[0][0] == runs[1][0] and runs[0][1] == runs[1][1]
    log = runs[0][2]
    assert list(log.iterations) == [3, 6, 7]
    np.testing.assert_allclose(MetricsLog.read(tmp_path / "m0.tsv").test_acc, log.test_acc, atol=1e-6)
    assert runs[0][0].decode().splitlines()[0].split("\t") == [
        "iteration", "train_loss", "val_acc", "test_acc", "seconds"]


def test_metrics_must_increase():
    log = MetricsLog()
    log.append(1, 0.5, 0.5, 0.5, 0.0)
    with pytest.raises(ValueError):
        log.append(1, 0.5, 0.5, 0.5, 0.0)


def test_checkpoint_roundtrip(tmp_path):
    ds = separable(4)
    cfg = TrainConfig(reduced_config(), batch_size=4, iterations=2, eval_every=2)
    model, _, rng = train_loop(cfg, ds, None, ds)
    p = tmp_path / "a.ckpt"
    save_checkpoint(model, p, 2, rng.get_state())
    loaded, header = load_checkpoint(p)
    assert header["iteration"] == 2 and header["rng_state"] == rng.get_state()
    for k in PARAM_ORDER:
        assert np.array_equal(model.params[k], loaded.params[k])
    for k in BUFFER_ORDER:
        assert np.array_equal(model.buffers[k], loaded.buffers[k])
    assert evaluate(model, ds) [0] == evaluate(loaded, ds)[0]
    save_checkpoint(loaded, tmp_path / "b.ckpt", 2, header["rng_state"])
    assert p.read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_corruption(tmp_path):
    p = tmp_path / "a.ckpt"
    save_checkpoint(zero_model(reduced_config()), p)
    data = bytearray(p.read_bytes())
    flipped = data.copy()
    flipped[len(flipped) // 2] ^= 0x01
    (tmp_path / "flip").write_bytes(bytes(flipped))
    (tmp_path / "short").write_bytes(bytes(data[:-20]))
    (tmp_path / "junk").write_bytes(b"hello world, not a checkpoint")
    for name in ("flip", "short", "junk"):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / name)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(reduced_config(), lr0=0)
    with pytest.raises(ValueError):
        TrainConfig(reduced_config(), loss_reduction="max")
    assert with_mode(TrainConfig(reduced_config()), "linear").model.conv_mode == "linear"
