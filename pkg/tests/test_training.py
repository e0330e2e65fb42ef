import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from procanet.data import NODATA, Raster
from procanet.errors import ConfigError, NumericError
from procanet.model import ModelConfig, init_params, load_weights, loss_and_grads
from procanet.training import (
    AdamState,
    PatchData,
    SchedulerConfig,
    TrainConfig,
    adam_step,
    build_patches,
    fit,
    load_optimizer,
    lr_at,
    save_optimizer,
    split_scenes,
)

TINY = dict(levels=2, base_channels=4)


def test_first_adam_step_closed_form():
    params = {"w": np.array([1.0], np.float32)}
    new, state = adam_step(params, {"w": np.array([0.5], np.float32)}, AdamState.create(params), 1e-4)
    assert new["w"][0] == pytest.approx(1.0 - 1e-4 * 0.5 / (0.5 + 1e-8), abs=1e-7)
    assert state.step == 1 and params["w"][0] == 1.0


def test_zero_gradient_leaves_params_but_decays_moments():
    params = {"w": np.array([1.0, -2.0], np.float32)}
    state = AdamState.create(params)
    state.m["w"][:] = 1.0
    state.v["w"][:] = 1.0
    new, state2 = adam_step(params, {"w": np.zeros(2, np.float32)}, AdamState.create(params), 1e-2)
    assert new["w"].tobytes() == params["w"].tobytes()
    _, state3 = adam_step(params, {"w": np.zeros(2, np.float32)}, state, 1e-2)
    assert np.all(state3.m["w"] == np.float32(0.9)) and np.all(state3.v["w"] == np.float32(0.999))


def test_adam_rejects_bad_gradients():
    params = {"w": np.ones(2, np.float32), "b": np.ones(1, np.float32)}
    state = AdamState.create(params)
    with pytest.raises(KeyError):
        adam_step(params, {"w": np.ones(2, np.float32)}, state, 1e-3)
    with pytest.raises(NumericError):
        adam_step(params, {"w": np.array([1, np.nan], np.float32), "b": np.ones(1, np.float32)},
                  state, 1e-3)
    assert state.step == 0


def test_adam_is_deterministic():
    rng = np.random.default_rng(0)
    params = {"w": rng.standard_normal(10).astype(np.float32)}
    grads = [{"w": rng.standard_normal(10).astype(np.float32)} for _ in range(5)]

    def run():
        p, s = params, AdamState.create(params)
        for g in grads:
            p, s = adam_step(p, g, s, 1e-3)
        return p["w"].tobytes()

    assert run() == run()


def test_optimizer_state_round_trip(tmp_path):
    config = ModelConfig(**TINY)
    params = init_params(config)
    rng = np.random.default_rng(1)
    grads = {k: rng.standard_normal(p.shape).astype(np.float32) for k, p in params.items()}
    _, state = adam_step(params, grads, AdamState.create(params), 1e-3)
    save_optimizer(state, tmp_path / "s.pcao")
    back = load_optimizer(tmp_path / "s.pcao", config)
    assert back.step == 1
    assert all(back.m[k].tobytes() == state.m[k].tobytes() for k in params)
    assert all(back.v[k].tobytes() == state.v[k].tobytes() for k in params)
    assert (tmp_path / "s.pcao").read_bytes()[:4] == b"PCAO"


def test_schedule_examples():
    cfg = SchedulerConfig(t0=10)
    assert lr_at(0, cfg) == 1e-4
    assert lr_at(5, cfg) == pytest.approx(5e-5, abs=1e-12)
    assert lr_at(10, cfg) == 1e-4
    assert lr_at(cfg.total_steps, cfg) == 0.0
    assert lr_at(cfg.total_steps + 1000, cfg) == 0.0
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


@pytest.mark.parametrize("t0", [1, 3, 8])
def test_schedule_periods(t0):
    cfg = SchedulerConfig(t0=t0)
    lengths = cfg.period_lengths()
    assert len(lengths) == 10
    assert lengths == [t0 * 2**i for i in range(10)]
    assert cfg.total_steps == t0 * (2**10 - 1)
    for start, length in zip(cfg.period_starts(), lengths):
        assert lr_at(start, cfg) == 1e-4
        # last step of the period is the closest point to lr_min
        assert lr_at(start + length - 1, cfg) < 1e-4 * (1 - math.cos(math.pi / length)) + 1e-18
        inside = [lr_at(s, cfg) for s in range(start, start + length)]
        assert all(a >= b for a, b in zip(inside, inside[1:]))


@settings(max_examples=50, deadline=None)
@given(t0=st.integers(1, 50), step=st.integers(0, 60000))
def test_schedule_bounds(t0, step):
    lr = lr_at(step, SchedulerConfig(t0=t0))
    assert 0.0 <= lr <= 1e-4


def test_spanning_schedule_and_validation():
    assert SchedulerConfig.spanning(1023).t0 == 1
    assert SchedulerConfig.spanning(1024).t0 == 2
    assert SchedulerConfig.spanning(25 * 100).total_steps >= 2500
    with pytest.raises(ConfigError):
        SchedulerConfig(t0=0)
    with pytest.raises(ConfigError):
        SchedulerConfig(lr_max=1e-4, lr_min=1e-3)


def test_split_scenes():
    train, val = split_scenes(20, 0.65, seed=3)
    assert len(train) == 13 and len(val) == 7
    assert sorted(train + val) == list(range(20))
    assert split_scenes(20, 0.65, seed=3) == (train, val)
    with pytest.raises(ValueError):
        split_scenes(1)


def test_build_patches_filters_and_masks():
    image = Raster(np.random.default_rng(2).random((4, 128, 256)).astype(np.float32),
                   ("R", "G", "B", "NIR"))
    label = np.zeros((1, 128, 256), np.float32)
    label[0, :, :100] = NODATA       # first patch 100/128 nodata -> dropped when filtering
    label[0, :, 200:] = 1
    scene = [(image, Raster(label, ("label",)))]
    config = ModelConfig(**TINY)
    train = build_patches(scene, config, stride=64, apply_filter=True)
    assert len(train) == 2
    val = build_patches(scene, config, stride=128, apply_filter=False)
    assert len(val) == 2 and val.x1.shape == (2, 4, 128, 128) and val.x2.shape == (2, 1, 128, 128)
    assert not val.valid[0, 0, :, :100].any() and val.valid[0, 0, :, 100:].all()
    assert set(np.unique(val.y)) == {0.0, 1.0}


def small_data(n=4, size=32, seed=0, zero_labels=False):
    rng = np.random.default_rng(seed)
    x1 = rng.random((n, 4, size, size)).astype(np.float32)
    x2 = x1[:, 3:4].copy()
    y = np.zeros((n, 1, size, size), np.float32) if zero_labels else (x2 < 0.5).astype(np.float32)
    return PatchData(x1, x2, y, np.ones(y.shape, bool))


def test_bce_decreases_on_all_zero_labels():
    config = ModelConfig(**TINY)
    data = small_data(zero_labels=True)
    params, state = init_params(config), None
    state = AdamState.create(params)
    bce = []
    for _ in range(10):
        terms, grads = loss_and_grads(params, config, data.x1, data.x2, data.y)
        bce.append(terms.bce)
        params, state = adam_step(params, grads, state, 1e-3)
    assert all(b < a for a, b in zip(bce, bce[1:]))


def test_fit_logs_checkpoints_and_is_reproducible(tmp_path):
    config = ModelConfig(**TINY)
    tc = TrainConfig(epochs=3, batch_size=2, lr_max=1e-3, seed=4)
    train, val = small_data(5, seed=1), small_data(3, seed=2)
    a = fit(config, tc, train, val, out_dir=tmp_path / "a")
    b = fit(config, tc, train, val, out_dir=tmp_path / "b")
    assert a.steps == 9
    log_a = (tmp_path / "a" / "train_log.jsonl").read_text()
    assert log_a == (tmp_path / "b" / "train_log.jsonl").read_text()
    records = [json.loads(line) for line in log_a.splitlines()]
    assert [r["epoch"] for r in records] == [0, 1, 2]
    assert set(records[0]) == {"epoch", "lr", "train_loss", "val_iou", "val_f1", "val_acc"}
    assert max(r["val_iou"] for r in records) == a.best_val_iou
    best = load_weights(tmp_path / "a" / "best.pcaw", config)
    assert all(best[k].tobytes() == a.best_params[k].tobytes() for k in best)
    assert load_optimizer(tmp_path / "a" / "best.pcao", config).step == 3 * (a.best_epoch + 1)
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


def test_fit_max_steps_and_eval_every():
    config = ModelConfig(**TINY)
    tc = TrainConfig(epochs=10, batch_size=4, lr_max=1e-3, max_steps=5, eval_every=3)
    result = fit(config, tc, small_data(4), small_data(2, seed=5))
    assert result.steps == 5 and len(result.log) == 5
    evaluated = [r["epoch"] for r in result.log if r["val_iou"] is not None]
    assert evaluated == [2, 4]


def test_fit_aborts_on_non_finite_loss():
    config = ModelConfig(**TINY)
    data = small_data(2)
    data.x1[0, 0, 0, 0] = np.inf
    with pytest.raises(NumericError, match="epoch 0, batch 0"):
        fit(config, TrainConfig(epochs=1, batch_size=2), data, small_data(2))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(max_steps=0)
