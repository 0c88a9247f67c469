import numpy as np
import pytest

from reidmetric.errors import ConfigError, EpochOutOfRange, ShapeMismatch
from reidmetric.layers import Model, ModelConfig
from reidmetric.numkit import make_rng
from reidmetric.optim import AMSGrad, OptimConfig, Schedule, amsgrad_step, lr_at_epoch, trainable_groups


def test_zero_gradient_leaves_params():
    opt = AMSGrad()
    p = {"w": np.array([1.0, -2.0])}
    opt.step(p, {"w": np.zeros(2)}, 0.1)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_single_step_hand_value():
    opt = AMSGrad(0.9, 0.999, 1e-8, bias_correction=False)
    p = {"t": np.zeros(1)}
    opt.step(p, {"t": np.ones(1)}, 0.0015)
    expected = -0.0015 * 0.1 / (np.sqrt(0.001) + 1e-8)
    assert p["t"][0] == pytest.approx(expected, abs=1e-15)
    assert p["t"][0] == pytest.approx(-4.7434e-3, abs=1e-7)


def test_two_step_uses_running_max():
    # beta2 = 0.9 makes v shrink on the second step, so the maximum matters
    opt = AMSGrad(0.9, 0.9, 1e-8, bias_correction=False)
    p = {"t": np.zeros(1)}
    opt.step(p, {"t": np.ones(1)}, 0.01)
    first = p["t"].copy()
    opt.step(p, {"t": np.array([0.1])}, 0.01)
    m2 = 0.9 * 0.1 + 0.1 * 0.1
    v1 = 0.1
    v2 = 0.9 * v1 + 0.1 * 0.01
    assert v2 < v1
    assert opt.v["t"][0] == pytest.approx(v2, abs=1e-16)
    assert opt.v_max["t"][0] == pytest.approx(v1, abs=1e-16)
    assert p["t"][0] - first[0] == pytest.approx(-0.01 * m2 / (np.sqrt(v1) + 1e-8), abs=1e-15)


def test_bias_correction_first_step_is_lr_sign():
    opt = AMSGrad()
    p = {"t": np.zeros(3)}
    opt.step(p, {"t": np.array([2.0, -0.5, 3.0])}, 0.01)
    np.testing.assert_allclose(p["t"], [-0.01, 0.01, -0.01], rtol=1e-6)


def test_constant_gradient_direction():
    opt = AMSGrad(beta2=1 - 1e-9, bias_correction=True)
    g = np.array([3.0, -0.2, 1e-3])
    p = {"t": np.zeros(3)}
    for _ in range(20):
        before = p["t"].copy()
        opt.step(p, {"t": g}, 1e-3)
        np.testing.assert_allclose(p["t"] - before, -np.sign(g) * 1e-3, rtol=1e-3)


def test_vmax_monotone_random():
    rng = make_rng(0)
    opt = AMSGrad()
    p = {"a": rng.standard_normal((3, 4))}
    prev = np.zeros((3, 4))
    for _ in range(500):
        opt.step(p, {"a": rng.standard_normal((3, 4)) * rng.uniform(0, 3)}, 1e-3)
        assert np.all(opt.v_max["a"] >= prev)
        prev = opt.v_max["a"].copy()


def test_frozen_names_untouched_and_state_kept():
    opt = AMSGrad()
    p = {"a": np.ones(2), "b": np.ones(2)}
    g = {"a": np.ones(2), "b": np.ones(2)}
    opt.step(p, g, 0.1, names={"a"})
    assert np.array_equal(p["b"], np.ones(2)) and "b" not in opt.t
    params, state = amsgrad_step(opt, p, g, 0.1)
    assert state.t == {"a": 2, "b": 1}


def test_errors():
    opt = AMSGrad()
    with pytest.raises(ShapeMismatch):
        opt.step({"a": np.ones(2)}, {"a": np.ones(3)}, 0.1)
    with pytest.raises(ValueError):
        opt.step({"a": np.ones(2)}, {"a": np.ones(2)}, 0.0)


def test_schedule_values():
    s = Schedule()
    assert lr_at_epoch(s, 0) == 0.0015
    assert lr_at_epoch(s, 39) == 0.0015
    assert lr_at_epoch(s, 40) == 0.00015
    assert lr_at_epoch(s, 45) == 0.00015
    assert lr_at_epoch(s, 50) == 0.000015
    assert lr_at_epoch(s, 55) == 0.000015
    vals = [lr_at_epoch(s, e) for e in range(65)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    with pytest.raises(EpochOutOfRange):
        lr_at_epoch(s, 65)
    with pytest.raises(EpochOutOfRange):
        lr_at_epoch(s, -1)


def test_schedule_validation():
    with pytest.raises(ConfigError):
        Schedule(drop_epochs=(50, 40))
    with pytest.raises(ConfigError):
        Schedule(drop_epochs=(40, 65))
    with pytest.raises(ConfigError):
        Schedule(total_epochs=0, drop_epochs=())


def test_trainable_groups():
    model = Model(ModelConfig(input_shape=(3, 8, 8), arch="conv"))
    s = Schedule()
    head = trainable_groups(s, 2, model)
    assert head == model.head_param_names()
    assert trainable_groups(s, 4, model) == head
    assert trainable_groups(s, 5, model) == set(model.param_shapes())
    s0 = Schedule(warmup_epochs=0)
    assert all(trainable_groups(s0, e, model) == set(model.param_shapes()) for e in (0, 3, 64))
    with pytest.raises(EpochOutOfRange):
        trainable_groups(s, 65, model)


def test_optim_config_build():
    opt = OptimConfig(bias_correction=False).build()
    assert isinstance(opt, AMSGrad) and not opt.bias_correction
