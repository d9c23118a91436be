import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from minihiera.config import tiny
from minihiera.model import HieraClassifier
from minihiera.optim import (
    NonFiniteGradientError,
    OptimConfig,
    Schedule,
    TrainState,
    adamw_step,
    decays,
    layer_id,
    layerwise_lr_scale,
    lr_at,
)


def _state(params, optim=None, schedule=Schedule(0.1, 0, 100)):
    optim = optim or OptimConfig(weight_decay=0.0, warmup_epochs=0)
    return TrainState(
        params=params,
        exp_avg={k: np.zeros_like(v) for k, v in params.items()},
        exp_avg_sq={k: np.zeros_like(v) for k, v in params.items()},
        schedule=schedule,
        optim=optim,
        lr_scales={k: 1.0 for k in params},
    )


def test_schedule_landmarks():
    s = Schedule(1e-3, 10, 110)
    assert lr_at(0, s) == 0.0
    assert lr_at(5, s) == pytest.approx(5e-4)
    assert lr_at(10, s) == pytest.approx(1e-3)
    assert lr_at(60, s) == pytest.approx(5e-4)
    assert lr_at(110, s) == 0.0
    with pytest.raises(ValueError):
        lr_at(-1, s)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 50), st.integers(1, 200))
def test_schedule_monotone_after_warmup(warm, span):
    s = Schedule(1.0, warm, warm + span)
    up = [lr_at(i, s) for i in range(warm + 1)]
    down = [lr_at(i, s) for i in range(warm, warm + span + 1)]
    assert all(a <= b for a, b in zip(up, up[1:]))
    assert all(a >= b for a, b in zip(down, down[1:]))


def test_zero_grad_zero_decay_is_noop():
    p = {"w": np.array([[1.0, -2.0]]), "b": np.array([0.5])}
    before = {k: v.copy() for k, v in p.items()}
    st_ = _state(p)
    adamw_step(st_, {"w": np.zeros((1, 2)), "b": np.zeros(1)})
    for k in p:
        assert np.array_equal(p[k], before[k])


def test_single_scalar_step_by_hand():
    p = {"w": np.array([[2.0]])}
    opt = OptimConfig(lr=0.1, beta1=0.9, beta2=0.95, eps=1e-8, weight_decay=0.05, warmup_epochs=0)
    st_ = _state(p, opt, Schedule(0.1, 0, 1000))
    adamw_step(st_, {"w": np.array([[0.5]])})
    m = 0.1 * 0.5 / (1 - 0.9)
    v = 0.05 * 0.25 / (1 - 0.95)
    w = 2.0 - 0.1 * 0.05 * 2.0
    w -= 0.1 * m / (math.sqrt(v) + 1e-8)
    assert p["w"][0, 0] == pytest.approx(w, abs=1e-12)
    assert st_.step == 1


def test_decay_only_shrinks_by_lr_wd():
    p = {"w": np.array([[3.0, -1.0]])}
    st_ = _state(p, OptimConfig(weight_decay=0.1, warmup_epochs=0), Schedule(0.5, 0, 1000))
    adamw_step(st_, {"w": np.zeros((1, 2))})
    np.testing.assert_allclose(p["w"], np.array([[3.0, -1.0]]) * (1 - 0.5 * 0.1))


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_non_finite_grad_raises_before_update(bad):
    p = {"a": np.ones((2, 2)), "b": np.ones((2, 2))}
    st_ = _state(p)
    with pytest.raises(NonFiniteGradientError, match="b"):
        adamw_step(st_, {"a": np.ones((2, 2)), "b": np.array([[1.0, bad], [0, 0]])})
    assert np.all(p["a"] == 1.0) and st_.step == 0


def test_clipping_bounds_global_norm():
    p = {"w": np.zeros((1, 2))}
    opt = OptimConfig(weight_decay=0.0, warmup_epochs=0, clip_grad=1.0, beta1=0.0, beta2=0.0)
    st_ = _state(p, opt)
    adamw_step(st_, {"w": np.array([[30.0, 40.0]])})
    # with both betas at 0 the first moment is the clipped gradient itself
    assert np.linalg.norm(st_.exp_avg["w"]) == pytest.approx(1.0, rel=1e-5)


def test_layer_ids_and_scales():
    n = 4
    assert layer_id("encoder.patch_embed.weight", n) == 0
    assert layer_id("encoder.pos_embed", n) == 0
    assert layer_id("encoder.blocks.0.attn.qkv.weight", n) == 1
    assert layer_id("encoder.blocks.3.norm1.weight", n) == 4
    assert layer_id("head.fc.weight", n) == n
    assert layer_id("decoder.blocks.0.norm1.weight", n) == n
    assert layerwise_lr_scale("head.fc.weight", 0.5, n) == 1.0
    assert layerwise_lr_scale("encoder.patch_embed.weight", 0.5, n) == 0.0625
    for name in ("encoder.patch_embed.weight", "encoder.blocks.1.mlp.fc1.weight", "head.fc.bias"):
        assert layerwise_lr_scale(name, 1.0, n) == 1.0
    with pytest.raises(ValueError):
        layerwise_lr_scale("x", 0.0, n)


def test_decay_exclusions():
    assert decays("blocks.0.mlp.fc1.weight", np.zeros((2, 2)))
    assert not decays("blocks.0.mlp.fc1.bias", np.zeros(2))
    assert not decays("blocks.0.norm1.weight", np.zeros(2))
    assert not decays("pos_embed", np.zeros((1, 4, 2)))
    assert not decays("decoder.mask_token", np.zeros((1, 2)))


def test_excluded_params_ignore_weight_decay():
    rng = np.random.default_rng(0)
    grads = [rng.normal(size=3) for _ in range(5)]
    finals = []
    for wd in (0.0, 0.3):
        p = {"norm.weight": np.ones(3), "pos_embed": np.ones((2, 3))}
        st_ = _state(p, OptimConfig(weight_decay=wd, warmup_epochs=0))
        for g in grads:
            adamw_step(st_, {"norm.weight": g, "pos_embed": np.tile(g, (2, 1))})
        finals.append({k: v.copy() for k, v in p.items()})
    for k in finals[0]:
        assert np.array_equal(finals[0][k], finals[1][k])


def test_zero_lr_scale_freezes_bitwise():
    model = HieraClassifier(tiny(), 0)
    opt = OptimConfig.finetune(warmup_epochs=0)
    st_ = TrainState.create(model, opt, Schedule(1e-2, 0, 10))
    frozen = {n for n in st_.params if n.startswith("encoder.")}
    for n in frozen:
        st_.lr_scales[n] = 0.0
    before = {n: st_.params[n].copy() for n in frozen}
    rng = np.random.default_rng(1)
    for _ in range(3):
        adamw_step(st_, {n: rng.normal(size=a.shape) for n, a in st_.params.items()})
    for n in frozen:
        assert st_.params[n].tobytes() == before[n].tobytes()
    assert not np.array_equal(st_.params["head.fc.weight"], HieraClassifier(tiny(), 0).state_dict()["head.fc.weight"])


def test_create_shares_arrays_and_defaults():
    model = HieraClassifier(tiny(), 0)
    st_ = TrainState.create(model, OptimConfig.finetune(), Schedule(1e-3, 1, 10))
    name, param = next(iter(model.named_parameters()))
    assert st_.params[name] is param.data
    assert OptimConfig.finetune().layer_decay == 0.7
    assert OptimConfig.pretrain().beta2 == 0.95
