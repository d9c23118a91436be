import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from minihiera.config import LADDER_ROWS, BlockPlan, HieraConfig, tiny, variant
from minihiera.cost import block_macs, block_params, cost_report, count_flops, count_params
from minihiera.model import HieraClassifier

PARAMS_M = {"T": 28, "S": 35, "B": 52, "B+": 70, "L": 214, "H": 673}
MACS_G = {"T": 5, "S": 6, "B": 9, "B+": 13, "L": 40, "H": 125}


def closed_form_params(channels, blocks, num_classes=1000, grid=56 * 56, patch_dim=48, mlp=4):
    """Hand-derived parameter count of the plain image model with stride-equal pooling."""
    c1 = channels[0]
    total = patch_dim * c1 + c1 + grid * c1
    prev = None
    last = c1
    for c, n in zip(channels, blocks):
        if n == 0:
            break
        for j in range(n):
            h = mlp * c
            common = 2 * c + (c * c + c) + (c * h + h) + (h * c + c)  # norm2, proj, fc1, fc2
            if prev is not None and j == 0:
                total += 2 * prev + (prev * c + c) + (prev * 3 * c + 3 * c) + common
            else:
                total += 2 * c + (3 * c * c + 3 * c) + common
        prev = last = c
    return total + 2 * last + last * num_classes + num_classes


@pytest.mark.parametrize("name", list(PARAMS_M))
def test_variant_params_and_macs(name):
    cfg = variant(name)
    params, macs = count_params(cfg), count_flops(cfg, (224, 224))
    assert abs(params / 1e6 - PARAMS_M[name]) <= 0.05 * PARAMS_M[name]
    assert abs(macs / 1e9 - MACS_G[name]) <= 0.10 * MACS_G[name]
    assert params == closed_form_params(cfg.channels, cfg.blocks)


def test_hiera_b_exact_counts():
    assert count_params(variant("B")) == 51_515_464
    assert count_flops(variant("B")) == pytest.approx(9.345e9, rel=1e-3)


@pytest.mark.parametrize("name", ["T", "S"])
def test_params_match_constructed_model(name):
    cfg = variant(name)
    assert count_params(cfg) == HieraClassifier(cfg, 0).num_parameters()


def test_stage_resolutions_and_runtime():
    start = time.perf_counter()
    for name in PARAMS_M:
        rep = cost_report(variant(name))
        assert rep.stage_resolutions == [(56, 56), (28, 28), (14, 14), (7, 7)]
    assert time.perf_counter() - start < 1.0


def test_totals_equal_breakdown():
    rep = cost_report(variant("B+"))
    assert rep.params == sum(r.params for r in rep.rows)
    assert rep.macs == sum(r.macs for r in rep.rows)
    assert [r.name for r in rep.rows] == ["stem", "stage1", "stage2", "stage3", "stage4", "head"]
    mapping = rep.to_mapping()
    assert mapping["params"] == rep.params and set(mapping["stages"]) == {r.name for r in rep.rows}
    assert "stage3" in rep.table()


def test_degenerate_config_hand_count():
    cfg = HieraConfig(channels=(1, 1, 1, 1), blocks=(1, 0, 0, 0), heads=(1, 1, 1, 1))
    # patch embed 48 + 1, position table 56*56, one width-1 block 25, head norm 2 + fc 1000 + 1000
    assert count_params(cfg) == 49 + 3136 + 25 + 2002 == 5212
    assert HieraClassifier(cfg, 0).num_parameters() == 5212


@settings(max_examples=20, deadline=None)
@given(
    st.integers(1, 3),
    st.lists(st.integers(0, 2), min_size=3, max_size=3),
    st.integers(1, 3),
    st.sampled_from(sorted(LADDER_ROWS)),
)
def test_random_small_configs_match_construction(c, rest, first, row):
    blocks = [first, *rest]
    # only trailing stages may be empty
    for i in range(1, 4):
        if blocks[i - 1] == 0:
            blocks[i] = 0
    cfg = tiny(channels=(2 * c, 4 * c, 8 * c, 16 * c), blocks=tuple(blocks), heads=(1, 2, 2, 4),
               ladder=LADDER_ROWS[row])
    assert count_params(cfg) == HieraClassifier(cfg, 0).num_parameters()


def _global_plan(c):
    return BlockPlan(0, 2, c, c, 1, (2, 2), (2, 2), "global", None, None, False, 0.0)


def test_single_global_block_closed_form():
    c, units = 8, 5
    n = units * 4
    assert block_macs(_global_plan(c), units) == 12 * n * c * c + 2 * n * n * c
    assert block_params(_global_plan(c)) == 12 * c * c + 13 * c


def test_global_attention_is_quadratic():
    c, units = 16, 10
    one, two = block_macs(_global_plan(c), units), block_macs(_global_plan(c), 2 * units)
    assert two > 2 * one
    assert two - 2 * one == 2 * (2 * units * 4) ** 2 * c - 2 * 2 * (units * 4) ** 2 * c


def test_mask_unit_attention_is_linear():
    p = BlockPlan(0, 0, 8, 8, 1, (8, 8), (8, 8), "mask_unit", None, None, False, 0.0)
    assert block_macs(p, 20) == 2 * block_macs(p, 10)


def test_video_macs_scale_with_frames():
    cfg = variant("B", video=True, num_frames=16)
    assert count_flops(cfg, (16, 224, 224)) > 8 * count_flops(variant("B"), (224, 224))
