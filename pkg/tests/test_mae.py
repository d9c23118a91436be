from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from minihiera.config import DecoderConfig, tiny
from minihiera.layout import MaskSpec, build_layout, sample_mask
from minihiera.mae import MAEDecoder, MaskedAutoencoder, mae_loss, write_ppm
from minihiera.model import HieraEncoder
from minihiera.targets import hog_cells, hog_target, pixel_target, target_dim, token_pixels, untoken_pixels
from minihiera.tensor import Tensor, grad_check

from oracles import hog_tokens

SMALL_DEC = DecoderConfig(depth=1, width=16, heads=2)


def _images(n=2, h=64, w=32, seed=0):
    return np.random.default_rng(seed).random((n, h, w, 3), dtype=np.float32)


# -- pixel target ---------------------------------------------------------------------------


def test_pixel_target_constant_patch_is_zero():
    lay = build_layout((32, 32))
    t = pixel_target(np.full((1, 32, 32, 3), 0.7, np.float32), lay)
    assert np.abs(t.values).max() < 1e-6


def test_pixel_target_two_valued_patch():
    lay = build_layout((32, 32))
    img = np.zeros((1, 32, 32, 3))
    img[:, :, ::2] = 2.0  # each 16x16 token holds equally many 0s and 2s
    t = pixel_target(img, lay)
    np.testing.assert_allclose(np.abs(t.values), 1.0, atol=1e-6)
    assert set(np.round(np.unique(t.values), 5)) == {-1.0, 1.0}


def test_pixel_target_width_and_stats():
    lay = build_layout((64, 32))
    t = pixel_target(_images(), lay)
    assert t.values.shape == (2, 2, 4, 768)
    np.testing.assert_allclose(t.values.mean(-1), 0.0, atol=1e-5)
    np.testing.assert_allclose(t.values.var(-1), 1.0, atol=1e-3)
    vid = build_layout((4, 64, 32))
    assert target_dim("pixel_norm", vid, (2, 2)) == 1536


@settings(max_examples=25, deadline=None)
@given(st.floats(-5, 5), st.floats(0.5, 4.0))
def test_pixel_target_shift_and_scale_invariant(c, a):
    lay = build_layout((32, 32))
    x = _images(1, 32, 32).astype(np.float64)
    base = pixel_target(x, lay).values
    np.testing.assert_allclose(pixel_target(x + c, lay).values, base, atol=1e-6)
    np.testing.assert_allclose(pixel_target(x * a, lay).values, base, atol=1e-4)


def test_token_pixels_round_trip():
    lay = build_layout((4, 64, 32))
    x = np.random.default_rng(1).random((2, 4, 64, 32, 3))
    assert np.array_equal(untoken_pixels(token_pixels(x, lay, (2, 2)), lay, (2, 2)), x)


# -- HOG target -----------------------------------------------------------------------------------


def test_hog_constant_image_zero_histograms():
    assert not hog_cells(np.full((16, 16), 0.3)).any()


def test_hog_step_edge_lands_in_90_degree_bin():
    gray = np.zeros((16, 16))
    gray[8:] = 1.0  # intensity steps along the vertical axis
    cells = hog_cells(gray)
    total = cells.sum(axis=(0, 1))
    assert total.argmax() == 4  # bin centred on 90 degrees
    assert total[4] == pytest.approx(total.sum())


def test_hog_dims():
    assert hog_target(_images(1, 32, 32), build_layout((32, 32))).values.shape == (1, 1, 4, 36)
    vid = build_layout((2, 32, 32))
    clip = np.random.default_rng(0).random((1, 2, 32, 32, 3))
    assert hog_target(clip, vid).values.shape == (1, 1, 4, 72)


def test_hog_matches_bruteforce():
    img = _images(1, 32, 32, seed=3)[0]
    ours = hog_target(img[None], build_layout((32, 32))).values[0, 0]
    np.testing.assert_allclose(ours, hog_tokens(img), atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3))
def test_hog_shift_invariant(c):
    lay = build_layout((32, 32))
    x = _images(1, 32, 32, seed=4).astype(np.float64)
    np.testing.assert_allclose(hog_target(x + c, lay).values, hog_target(x, lay).values, atol=1e-9)


# -- loss ---------------------------------------------------------------------------------------


def _masks():
    return [MaskSpec(4, (0, 2), (1, 3)), MaskSpec(4, (1, 2), (0, 3))]


def test_mae_loss_zero_cases():
    rng = np.random.default_rng(0)
    target = rng.normal(size=(2, 4, 3, 5))
    masks = _masks()
    assert mae_loss(Tensor(target), target, masks).item() == 0.0
    pred = target.copy()
    for i, m in enumerate(masks):
        pred[i, list(m.kept)] += 10.0
    assert mae_loss(Tensor(pred), target, masks).item() == 0.0


def test_mae_loss_bruteforce_sum():
    rng = np.random.default_rng(1)
    pred, target = rng.normal(size=(2, 4, 3, 5)), rng.normal(size=(2, 4, 3, 5))
    masks = _masks()
    total, count = 0.0, 0
    for i, m in enumerate(masks):
        for u in m.masked:
            for t in range(3):
                for p in range(5):
                    total += (pred[i, u, t, p] - target[i, u, t, p]) ** 2
                    count += 1
    got = mae_loss(Tensor(pred, dtype=np.float64), target, masks).item()
    assert abs(got - total / count) <= 1e-6


def test_mae_loss_needs_masked_units():
    with pytest.raises(ValueError):
        mae_loss(Tensor(np.zeros((1, 2, 1, 1))), np.zeros((1, 2, 1, 1)), [MaskSpec.full(2)])


def test_mae_loss_visible_gradients_exactly_zero():
    rng = np.random.default_rng(2)
    pred = Tensor(rng.normal(size=(2, 4, 3, 5)), requires_grad=True)
    masks = _masks()
    mae_loss(pred, rng.normal(size=(2, 4, 3, 5)), masks).backward()
    for i, m in enumerate(masks):
        assert np.all(pred.grad[i, list(m.kept)] == 0.0)
        assert np.any(pred.grad[i, list(m.masked)] != 0.0)


# -- fusion and decoder ---------------------------------------------------------------------


def _encoder_and_feats(seed=0):
    cfg = tiny(pretrain_mode=True, input_size=(64, 64))
    enc = HieraEncoder(cfg, seed)
    masks = [sample_mask(enc.layout, 0.5, s) for s in range(2)]
    return cfg, enc, enc(_images(2, 64, 64), masks), masks


def test_fusion_stage4_identity():
    cfg, enc, feats, _ = _encoder_and_feats()
    dec = MAEDecoder(cfg, enc.layout, DecoderConfig(depth=1, width=64, heads=2), np.random.default_rng(0))
    for i, proj in enumerate(dec.fusion.projs):
        proj.weight.data[...] = np.eye(64) if i == 3 else 0.0
        proj.bias.data[...] = 0.0
    np.testing.assert_array_equal(dec.fusion(feats).data, feats.features[3].data)


def test_fusion_pool_factors():
    cfg, enc, feats, _ = _encoder_and_feats()
    units = cfg.stage_unit_tokens()
    final = units[-1]
    factors = [(u[0] // final[0]) * (u[1] // final[1]) for u in units]
    assert factors == [16, 4, 1, 1]


def test_single_scale_differs_from_multi_scale():
    cfg, enc, feats, _ = _encoder_and_feats()
    multi = MAEDecoder(cfg, enc.layout, SMALL_DEC, np.random.default_rng(0))
    single = MAEDecoder(cfg, enc.layout, DecoderConfig(depth=1, width=16, heads=2, multi_scale=False),
                        np.random.default_rng(0))
    single.fusion.projs[0].weight.data[...] = multi.fusion.projs[3].weight.data
    assert not np.allclose(multi.fusion(feats).data, single.fusion(feats).data)


def test_decoder_depth_and_full_grid():
    cfg = tiny(pretrain_mode=True, input_size=(64, 64))
    mae = MaskedAutoencoder(cfg, DecoderConfig(depth=8, width=16, heads=2), 0)
    assert len(mae.decoder.blocks) == 8
    masks = [MaskSpec(4, (2,), (0, 1, 3))] * 2
    pred = mae(_images(2, 64, 64), masks)
    assert pred.shape == (2, 4, 4, 768)


def test_mask_token_receives_gradient():
    mae = MaskedAutoencoder(tiny(), SMALL_DEC, 0)
    x = _images(2)
    masks = [sample_mask(mae.layout, 0.5, s) for s in range(2)]
    loss, _, _ = mae.loss(x, masks)
    loss.backward()
    assert np.abs(mae.decoder.mask_token.grad).sum() > 0


@pytest.mark.parametrize("kind", ["pixel_norm", "hog"])
@pytest.mark.parametrize("video", [False, True])
def test_decoder_output_matches_target_shape(kind, video):
    cfg = tiny(video=video, num_frames=4) if video else tiny()
    mae = MaskedAutoencoder(cfg, DecoderConfig(depth=1, width=16, heads=2, target_kind=kind), 0)
    shape = (2, 4, 64, 32, 3) if video else (2, 64, 32, 3)
    x = np.random.default_rng(0).random(shape, dtype=np.float32)
    masks = [sample_mask(mae.layout, 0.5, s) for s in range(2)]
    loss, pred, target = mae.loss(x, masks)
    assert pred.shape == target.values.shape
    assert np.isfinite(loss.item())


def test_end_to_end_grad_check_tiny_mae():
    mae = MaskedAutoencoder(tiny(), SMALL_DEC, 0).astype(np.float64)
    x = _images(1).astype(np.float64)
    masks = [sample_mask(mae.layout, 0.5, 0)]
    target = mae.target(x)
    assert grad_check(lambda t: mae_loss(mae(t, masks), target, masks), x, sample=60) <= 1e-3


def test_write_ppm(tmp_path: Path):
    path = tmp_path / "x.ppm"
    write_ppm(path, np.zeros((4, 6, 3)))
    data = path.read_bytes()
    assert data.startswith(b"P6\n6 4\n255\n")
    assert len(data) == len(b"P6\n6 4\n255\n") + 4 * 6 * 3
