"""Masked-autoencoder pretraining head: multi-scale fusion, decoder, masked loss."""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import BlockPlan, DecoderConfig, HieraConfig
from .layout import MaskSpec, TokenLayout, restore_with_mask_tokens, separate_and_pad_pool
from .model import HieraBlock, HieraEncoder, StageFeatures
from .nn import LayerNorm, Linear, Module, parameter, trunc_normal
from .targets import ReconTarget, make_target, target_dim, token_pixels, untoken_pixels
from .tensor import Tensor


class MultiScaleFusion(Module):
    """Max-pool every stage inside its units down to the final token grid,
    project each to the decoder width, and sum."""

    def __init__(self, channels: Sequence[int], final_tokens: tuple[int, int], width: int,
                 rng: np.random.Generator, multi_scale: bool = True):
        self.final_tokens = tuple(final_tokens)
        self.stages = list(range(len(channels))) if multi_scale else [len(channels) - 1]
        self.projs = [Linear(channels[s], width, rng) for s in self.stages]

    def __call__(self, feats: StageFeatures) -> Tensor:
        fh, fw = self.final_tokens
        out = None
        for s, proj in zip(self.stages, self.projs):
            f = feats.features[s]
            h, w = f.shape[2:4]
            if h % fh or w % fw:
                raise AssertionError(f"stage {s + 1} grid {h}x{w} cannot pool to {fh}x{fw}")
            kernel = (h // fh, w // fw)
            if kernel != (1, 1):
                f = separate_and_pad_pool(f, kernel, kernel, 0)
            y = proj(f)
            out = y if out is None else out + y
        return out


def fuse_multiscale(feats: StageFeatures, fusion: MultiScaleFusion) -> Tensor:
    return fusion(feats)


class MAEDecoder(Module):
    def __init__(self, config: HieraConfig, layout: TokenLayout, dec: DecoderConfig,
                 rng: np.random.Generator):
        units = config.stage_unit_tokens()
        final = units[-1]
        active = config.channels[: config.num_active_stages]
        self.dec = dec
        self.final_tokens = final
        self.fusion = MultiScaleFusion(active, final, dec.width, rng, dec.multi_scale)
        self.mask_token = parameter(trunc_normal(rng, (dec.width,)))
        self.pos_embed = parameter(trunc_normal(rng, (layout.total_units * final[0] * final[1], dec.width)))
        plan = BlockPlan(index=0, stage=0, dim_in=dec.width, dim_out=dec.width, heads=dec.heads,
                         unit_in=final, unit_out=final, attn_kind="global", q_pool=None,
                         kv_pool=None, q_attn_residual=False, drop_path=0.0)
        self.blocks = [HieraBlock(replace(plan, index=i), rng, config.mlp_ratio, config.ln_eps)
                       for i in range(dec.depth)]
        self.norm = LayerNorm(dec.width, config.ln_eps)
        self.pred = Linear(dec.width, target_dim(dec.target_kind, layout, final), rng)
        self.total_units = layout.total_units

    def __call__(self, fused: Tensor, masks: Sequence[MaskSpec]) -> Tensor:
        """Fused kept-unit features ``[B, K, fh, fw, W]`` -> predictions ``[B, U, fh*fw, P]``."""
        fh, fw = self.final_tokens
        x = restore_with_mask_tokens(fused, list(masks), self.mask_token)
        x = x + self.pos_embed.reshape(self.total_units, fh, fw, self.dec.width)
        for block in self.blocks:
            x = block(x)
        x = self.pred(self.norm(x))
        return x.reshape(x.shape[0], self.total_units, fh * fw, x.shape[-1])


def decode(fused: Tensor, masks: Sequence[MaskSpec], decoder: MAEDecoder) -> Tensor:
    return decoder(fused, masks)


def mae_loss(pred: Tensor, target: ReconTarget | np.ndarray, masks: Sequence[MaskSpec]) -> Tensor:
    """Mean squared error over the tokens of deleted units only.

    Normalised by masked-token count times target width, so the loss scale
    does not depend on the mask ratio.
    """
    values = target.values if isinstance(target, ReconTarget) else np.asarray(target)
    if pred.shape != values.shape:
        raise ValueError(f"prediction {pred.shape} vs target {values.shape}")
    flags = np.stack([m.masked_flags() for m in masks]).astype(pred.dtype)  # [B, U]
    n_tokens = flags.sum() * pred.shape[2]
    if n_tokens == 0:
        raise ValueError("mae_loss needs at least one masked unit")
    weight = np.ascontiguousarray(np.broadcast_to(flags[:, :, None, None], pred.shape))
    diff = pred - values.astype(pred.dtype)
    return (diff * diff * weight).sum() * (1.0 / (n_tokens * pred.shape[3]))


class MaskedAutoencoder(Module):
    """Sparse encoder plus decoder; ``loss`` runs the full pretraining objective."""

    def __init__(self, config: HieraConfig, dec: DecoderConfig, seed: int = 0):
        if not config.pretrain_mode:
            config = replace(config, pretrain_mode=True)
        self.config = config
        self.dec = dec
        self.encoder = HieraEncoder(config, seed)
        self.decoder = MAEDecoder(config, self.encoder.layout, dec, np.random.default_rng(seed + 1))

    @property
    def layout(self) -> TokenLayout:
        return self.encoder.layout

    @property
    def final_tokens(self) -> tuple[int, int]:
        return self.decoder.final_tokens

    def __call__(self, pixels, masks: Sequence[MaskSpec], training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
        feats = self.encoder(pixels, list(masks), training, rng)
        return self.decoder(self.decoder.fusion(feats), masks)

    def target(self, pixels) -> ReconTarget:
        pixels = pixels.data if isinstance(pixels, Tensor) else pixels
        return make_target(self.dec.target_kind, pixels, self.layout, self.final_tokens)

    def loss(self, pixels, masks: Sequence[MaskSpec], training: bool = False,
             rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor, ReconTarget]:
        pred = self(pixels, masks, training, rng)
        target = self.target(pixels)
        return mae_loss(pred, target, masks), pred, target


# -- qualitative dumps ----------------------------------------------------------

def reconstruct_pixels(pred: np.ndarray, target: ReconTarget, pixels: np.ndarray,
                       masks: Sequence[MaskSpec], layout: TokenLayout,
                       unit_tokens: tuple[int, int]) -> np.ndarray:
    """Paste de-normalised predictions into deleted units of the input."""
    if target.kind != "pixel_norm":
        raise ValueError("pixel reconstructions need the pixel_norm target")
    recon = np.asarray(pred, dtype=np.float64) * np.sqrt(target.var + 1e-6) + target.mean
    flags = np.stack([m.masked_flags() for m in masks])[:, :, None, None]
    original = token_pixels(pixels, layout, unit_tokens)
    merged = np.where(flags, recon, original)
    return untoken_pixels(merged, layout, unit_tokens)


def masked_input(pixels: np.ndarray, masks: Sequence[MaskSpec], layout: TokenLayout,
                 unit_tokens: tuple[int, int], fill: float = 0.5) -> np.ndarray:
    flags = np.stack([m.masked_flags() for m in masks])[:, :, None, None]
    tokens = token_pixels(pixels, layout, unit_tokens)
    return untoken_pixels(np.where(flags, fill, tokens), layout, unit_tokens)


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    """Binary portable pixmap from ``[H, W, 3]`` values in [0, 1]."""
    img = (np.clip(rgb, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def recon_triplets(pixels: np.ndarray, masked: np.ndarray, recon: np.ndarray, gap: int = 2) -> np.ndarray:
    """Rows of (input, masked, reconstruction) per sample, first frame for video."""
    if pixels.ndim == 5:
        pixels, masked, recon = pixels[:, 0], masked[:, 0], recon[:, 0]
    b, h, w, _ = pixels.shape
    canvas = np.ones((b * (h + gap) - gap, 3 * (w + gap) - gap, 3))
    for i in range(b):
        y = i * (h + gap)
        for j, img in enumerate((pixels[i], masked[i], recon[i])):
            x = j * (w + gap)
            canvas[y : y + h, x : x + w] = img
    return canvas
