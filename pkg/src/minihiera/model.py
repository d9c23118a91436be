"""Hierarchical encoder operating on tokens grouped by mask unit.

Activations are kept as ``[B, K, th, tw, C]``: batch, kept units, tokens per
unit along each axis, channels. The dense forward is the sparse forward with
every unit kept, so there is exactly one code path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import BlockPlan, ConfigError, HieraConfig, PoolSpec, plan_blocks
from .layout import (
    MaskSpec,
    TokenLayout,
    build_layout,
    group_by_units,
    kept_index,
    separate_and_pad_pool,
    ungroup_by_units,
)
from .nn import LayerNorm, Linear, Mlp, Module, parameter, trunc_normal
from .tensor import ShapeError, Tensor, broadcast_to, softmax


def pool_units(x: Tensor, pool: PoolSpec | None) -> Tensor:
    if pool is None:
        return x
    k, s, p = pool
    return separate_and_pad_pool(x, k, s, p)


def patchify(pixels, layout: TokenLayout) -> Tensor:
    """Pixels ``[B, H, W, 3]`` (or ``[B, T, H, W, 3]``) -> ``[B, U, 8, 8, patch_dim]``.

    Patches never straddle mask units, so embedding kept units alone gives the
    same tokens as embedding the full grid.
    """
    x = pixels if isinstance(pixels, Tensor) else Tensor(np.asarray(pixels))
    mh, mw = layout.mask_unit_tokens[-2:]
    ph, pw = layout.pixel_patch[-2:]
    t, uh, uw = layout.unit_grid
    if layout.temporal:
        pt = layout.pixel_patch[0]
        b = x.shape[0]
        want = (b, t * pt, uh * mh * ph, uw * mw * pw, 3)
        if x.shape != want:
            raise ShapeError(f"video input {x.shape} does not match layout {want}")
        y = x.reshape(b, t, pt, uh, mh, ph, uw, mw, pw, 3)
        y = y.transpose(0, 1, 3, 6, 4, 7, 2, 5, 8, 9)
        return y.reshape(b, t * uh * uw, mh, mw, pt * ph * pw * 3)
    b = x.shape[0]
    want = (b, uh * mh * ph, uw * mw * pw, 3)
    if x.shape != want:
        raise ShapeError(f"image input {x.shape} does not match layout {want}")
    y = x.reshape(b, uh, mh, ph, uw, mw, pw, 3)
    y = y.transpose(0, 1, 4, 2, 5, 3, 6, 7)
    return y.reshape(b, uh * uw, mh, mw, ph * pw * 3)


def drop_path(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Per-sample stochastic depth without rescaling.

    Training keeps a branch with probability ``1 - rate``; evaluation scales
    it by ``1 - rate`` so both modes agree in expectation.
    """
    if rate == 0.0:
        return x
    if not training:
        return x * (1.0 - rate)
    if rng is None:
        raise ValueError("drop path in training mode needs an rng")
    keep = (rng.random(x.shape[0]) >= rate).astype(x.dtype)
    mask = np.broadcast_to(keep.reshape(-1, *([1] * (x.ndim - 1))), x.shape)
    return x * np.ascontiguousarray(mask)


def _split_heads(t: Tensor, heads: int) -> Tensor:
    b, k, h, w, c = t.shape
    return t.reshape(b, k, h * w, heads, c // heads).transpose(0, 1, 3, 2, 4)


def scaled_dot_product(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    scale = q.shape[-1] ** -0.5
    attn = softmax((q @ k.swapaxes(-1, -2)) * scale, axis=-1)
    return attn @ v


class UnitAttention(Module):
    """Multi-head attention whose window follows the block plan.

    ``mask_unit``: attention inside each unit. ``global``: attention over all
    kept tokens. ``kv_pool``: global attention against per-unit pooled K, V.
    """

    def __init__(self, plan: BlockPlan, rng: np.random.Generator):
        if plan.dim_out % plan.heads:
            raise ConfigError(f"width {plan.dim_out} not divisible by {plan.heads} heads")
        self.plan = plan
        self.qkv = Linear(plan.dim_in, 3 * plan.dim_out, rng)
        self.proj = Linear(plan.dim_out, plan.dim_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        plan = self.plan
        b, k = x.shape[:2]
        c, heads = plan.dim_out, plan.heads
        qkv = self.qkv(x).reshape(*x.shape[:-1], 3, c)
        q = pool_units(qkv[:, :, :, :, 0], plan.q_pool)
        key = pool_units(qkv[:, :, :, :, 1], plan.kv_pool)
        val = pool_units(qkv[:, :, :, :, 2], plan.kv_pool)
        qh, qw = q.shape[2:4]
        q, key, val = (_split_heads(t, heads) for t in (q, key, val))  # [B, K, h, n, d]

        if plan.attn_kind == "mask_unit":
            out = scaled_dot_product(q, key, val)
            if plan.q_attn_residual:
                out = out + q
        else:
            def flatten(t):
                return t.transpose(0, 2, 1, 3, 4).reshape(b, heads, -1, c // heads)

            out = scaled_dot_product(flatten(q), flatten(key), flatten(val))
            if plan.q_attn_residual:
                out = out + flatten(q)
            out = out.reshape(b, heads, k, qh * qw, c // heads).transpose(0, 2, 1, 3, 4)
        out = out.transpose(0, 1, 3, 2, 4).reshape(b, k, qh, qw, c)
        return self.proj(out)


class HieraBlock(Module):
    """Pre-norm attention and MLP with residuals.

    Transition blocks project the normalised input to the new width and pool
    it the same way as Q to form the skip path.
    """

    def __init__(self, plan: BlockPlan, rng: np.random.Generator, mlp_ratio: float = 4.0,
                 ln_eps: float = 1e-6):
        self.plan = plan
        self.norm1 = LayerNorm(plan.dim_in, ln_eps)
        self.proj = Linear(plan.dim_in, plan.dim_out, rng) if plan.dim_in != plan.dim_out else None
        self.attn = UnitAttention(plan, rng)
        self.norm2 = LayerNorm(plan.dim_out, ln_eps)
        self.mlp = Mlp(plan.dim_out, int(plan.dim_out * mlp_ratio), rng)
        self.skip_pool = plan.q_pool if plan.unit_in != plan.unit_out else None

    def __call__(self, x: Tensor, training: bool = False, rng: np.random.Generator | None = None,
                 drop_path_rate: float | None = None) -> Tensor:
        rate = self.plan.drop_path if drop_path_rate is None else drop_path_rate
        xn = self.norm1(x)
        if self.proj is not None or self.skip_pool is not None:
            x = pool_units(self.proj(xn) if self.proj is not None else xn, self.skip_pool)
        x = x + drop_path(self.attn(xn), rate, training, rng)
        return x + drop_path(self.mlp(self.norm2(x)), rate, training, rng)


def q_pool_transition(x: Tensor, proj: Linear, pool: PoolSpec = (2, 2, 0)) -> Tensor:
    """Project ``[..., units, h, w, C]`` to the new width, then max pool within units."""
    if x.shape[-3] % pool[1] or x.shape[-2] % pool[1]:
        raise ShapeError(f"cannot pool odd token extents {x.shape[-3:-1]}")
    return pool_units(proj(x), pool)


@dataclass
class StageFeatures:
    """Outputs of every active stage as ``[B, K, th, tw, C]`` over kept units."""

    features: list[Tensor]
    unit_tokens: list[tuple[int, int]]
    layout: TokenLayout
    masks: list[MaskSpec] | None = None

    @property
    def is_masked(self) -> bool:
        return self.masks is not None and any(m.masked for m in self.masks)

    def stage_grid(self, stage: int) -> Tensor:
        """Dense token grid of one stage (only for unmasked forwards)."""
        if self.is_masked:
            raise ValueError("masked features do not cover the full grid")
        layout = self.layout
        feat = self.features[stage]
        return ungroup_by_units(feat, _stage_layout(layout, self.unit_tokens), stage)


def _stage_layout(layout: TokenLayout, units: list[tuple[int, int]]) -> TokenLayout:
    return TokenLayout(layout.pixel_patch, layout.grid, layout.mask_unit_tokens, layout.temporal,
                       tuple(units))


class HieraEncoder(Module):
    def __init__(self, config: HieraConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = config
        extents = (config.num_frames, *config.input_size) if config.video else config.input_size
        self.layout = build_layout(extents, config)
        layout = self.layout
        c1 = config.channels[0]
        patch_dim = int(np.prod(layout.pixel_patch)) * 3
        self.patch_embed = Linear(patch_dim, c1, rng)
        h, w = layout.grid_hw
        if layout.temporal:
            self.pos_embed_spatial = parameter(trunc_normal(rng, (h * w, c1)))
            self.pos_embed_temporal = parameter(trunc_normal(rng, (layout.frames, c1)))
        else:
            self.pos_embed = parameter(trunc_normal(rng, (h * w, c1)))
        self.plan = plan_blocks(config)
        self.blocks = [HieraBlock(p, rng, config.mlp_ratio, config.ln_eps) for p in self.plan]
        self.stage_ends = [i for i, p in enumerate(self.plan)
                           if i + 1 == len(self.plan) or self.plan[i + 1].stage != p.stage]

    def grouped_pos_embed(self) -> Tensor:
        """Position table grouped by mask unit: ``[U, 8, 8, C]``."""
        layout = self.layout
        h, w = layout.grid_hw
        c = self.config.channels[0]
        if layout.temporal:
            t = layout.frames
            spatial = broadcast_to(self.pos_embed_spatial.reshape(1, h * w, c), (t, h * w, c))
            temporal = broadcast_to(self.pos_embed_temporal.reshape(t, 1, c), (t, h * w, c))
            table = (spatial + temporal).reshape(t, h, w, c)
        else:
            table = self.pos_embed.reshape(h, w, c)
        return group_by_units(table, layout, 0, flat=False)

    def embed(self, pixels, masks: list[MaskSpec] | None = None) -> Tensor:
        units = patchify(pixels, self.layout)
        pos = self.grouped_pos_embed()
        if masks is not None:
            if len(masks) != units.shape[0]:
                raise ValueError(f"{len(masks)} masks for a batch of {units.shape[0]}")
            idx = kept_index(masks)
            units = units[np.arange(len(masks))[:, None], idx]
            pos = pos[idx]
        return self.patch_embed(units) + pos

    def __call__(self, pixels, masks: list[MaskSpec] | None = None, training: bool = False,
                 rng: np.random.Generator | None = None) -> StageFeatures:
        if masks is not None and not self.config.pretrain_mode:
            raise ConfigError("masked forward requires pretrain_mode")
        x = self.embed(pixels, masks)
        feats = []
        for i, block in enumerate(self.blocks):
            x = block(x, training=training, rng=rng)
            if i in self.stage_ends:
                feats.append(x)
        return StageFeatures(feats, list(self.config.stage_unit_tokens()), self.layout, masks)

    forward_encoder = __call__


class ClassifierHead(Module):
    """Mean over tokens, layer norm, linear (zero-initialised weight)."""

    def __init__(self, dim: int, num_classes: int, ln_eps: float = 1e-6):
        self.norm = LayerNorm(dim, ln_eps)
        self.fc = Linear(dim, num_classes, np.random.default_rng(0))
        self.fc.weight.data[...] = 0.0

    def __call__(self, feats: StageFeatures | Tensor) -> Tensor:
        if isinstance(feats, StageFeatures):
            if feats.is_masked:
                raise ValueError("classifier head needs a dense (unmasked) forward")
            x = feats.features[-1]
        else:
            x = feats
        b, c = x.shape[0], x.shape[-1]
        pooled = x.reshape(b, -1, c).mean(axis=1)
        return self.fc(self.norm(pooled))


class HieraClassifier(Module):
    def __init__(self, config: HieraConfig, seed: int = 0):
        self.config = config
        self.encoder = HieraEncoder(config, seed)
        last = config.channels[config.num_active_stages - 1]
        self.head = ClassifierHead(last, config.num_classes, config.ln_eps)

    def __call__(self, pixels, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        return self.head(self.encoder(pixels, None, training, rng))
