"""Token grids, mask units, mask sampling, and sparse delete/restore."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import ConfigError, HieraConfig, STAGE_UNIT_TOKENS
from .tensor import ShapeError, Tensor, custom_op, max_pool

UNIT_PIXELS = 32  # mask unit edge in pixels
PATCH_PIXELS = 4  # token edge in pixels at stage 1


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class TokenLayout:
    """Token grid of one input.

    ``grid`` is ``(H, W)`` for images and ``(T, H, W)`` for video, in stage-1
    tokens. Each mask unit spans one token frame and 8x8 tokens.
    """

    pixel_patch: tuple[int, ...]
    grid: tuple[int, ...]
    mask_unit_tokens: tuple[int, ...]
    temporal: bool
    stage_unit_tokens: tuple[tuple[int, int], ...] = STAGE_UNIT_TOKENS

    def __post_init__(self):
        for g, m in zip(self.grid, self.mask_unit_tokens):
            if g % m:
                raise LayoutError(f"grid {self.grid} not divisible by unit {self.mask_unit_tokens}")

    @property
    def frames(self) -> int:
        return self.grid[0] if self.temporal else 1

    @property
    def grid_hw(self) -> tuple[int, int]:
        return self.grid[-2], self.grid[-1]

    @property
    def unit_grid(self) -> tuple[int, int, int]:
        uh = self.grid[-2] // self.mask_unit_tokens[-2]
        uw = self.grid[-1] // self.mask_unit_tokens[-1]
        return self.frames, uh, uw

    @property
    def total_units(self) -> int:
        t, h, w = self.unit_grid
        return t * h * w

    def unit_tokens(self, stage: int = 0) -> tuple[int, int]:
        return self.stage_unit_tokens[stage]

    def tokens_per_unit(self, stage: int = 0) -> int:
        h, w = self.unit_tokens(stage)
        return h * w

    def stage_grid(self, stage: int = 0) -> tuple[int, ...]:
        t, uh, uw = self.unit_grid
        h, w = self.unit_tokens(stage)
        return (t, uh * h, uw * w) if self.temporal else (uh * h, uw * w)

    def unit_pixels(self) -> tuple[int, int, int]:
        """Frames, height, width of one mask unit in input pixels."""
        return (
            self.pixel_patch[0] if self.temporal else 1,
            self.mask_unit_tokens[-2] * self.pixel_patch[-2],
            self.mask_unit_tokens[-1] * self.pixel_patch[-1],
        )


def build_layout(input_extents: Sequence[int], config: HieraConfig | None = None) -> TokenLayout:
    """Layout for ``(H, W)`` images or ``(T, H, W)`` video.

    Spatial extents must be multiples of the 32 px mask unit and frame counts
    multiples of the 2-frame token depth.
    """
    extents = tuple(int(e) for e in input_extents)
    temporal = len(extents) == 3
    if config is not None and config.video != temporal:
        raise LayoutError(f"input extents {extents} do not match config video={config.video}")
    if len(extents) not in (2, 3):
        raise LayoutError(f"expected (H, W) or (T, H, W), got {extents}")
    names = ("frames", "height", "width") if temporal else ("height", "width")
    for name, n in zip(names[-2:], extents[-2:]):
        if n % UNIT_PIXELS or n <= 0:
            raise LayoutError(f"input {name} {n} is not a positive multiple of {UNIT_PIXELS} px")
    grid_hw = (extents[-2] // PATCH_PIXELS, extents[-1] // PATCH_PIXELS)
    units = (UNIT_PIXELS // PATCH_PIXELS,) * 2
    if config is not None:
        stage_units = tuple(config.stage_unit_tokens())
    else:
        stage_units = STAGE_UNIT_TOKENS
    if temporal:
        if extents[0] % 2 or extents[0] <= 0:
            raise LayoutError(f"input frames {extents[0]} is not a positive multiple of 2")
        return TokenLayout((2, PATCH_PIXELS, PATCH_PIXELS), (extents[0] // 2, *grid_hw),
                           (1, *units), True, stage_units)
    return TokenLayout((PATCH_PIXELS, PATCH_PIXELS), grid_hw, units, False, stage_units)


# -- masks --------------------------------------------------------------------

@dataclass(frozen=True)
class MaskSpec:
    """Kept and deleted mask units for one sample, both in ascending unit order."""

    total_units: int
    kept: tuple[int, ...]
    masked: tuple[int, ...]
    seed: int | None = None

    def __post_init__(self):
        kept = tuple(int(k) for k in self.kept)
        masked = tuple(int(m) for m in self.masked)
        object.__setattr__(self, "kept", kept)
        object.__setattr__(self, "masked", masked)
        if sorted(kept + masked) != list(range(self.total_units)):
            raise ValueError("kept and masked must partition 0..total_units-1")
        if not kept:
            raise ValueError("a mask must keep at least one unit")

    @classmethod
    def full(cls, total_units: int) -> MaskSpec:
        """Keep every unit (masking disabled)."""
        return cls(total_units, tuple(range(total_units)), ())

    @property
    def num_kept(self) -> int:
        return len(self.kept)

    def masked_flags(self) -> np.ndarray:
        flags = np.zeros(self.total_units, dtype=bool)
        flags[list(self.masked)] = True
        return flags

    def to_text(self) -> str:
        lines = [
            f"total {self.total_units}",
            f"seed {'none' if self.seed is None else self.seed}",
            "kept " + " ".join(map(str, self.kept)),
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> MaskSpec:
        fields = {}
        for line in text.strip().splitlines():
            key, _, rest = line.strip().partition(" ")
            fields[key] = rest.strip()
        total = int(fields["total"])
        kept = tuple(int(v) for v in fields.get("kept", "").split())
        seed = None if fields.get("seed", "none") == "none" else int(fields["seed"])
        masked = tuple(sorted(set(range(total)) - set(kept)))
        return cls(total, kept, masked, seed)


def keep_count(total_units: int, ratio: float) -> int:
    return min(max(int(np.floor(total_units * (1.0 - ratio) + 1e-9)), 1), total_units - 1)


def sample_mask(layout: TokenLayout | int, ratio: float, seed: int) -> MaskSpec:
    """Uniformly delete ``ratio`` of the mask units, deterministically per seed."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"mask ratio must lie in (0, 1), got {ratio}")
    total = layout if isinstance(layout, int) else layout.total_units
    if total < 2:
        raise ConfigError(f"cannot mask a layout with {total} unit(s)")
    n_keep = keep_count(total, ratio)
    perm = np.random.default_rng(seed).permutation(total)
    return MaskSpec(total, tuple(sorted(perm[:n_keep])), tuple(sorted(perm[n_keep:])), seed)


def kept_index(masks: Sequence[MaskSpec]) -> np.ndarray:
    counts = {m.num_kept for m in masks}
    if len(counts) != 1:
        raise ValueError("masks in a batch must keep the same number of units")
    return np.array([m.kept for m in masks], dtype=np.int64)


# -- grouping -----------------------------------------------------------------

def _wrap(x) -> tuple[Tensor, bool]:
    return (x, False) if isinstance(x, Tensor) else (Tensor(np.asarray(x)), True)


def group_by_units(tokens, layout: TokenLayout, stage: int = 0, flat: bool = True):
    """``[..., (T,) H, W, C]`` grid -> ``[..., U, t, C]`` (or ``[..., U, th, tw, C]``).

    Units are ordered frame-major, then row, then column.
    """
    x, raw = _wrap(tokens)
    th, tw = layout.unit_tokens(stage)
    grid = layout.stage_grid(stage)
    nd = len(grid) + 1
    if tuple(x.shape[-nd:-1]) != tuple(grid):
        raise ShapeError(f"token grid {x.shape[-nd:-1]} does not match layout {grid}")
    lead = x.shape[:-nd]
    t, uh, uw = layout.unit_grid
    c = x.shape[-1]
    y = x.reshape(*lead, t, uh, th, uw, tw, c)
    k = len(lead)
    y = y.transpose(*range(k), k, k + 1, k + 3, k + 2, k + 4, k + 5)
    y = y.reshape(*lead, t * uh * uw, th * tw, c) if flat else y.reshape(*lead, t * uh * uw, th, tw, c)
    return y.data if raw else y


def ungroup_by_units(grouped, layout: TokenLayout, stage: int = 0):
    """Inverse of ``group_by_units`` (accepts flat or unflattened units)."""
    x, raw = _wrap(grouped)
    th, tw = layout.unit_tokens(stage)
    t, uh, uw = layout.unit_grid
    units = layout.total_units
    if x.ndim >= 4 and x.shape[-4] == units and tuple(x.shape[-3:-1]) == (th, tw):
        lead = x.shape[:-4]
    elif x.ndim >= 3 and x.shape[-3] == units and x.shape[-2] == th * tw:
        lead = x.shape[:-3]
    else:
        raise ShapeError(f"{x.shape} is not a grouping of {units} units of {th}x{tw} tokens")
    c = x.shape[-1]
    k = len(lead)
    y = x.reshape(*lead, t, uh, uw, th, tw, c)
    y = y.transpose(*range(k), k, k + 1, k + 3, k + 2, k + 4, k + 5)
    grid = layout.stage_grid(stage)
    y = y.reshape(*lead, *grid, c)
    return y.data if raw else y


def sparse_delete(grouped: Tensor, mask: MaskSpec | Sequence[MaskSpec]) -> Tensor:
    """Keep only the rows of kept units.

    A single ``MaskSpec`` indexes axis 0; a sequence of masks indexes axis 1
    of a batched tensor, one mask per sample.
    """
    x, raw = _wrap(grouped)
    if isinstance(mask, MaskSpec):
        if x.shape[0] != mask.total_units:
            raise ShapeError(f"{x.shape[0]} units given, mask expects {mask.total_units}")
        out = x[np.array(mask.kept, dtype=np.int64)]
    else:
        idx = kept_index(mask)
        if x.shape[0] != len(mask) or x.shape[1] != mask[0].total_units:
            raise ShapeError(f"batched units {x.shape[:2]} do not match {len(mask)} masks "
                             f"of {mask[0].total_units} units")
        out = x[np.arange(len(mask))[:, None], idx]
    return out.data if raw else out


def restore_with_mask_tokens(visible: Tensor, mask: MaskSpec | Sequence[MaskSpec],
                             mask_token: Tensor) -> Tensor:
    """Scatter kept units back to their indices; fill deleted units with ``mask_token``."""
    visible, _ = _wrap(visible)
    mask_token, _ = _wrap(mask_token)
    single = isinstance(mask, MaskSpec)
    masks = [mask] if single else list(mask)
    v = visible.data[None] if single else visible.data
    idx = kept_index(masks)
    if v.shape[0] != len(masks) or v.shape[1] != idx.shape[1]:
        raise ShapeError(f"visible units {visible.shape} do not match kept count {idx.shape[1]}")
    if mask_token.shape != (v.shape[-1],):
        raise ShapeError(f"mask token shape {mask_token.shape} vs channels {v.shape[-1]}")
    total = masks[0].total_units
    out = np.empty((v.shape[0], total, *v.shape[2:]), dtype=v.dtype)
    out[...] = mask_token.data
    rows = np.arange(len(masks))[:, None]
    out[rows, idx] = v
    filled = np.ones((len(masks), total), dtype=bool)
    filled[rows, idx] = False

    def backward(g):
        gv = g[rows, idx]
        gm = g[filled].reshape(-1, g.shape[-1]).sum(axis=0)
        return (gv[0] if single else gv), gm

    res = custom_op("restore_units", out[0] if single else out, (visible, mask_token), backward)
    return res


def separate_and_pad_pool(grouped: Tensor, kernel, stride=None, padding=0) -> Tensor:
    """Max pool inside each unit of ``[..., units, h, w, C]``, zero-padding at unit borders.

    Units sit on a batch axis, so no window can read a neighbouring (possibly
    deleted) unit.
    """
    x, raw = _wrap(grouped)
    out = max_pool(x, kernel, stride, padding, pad_value=0.0)
    return out.data if raw else out
