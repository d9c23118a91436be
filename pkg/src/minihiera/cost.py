"""Analytic parameter and multiply-accumulate counts from the block plan.

Nothing is allocated; counts follow the same plan the model builder uses.
MACs cover the patch embedding, QKV / output / skip projections, attention
scores and weighted values, MLPs, and the classifier head. Softmax, norms
and activations are not counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import prod
from typing import Sequence

from .config import BlockPlan, HieraConfig, plan_blocks, pooled_extent
from .layout import build_layout


@dataclass
class CostRow:
    name: str
    params: int
    macs: int
    resolution: tuple[int, ...] = ()


@dataclass
class CostReport:
    config_name: str
    input_extents: tuple[int, ...]
    rows: list[CostRow] = field(default_factory=list)

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def stage_resolutions(self) -> list[tuple[int, ...]]:
        return [r.resolution for r in self.rows if r.name.startswith("stage")]

    def table(self) -> str:
        lines = [f"{self.config_name} @ {'x'.join(map(str, self.input_extents))}",
                 f"{'part':<8} {'tokens':>12} {'params':>14} {'MACs':>16}"]
        for r in self.rows:
            res = "x".join(map(str, r.resolution)) if r.resolution else "-"
            lines.append(f"{r.name:<8} {res:>12} {r.params:>14,} {r.macs:>16,}")
        lines.append(f"{'total':<8} {'':>12} {self.params:>14,} {self.macs:>16,}")
        lines.append(f"params {self.params / 1e6:.2f}M   MACs {self.macs / 1e9:.2f}G")
        return "\n".join(lines)

    def to_mapping(self) -> dict:
        return {
            "config": self.config_name,
            "input": list(self.input_extents),
            "params": self.params,
            "macs": self.macs,
            "stages": {r.name: {"params": r.params, "macs": r.macs, "resolution": list(r.resolution)}
                       for r in self.rows},
        }


def _linear(din: int, dout: int) -> int:
    return din * dout + dout


def block_params(p: BlockPlan, mlp_ratio: float = 4.0) -> int:
    hidden = int(p.dim_out * mlp_ratio)
    n = 2 * p.dim_in  # norm1
    if p.dim_in != p.dim_out:
        n += _linear(p.dim_in, p.dim_out)  # skip projection
    n += _linear(p.dim_in, 3 * p.dim_out) + _linear(p.dim_out, p.dim_out)
    n += 2 * p.dim_out  # norm2
    n += _linear(p.dim_out, hidden) + _linear(hidden, p.dim_out)
    return n


def _pooled_tokens(unit: tuple[int, int], pool) -> int:
    return pooled_extent(unit[0], pool) * pooled_extent(unit[1], pool)


def block_macs(p: BlockPlan, units: int, mlp_ratio: float = 4.0) -> int:
    """MACs of one block for ``units`` mask units."""
    hidden = int(p.dim_out * mlp_ratio)
    n_in = units * prod(p.unit_in)
    q_unit = _pooled_tokens(p.unit_in, p.q_pool)
    kv_unit = _pooled_tokens(p.unit_in, p.kv_pool)
    n_out = units * q_unit
    macs = n_in * p.dim_in * 3 * p.dim_out
    if p.dim_in != p.dim_out:
        macs += n_in * p.dim_in * p.dim_out
    if p.attn_kind == "mask_unit":
        macs += 2 * units * q_unit * kv_unit * p.dim_out
    else:
        macs += 2 * n_out * (units * kv_unit) * p.dim_out
    macs += n_out * p.dim_out * p.dim_out
    macs += n_out * 2 * p.dim_out * hidden
    return macs


def cost_report(config: HieraConfig, input_extents: Sequence[int] | None = None,
                include_head: bool = True) -> CostReport:
    if input_extents is None:
        input_extents = (config.num_frames, *config.input_size) if config.video else config.input_size
    layout = build_layout(tuple(input_extents), config)
    units = layout.total_units
    c1 = config.channels[0]
    patch_dim = prod(layout.pixel_patch) * 3
    tokens = units * layout.tokens_per_unit(0)
    h, w = layout.grid_hw
    pos = h * w * c1 + (layout.frames * c1 if layout.temporal else 0)
    report = CostReport(config.name, tuple(input_extents))
    report.rows.append(CostRow("stem", _linear(patch_dim, c1) + pos, tokens * patch_dim * c1,
                               tuple(layout.stage_grid(0))))
    plan = plan_blocks(config)
    for s in range(config.num_active_stages):
        blocks = [p for p in plan if p.stage == s]
        report.rows.append(CostRow(
            f"stage{s + 1}",
            sum(block_params(p, config.mlp_ratio) for p in blocks),
            sum(block_macs(p, units, config.mlp_ratio) for p in blocks),
            tuple(layout.stage_grid(s)),
        ))
    if include_head:
        last = config.channels[config.num_active_stages - 1]
        report.rows.append(CostRow("head", 2 * last + _linear(last, config.num_classes),
                                   last * config.num_classes))
    return report


def count_params(config: HieraConfig) -> int:
    return cost_report(config).params


def count_flops(config: HieraConfig, input_extents: Sequence[int] | None = None) -> int:
    """Multiply-accumulates of one forward pass."""
    return cost_report(config, input_extents).macs
