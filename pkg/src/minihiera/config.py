"""Model, decoder and ladder configuration.

Config files are plain ``key = value`` lines; ``#`` starts a comment. Lists
are comma separated. Example::

    variant = B
    input_size = 224, 224
    ladder.attn_mode = kv_pool
    decoder.depth = 8
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

ATTN_MODES = ("mu_attn", "kv_pool")
POOL_KERNELS = ("equal_stride", "overlap3")
TARGET_KINDS = ("pixel_norm", "hog")

# tokens per mask unit (per spatial axis) at each stage for a 32x32 px unit
STAGE_UNIT_TOKENS = ((8, 8), (4, 4), (2, 2), (1, 1))


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Ladder:
    attn_mode: str = "mu_attn"
    pool_kernel: str = "equal_stride"
    stride1_pools: bool = False
    q_attn_residual: bool = False

    def __post_init__(self):
        if self.attn_mode not in ATTN_MODES:
            raise ConfigError(f"attn_mode must be one of {ATTN_MODES}, got {self.attn_mode!r}")
        if self.pool_kernel not in POOL_KERNELS:
            raise ConfigError(f"pool_kernel must be one of {POOL_KERNELS}, got {self.pool_kernel!r}")


# rows of the simplification ladder; "f" is the final model
LADDER_ROWS = {
    "b": Ladder("kv_pool", "overlap3", stride1_pools=True, q_attn_residual=True),
    "c": Ladder("kv_pool", "overlap3", stride1_pools=False, q_attn_residual=True),
    "d": Ladder("kv_pool", "equal_stride", stride1_pools=False, q_attn_residual=True),
    "e": Ladder("kv_pool", "equal_stride", stride1_pools=False, q_attn_residual=False),
    "f": Ladder("mu_attn", "equal_stride", stride1_pools=False, q_attn_residual=False),
}


@dataclass(frozen=True)
class HieraConfig:
    channels: tuple[int, ...]
    blocks: tuple[int, ...]
    heads: tuple[int, ...]
    mlp_ratio: float = 4.0
    drop_path_max: float = 0.0
    ladder: Ladder = field(default_factory=Ladder)
    pretrain_mode: bool = False
    num_classes: int = 1000
    input_size: tuple[int, int] = (224, 224)
    num_frames: int = 1
    video: bool = False
    name: str = "custom"
    # recorded because the exact choices are not pinned down upstream
    gelu: str = "tanh"
    ln_eps: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        object.__setattr__(self, "heads", tuple(int(h) for h in self.heads))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        self.validate()

    def validate(self) -> None:
        if not (len(self.channels) == len(self.blocks) == len(self.heads) == 4):
            raise ConfigError("channels, blocks and heads need exactly 4 entries")
        if self.blocks[0] < 1:
            raise ConfigError("stage 1 needs at least one block")
        active = self.num_active_stages
        if any(b < 0 for b in self.blocks) or any(b for b in self.blocks[active:]):
            raise ConfigError(f"blocks {self.blocks}: empty stages may only trail")
        for s, (c, h) in enumerate(zip(self.channels, self.heads)):
            if c < 1 or h < 1:
                raise ConfigError(f"stage {s + 1}: channels and heads must be positive")
            if c % h:
                raise ConfigError(f"stage {s + 1}: channels {c} not divisible by heads {h}")
        if not 0.0 <= self.drop_path_max <= 1.0:
            raise ConfigError(f"drop_path_max {self.drop_path_max} outside [0, 1]")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        if self.video and self.num_frames < 2:
            raise ConfigError("video configs need num_frames >= 2")
        if not self.video and self.num_frames != 1:
            raise ConfigError("image configs must have num_frames = 1")

    @property
    def num_active_stages(self) -> int:
        n = 0
        for b in self.blocks:
            if b == 0:
                break
            n += 1
        return n

    @property
    def depth(self) -> int:
        return sum(self.blocks)

    @property
    def frame_patch(self) -> int:
        return 2 if self.video else 1

    def stage_unit_tokens(self) -> list[tuple[int, int]]:
        units = list(STAGE_UNIT_TOKENS)
        if self.pretrain_mode:
            # no Q pooling into the last stage while pretraining
            units[3] = units[2]
        return units[: self.num_active_stages]

    def with_ladder(self, **toggles) -> HieraConfig:
        return replace(self, ladder=replace(self.ladder, **toggles))

    def to_mapping(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "ladder":
                for k, v in asdict(value).items():
                    out[f"ladder.{k}"] = _fmt(v)
            else:
                out[f.name] = _fmt(value)
        return out

    def fingerprint(self) -> str:
        text = "\n".join(f"{k}={v}" for k, v in sorted(self.to_mapping().items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


VARIANTS: dict[str, dict[str, Any]] = {
    "T": dict(channels=(96, 192, 384, 768), blocks=(1, 2, 7, 2), heads=(1, 2, 4, 8)),
    "S": dict(channels=(96, 192, 384, 768), blocks=(1, 2, 11, 2), heads=(1, 2, 4, 8)),
    "B": dict(channels=(96, 192, 384, 768), blocks=(2, 3, 16, 3), heads=(1, 2, 4, 8)),
    "B+": dict(channels=(112, 224, 448, 896), blocks=(2, 3, 16, 3), heads=(2, 4, 8, 16)),
    "L": dict(channels=(144, 288, 576, 1152), blocks=(2, 6, 36, 4), heads=(2, 4, 8, 16)),
    "H": dict(channels=(256, 512, 1024, 2048), blocks=(2, 6, 36, 4), heads=(4, 8, 16, 32)),
}


def variant(name: str, **overrides) -> HieraConfig:
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")
    return HieraConfig(**VARIANTS[name], name=f"Hiera-{name}", **overrides)


def tiny(**overrides) -> HieraConfig:
    """Desk-scale config used by tests and smoke runs: width 8, one block per stage."""
    base = dict(
        channels=(8, 16, 32, 64),
        blocks=(1, 1, 1, 1),
        heads=(1, 2, 4, 8),
        num_classes=4,
        input_size=(64, 32),
        name="tiny",
    )
    base.update(overrides)
    return HieraConfig(**base)


@dataclass(frozen=True)
class DecoderConfig:
    depth: int = 8
    width: int = 512
    heads: int = 16
    target_kind: str = "pixel_norm"
    mask_ratio: float = 0.6
    multi_scale: bool = True

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("decoder depth must be >= 1")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio {self.mask_ratio} outside (0, 1)")
        if self.target_kind not in TARGET_KINDS:
            raise ConfigError(f"target_kind must be one of {TARGET_KINDS}")
        if self.width % self.heads:
            raise ConfigError(f"decoder width {self.width} not divisible by heads {self.heads}")

    @classmethod
    def for_video(cls, **overrides) -> DecoderConfig:
        return cls(**{"heads": 8, "mask_ratio": 0.9, **overrides})


# -- block plan ---------------------------------------------------------------

PoolSpec = tuple[int, int, int]  # kernel, stride, padding


@dataclass(frozen=True)
class BlockPlan:
    index: int
    stage: int  # 0-based stage this block's output belongs to
    dim_in: int
    dim_out: int
    heads: int
    unit_in: tuple[int, int]
    unit_out: tuple[int, int]
    attn_kind: str  # "mask_unit", "global" or "kv_pool"
    q_pool: PoolSpec | None
    kv_pool: PoolSpec | None
    q_attn_residual: bool
    drop_path: float

    @property
    def is_transition(self) -> bool:
        return self.dim_in != self.dim_out or self.unit_in != self.unit_out


def _downsample(ladder: Ladder) -> PoolSpec:
    return (2, 2, 0) if ladder.pool_kernel == "equal_stride" else (3, 2, 1)


def _stride1(ladder: Ladder) -> PoolSpec | None:
    if not ladder.stride1_pools or ladder.pool_kernel == "equal_stride":
        return None  # kernel 1, stride 1 is the identity
    return (3, 1, 1)


def plan_blocks(config: HieraConfig) -> list[BlockPlan]:
    """Per-block structure shared by the model builder and the cost model.

    The first block of a stage performs the transition. Its attention keeps
    the previous stage's window (K and V are still at the finer resolution)
    while Q and the skip path are projected and pooled.
    """
    units = config.stage_unit_tokens()
    total = config.depth
    rates = [config.drop_path_max * i / (total - 1) if total > 1 else 0.0 for i in range(total)]
    ladder = config.ladder
    plan = []
    i = 0
    for s in range(config.num_active_stages):
        for j in range(config.blocks[s]):
            transition = s > 0 and j == 0
            attn_stage = s - 1 if transition else s
            unit_in, unit_out = units[attn_stage], units[s]
            if attn_stage < 2:
                kind = "mask_unit" if ladder.attn_mode == "mu_attn" else "kv_pool"
            else:
                kind = "global"
            q_pool = _downsample(ladder) if unit_in != unit_out else _stride1(ladder)
            kv_pool = _downsample(ladder) if kind == "kv_pool" else _stride1(ladder)
            plan.append(
                BlockPlan(
                    index=i,
                    stage=s,
                    dim_in=config.channels[attn_stage] if transition else config.channels[s],
                    dim_out=config.channels[s],
                    heads=config.heads[s],
                    unit_in=unit_in,
                    unit_out=unit_out,
                    attn_kind=kind,
                    q_pool=q_pool,
                    kv_pool=kv_pool,
                    q_attn_residual=ladder.q_attn_residual,
                    drop_path=rates[i],
                )
            )
            i += 1
    return plan


def pooled_extent(n: int, pool: PoolSpec | None) -> int:
    if pool is None:
        return n
    k, s, p = pool
    return (n + 2 * p - k) // s + 1


# -- key/value files ----------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    return str(value)


def _parse_bool(key: str, text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def _parse_ints(key: str, text: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in text.replace("x", ",").split(",") if p.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: expected integers, got {text!r}") from exc


def parse_kv(text: str, source: str = "<string>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_kv(path: str | Path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_kv(path.read_text(encoding="utf-8"), str(path))


_MODEL_KEYS = {f.name for f in fields(HieraConfig)} - {"ladder"}
_LADDER_KEYS = {f.name for f in fields(Ladder)}
_DECODER_KEYS = {f.name for f in fields(DecoderConfig)}


def parse_ladder_overrides(items: list[str]) -> dict[str, Any]:
    """``["attn_mode=kv_pool,pool_kernel=overlap3"]`` -> toggle dict."""
    out: dict[str, Any] = {}
    for item in items:
        for part in item.split(","):
            if not part.strip():
                continue
            if "=" not in part:
                raise ConfigError(f"ladder override {part!r} is not KEY=VAL")
            key, value = (s.strip() for s in part.split("=", 1))
            if key == "row":
                if value not in LADDER_ROWS:
                    raise ConfigError(f"ladder row must be one of {', '.join(LADDER_ROWS)}")
                out.update(asdict(LADDER_ROWS[value]))
                continue
            if key not in _LADDER_KEYS:
                raise ConfigError(
                    f"unknown ladder key {key!r}; valid keys: {', '.join(sorted(_LADDER_KEYS))}, row"
                )
            out[key] = _parse_bool(key, value) if key in ("stride1_pools", "q_attn_residual") else value
    return out


def model_config_from_mapping(kv: Mapping[str, str], **overrides) -> HieraConfig:
    unknown = [
        k for k in kv
        if k != "variant"
        and not k.startswith(("ladder.", "decoder.", "train."))
        and k not in _MODEL_KEYS
    ]
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    args: dict[str, Any] = {}
    if "variant" in kv:
        name = kv["variant"]
        if name not in VARIANTS:
            raise ConfigError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")
        args.update(VARIANTS[name], name=f"Hiera-{name}")
    for key, text in kv.items():
        if key in ("channels", "blocks", "heads", "input_size"):
            args[key] = _parse_ints(key, text)
        elif key in ("mlp_ratio", "drop_path_max", "ln_eps"):
            args[key] = float(text)
        elif key in ("num_classes", "num_frames"):
            args[key] = int(text)
        elif key in ("pretrain_mode", "video"):
            args[key] = _parse_bool(key, text)
        elif key in ("name", "gelu"):
            args[key] = text
    ladder = {}
    for key, text in kv.items():
        if key.startswith("ladder."):
            ladder.update(parse_ladder_overrides([f"{key[7:]}={text}"]))
    args.update(overrides)
    if ladder:
        args["ladder"] = Ladder(**{**asdict(args.get("ladder", Ladder())), **ladder})
    for required in ("channels", "blocks", "heads"):
        if required not in args:
            raise ConfigError(f"config needs 'variant' or explicit '{required}'")
    return HieraConfig(**args)


def decoder_config_from_mapping(kv: Mapping[str, str], video: bool = False) -> DecoderConfig:
    args: dict[str, Any] = {}
    for key, text in kv.items():
        if not key.startswith("decoder."):
            continue
        name = key[8:]
        if name not in _DECODER_KEYS:
            raise ConfigError(f"unknown decoder key {key!r}")
        if name in ("depth", "width", "heads"):
            args[name] = int(text)
        elif name == "mask_ratio":
            args[name] = float(text)
        elif name == "multi_scale":
            args[name] = _parse_bool(key, text)
        else:
            args[name] = text
    return DecoderConfig.for_video(**args) if video else DecoderConfig(**args)
