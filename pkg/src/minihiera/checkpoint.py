"""Checkpoint files: a text manifest followed by raw little-endian float32 blocks.

Layout::

    minihiera-checkpoint 1
    config_hash <hex>
    step <int>
    seed <int>
    meta <key> <value>          (zero or more)
    tensor <name> <d0,d1,...>   (in block order; "-" for scalars)
    end
    <float32 blocks, concatenated>
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .optim import OptimConfig, Schedule, TrainState

MAGIC = "minihiera-checkpoint 1"
_LE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_hash: str
    step: int
    seed: int
    tensors: dict[str, np.ndarray]
    meta: dict[str, str] = field(default_factory=dict)

    def section(self, prefix: str) -> dict[str, np.ndarray]:
        n = len(prefix)
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def save(path: str | Path, ckpt: Checkpoint) -> Path:
    """Write atomically: a crash mid-write leaves the previous file intact."""
    path = Path(path)
    lines = [MAGIC, f"config_hash {ckpt.config_hash}", f"step {ckpt.step}", f"seed {ckpt.seed}"]
    for key, value in ckpt.meta.items():
        if any(ch.isspace() for ch in key) or "\n" in str(value):
            raise CheckpointError(f"meta entry {key!r} cannot contain whitespace/newlines")
        lines.append(f"meta {key} {value}")
    for name, arr in ckpt.tensors.items():
        if any(ch.isspace() for ch in name):
            raise CheckpointError(f"tensor name {name!r} contains whitespace")
        shape = ",".join(str(d) for d in np.shape(arr)) or "-"
        lines.append(f"tensor {name} {shape}")
    lines.append("end")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for arr in ckpt.tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype=_LE).tobytes())
    os.replace(tmp, path)
    return path


def load(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    header_end = raw.find(b"\nend\n")
    if not raw.startswith(MAGIC.encode()) or header_end < 0:
        raise CheckpointError(f"{path}: not a minihiera checkpoint")
    header = raw[:header_end].decode("utf-8").splitlines()
    offset = header_end + len(b"\nend\n")
    fields_: dict[str, str] = {}
    meta: dict[str, str] = {}
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for line in header[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "tensor":
            name, dims = rest.split(" ")
            shapes.append((name, () if dims == "-" else tuple(int(d) for d in dims.split(","))))
        elif kind == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = value
        else:
            fields_[kind] = rest
    tensors = {}
    for name, shape in shapes:
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 4 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated at tensor {name}")
        tensors[name] = np.frombuffer(raw, _LE, count, offset).astype(np.float32).reshape(shape)
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return Checkpoint(fields_["config_hash"], int(fields_["step"]), int(fields_["seed"]), tensors, meta)


# -- TrainState <-> Checkpoint ----------------------------------------------------

_OPT_KEYS = ("lr", "beta1", "beta2", "eps", "weight_decay", "warmup_epochs", "layer_decay")


def from_state(state: TrainState, config_hash: str, extra_meta: dict[str, str] | None = None) -> Checkpoint:
    tensors: dict[str, np.ndarray] = {}
    for name, p in state.params.items():
        tensors[f"param.{name}"] = p
    for name in state.params:
        tensors[f"exp_avg.{name}"] = state.exp_avg[name]
        tensors[f"exp_avg_sq.{name}"] = state.exp_avg_sq[name]
    meta = {
        "base_lr": repr(state.schedule.base_lr),
        "warmup_steps": str(state.schedule.warmup_steps),
        "total_steps": str(state.schedule.total_steps),
        "clip_grad": repr(state.optim.clip_grad),
    }
    meta.update({f"optim.{k}": repr(getattr(state.optim, k)) for k in _OPT_KEYS})
    meta.update({f"lr_scale.{n}": repr(s) for n, s in state.lr_scales.items()})
    meta.update(extra_meta or {})
    return Checkpoint(config_hash, state.step, state.seed, tensors, meta)


def save_state(path: str | Path, state: TrainState, config_hash: str,
               extra_meta: dict[str, str] | None = None) -> Path:
    return save(path, from_state(state, config_hash, extra_meta))


def restore_state(state: TrainState, ckpt: Checkpoint) -> TrainState:
    """Copy parameters, moments, step and hyper-parameters into ``state`` in place."""
    params = ckpt.section("param.")
    own = set(state.params)
    missing = sorted(own - set(params))
    unexpected = sorted(set(params) - own)
    shape = sorted(n for n in own & set(params) if params[n].shape != state.params[n].shape)
    if missing or unexpected or shape:
        raise CheckpointError(
            f"checkpoint does not match model; missing={missing} unexpected={unexpected} shape={shape}"
        )
    m1, m2 = ckpt.section("exp_avg."), ckpt.section("exp_avg_sq.")
    for name in state.params:
        np.copyto(state.params[name], params[name])
        np.copyto(state.exp_avg[name], m1[name])
        np.copyto(state.exp_avg_sq[name], m2[name])
    meta = ckpt.meta
    state.step = ckpt.step
    state.seed = ckpt.seed
    state.schedule = Schedule(float(meta["base_lr"]), int(meta["warmup_steps"]), int(meta["total_steps"]))
    clip = meta.get("clip_grad", "None")
    state.optim = OptimConfig(**{k: float(meta[f"optim.{k}"]) for k in _OPT_KEYS},
                              clip_grad=None if clip == "None" else float(clip))
    state.lr_scales = {n: float(meta[f"lr_scale.{n}"]) for n in state.params if f"lr_scale.{n}" in meta}
    return state
