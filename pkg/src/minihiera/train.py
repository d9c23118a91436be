"""Training loops: MAE pretraining, supervised finetuning, from-scratch training."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt_io
from .config import HieraConfig
from .data import iterate_batches
from .layout import sample_mask
from .mae import MaskedAutoencoder
from .model import HieraClassifier
from .nn import Module
from .optim import NonFiniteGradientError, OptimConfig, Schedule, TrainState, adamw_step
from .tensor import NonFiniteError, Tensor, cross_entropy, no_grad

log = logging.getLogger(__name__)


class TrainingHalted(RuntimeError):
    """Raised when a step produces a non-finite loss or gradient.

    Parameters in ``state`` are those from before the failing step; the most
    recent epoch checkpoint (if any) is at ``checkpoint``.
    """

    def __init__(self, message: str, state: TrainState, trace: list[tuple[int, float]],
                 checkpoint: Path | None):
        super().__init__(message)
        self.state = state
        self.trace = trace
        self.checkpoint = checkpoint


@dataclass
class TraceWriter:
    """Append ``step,value`` rows to a CSV file as they arrive."""
    path: Path | None
    header: str = "value"
    rows: list[tuple[int, float]] = field(default_factory=list)

    def __post_init__(self):
        if self.path is not None:
            self.path = Path(self.path)
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(["step", self.header])

    def add(self, step: int, value: float) -> None:
        self.rows.append((step, value))
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([step, repr(value)])


def make_schedule(optim: OptimConfig, steps_per_epoch: int, epochs: int,
                  batch_size: int | None = None, ref_batch: int = 256) -> Schedule:
    """Warmup and horizon in steps; ``lr`` is scaled by batch/256 when a batch size is given."""
    base = optim.lr * (batch_size / ref_batch if batch_size else 1.0)
    warmup = min(int(round(optim.warmup_epochs * steps_per_epoch)), max(steps_per_epoch * epochs - 1, 0))
    return Schedule(base, warmup, steps_per_epoch * epochs)


def grads_of(model: Module) -> dict[str, np.ndarray | None]:
    return {name: p.grad for name, p in model.named_parameters()}


def _first_epoch(state: TrainState, n: int, batch_size: int) -> int:
    return state.step // max(math.ceil(n / batch_size), 1)


def _checkpoint(out_dir: Path | None, state: TrainState, config_hash: str, meta: dict[str, str]) -> Path | None:
    if out_dir is None:
        return None
    out_dir.mkdir(parents=True, exist_ok=True)
    return ckpt_io.save_state(out_dir / "last.ckpt", state, config_hash, meta)


def pretrain_loop(data: np.ndarray, model: MaskedAutoencoder, state: TrainState, epochs: int,
                  batch_size: int = 8, out_dir: str | Path | None = None,
                  trace_path: str | Path | None = None, fixed_masks: bool = False,
                  stop_when: Callable[[int, float], bool] | None = None) -> tuple[TrainState, list[tuple[int, float]]]:
    """MAE pretraining: sample masks, sparse forward, decode, masked loss, AdamW.

    Returns the updated state and the per-step loss trace. Checkpoints
    ``out_dir/last.ckpt`` after every epoch. ``epochs`` is the total count, so
    a state restored from a checkpoint resumes at the epoch its step implies.
    ``stop_when(step, loss)`` returning True ends training early (after
    checkpointing).
    """
    if not model.config.pretrain_mode:
        raise ValueError("pretrain_loop needs a pretrain_mode config")
    out = Path(out_dir) if out_dir is not None else None
    trace = TraceWriter(trace_path, "loss")
    meta = {f"config.{k}": v for k, v in model.config.to_mapping().items()}
    meta.update({f"decoder.{k}": str(v) for k, v in vars(model.dec).items()})
    config_hash = model.config.fingerprint()
    last_good = None
    ratio = model.dec.mask_ratio
    model.train()
    for epoch in range(_first_epoch(state, len(data), batch_size), epochs):
        for batch in iterate_batches(data, None, batch_size, state.seed, epoch, fixed_masks=fixed_masks):
            masks = [sample_mask(model.layout, ratio, int(s)) for s in batch.mask_seeds]
            step = state.step
            rng = np.random.default_rng([state.seed, step])
            try:
                model.zero_grad()
                loss, _, _ = model.loss(batch.pixels, masks, training=True, rng=rng)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NonFiniteError(f"loss is {value}")
                loss.backward()
                adamw_step(state, grads_of(model))
            except (NonFiniteError, NonFiniteGradientError) as exc:
                msg = f"pretraining halted at step {state.step} (epoch {epoch}): {exc}"
                log.error(msg)
                raise TrainingHalted(msg, state, trace.rows, last_good) from exc
            trace.add(step, value)
            if stop_when is not None and stop_when(step, value):
                _checkpoint(out, state, config_hash, meta)
                return state, trace.rows
        last_good = _checkpoint(out, state, config_hash, meta) or last_good
    return state, trace.rows


def classification_loss(model: HieraClassifier, pixels: np.ndarray, labels: np.ndarray,
                        label_smoothing: float, training: bool, rng) -> tuple[Tensor, np.ndarray]:
    logits = model(pixels, training=training, rng=rng)
    return cross_entropy(logits, labels, label_smoothing), logits.data


def evaluate(model: HieraClassifier, pixels: np.ndarray, labels: np.ndarray, batch_size: int = 32) -> float:
    """Top-1 accuracy of a dense eval-mode forward."""
    correct = 0
    with no_grad():
        for start in range(0, len(pixels), batch_size):
            logits = model(pixels[start : start + batch_size], training=False)
            correct += int((logits.data.argmax(-1) == labels[start : start + batch_size]).sum())
    return correct / max(len(pixels), 1)


def finetune_loop(data: np.ndarray, labels: np.ndarray, model: HieraClassifier, state: TrainState,
                  epochs: int, batch_size: int = 8, label_smoothing: float = 0.1,
                  out_dir: str | Path | None = None, trace_path: str | Path | None = None,
                  eval_data: tuple[np.ndarray, np.ndarray] | None = None) -> tuple[TrainState, list[tuple[int, float]]]:
    """Supervised training; the trace holds one accuracy per epoch.

    Accuracy is measured on ``eval_data`` when given, else on the training set.
    As in ``pretrain_loop``, ``epochs`` is a total and restored states resume.
    """
    if model.config.pretrain_mode:
        raise ValueError("finetuning runs the dense model; pretrain_mode must be off")
    out = Path(out_dir) if out_dir is not None else None
    trace = TraceWriter(trace_path, "accuracy")
    meta = {f"config.{k}": v for k, v in model.config.to_mapping().items()}
    config_hash = model.config.fingerprint()
    last_good = None
    for epoch in range(_first_epoch(state, len(data), batch_size), epochs):
        model.train()
        for batch in iterate_batches(data, labels, batch_size, state.seed, epoch):
            rng = np.random.default_rng([state.seed, state.step])
            try:
                model.zero_grad()
                loss, _ = classification_loss(model, batch.pixels, batch.labels, label_smoothing, True, rng)
                loss.backward()
                adamw_step(state, grads_of(model))
            except (NonFiniteError, NonFiniteGradientError) as exc:
                msg = f"training halted at step {state.step} (epoch {epoch}): {exc}"
                log.error(msg)
                raise TrainingHalted(msg, state, trace.rows, last_good) from exc
        model.eval()
        ex, ey = eval_data if eval_data is not None else (data, labels)
        acc = evaluate(model, ex, ey, batch_size)
        trace.add(epoch + 1, acc)
        log.info("epoch %d accuracy %.4f", epoch + 1, acc)
        last_good = _checkpoint(out, state, config_hash, meta) or last_good
    return state, trace.rows


@dataclass
class LoadReport:
    loaded: list[str]
    dropped: list[str]
    fresh: list[str]


def load_pretrained(model: HieraClassifier, ckpt: ckpt_io.Checkpoint | str | Path) -> LoadReport:
    """Copy ``encoder.*`` weights from a pretraining checkpoint.

    Decoder weights are reported as dropped; the head stays freshly
    initialised. Any encoder name or shape mismatch is an error that lists
    the offending parameters.
    """
    if not isinstance(ckpt, ckpt_io.Checkpoint):
        ckpt = ckpt_io.load(ckpt)
    source = ckpt.section("param.")
    own = dict(model.named_parameters())
    enc_src = {n for n in source if n.startswith("encoder.")}
    enc_own = {n for n in own if n.startswith("encoder.")}
    missing = sorted(enc_own - enc_src)
    unexpected = sorted(enc_src - enc_own)
    shape = sorted(n for n in enc_own & enc_src if own[n].shape != source[n].shape)
    if missing or unexpected or shape:
        raise ckpt_io.CheckpointError(
            "pretrained encoder does not match the model: "
            + "; ".join(f"{k}: {', '.join(v)}" for k, v in
                        (("missing", missing), ("unexpected", unexpected), ("shape", shape)) if v)
        )
    for name in sorted(enc_own):
        np.copyto(own[name].data, source[name])
    return LoadReport(sorted(enc_own), sorted(set(source) - enc_src), sorted(set(own) - enc_own))


def supervised_from_scratch(data: np.ndarray, labels: np.ndarray, config: HieraConfig, epochs: int,
                            optim: OptimConfig | None = None, batch_size: int = 8, seed: int = 0,
                            **loop_kw) -> tuple[TrainState, list[tuple[int, float]], HieraClassifier]:
    """Same loop as finetuning, starting from random weights."""
    model = HieraClassifier(config, seed)
    optim = optim or OptimConfig.finetune(layer_decay=1.0)
    steps = math.ceil(len(data) / batch_size)
    state = TrainState.create(model, optim, make_schedule(optim, steps, epochs), seed)
    state, trace = finetune_loop(data, labels, model, state, epochs, batch_size, **loop_kw)
    return state, trace, model
