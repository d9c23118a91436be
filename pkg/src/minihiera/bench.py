"""Forward-only throughput timing: warmups, then the median of timed repetitions."""

from __future__ import annotations

import os
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from .config import HieraConfig
from .layout import build_layout, keep_count, sample_mask
from .model import HieraClassifier, HieraEncoder
from .tensor import no_grad


class BenchError(RuntimeError):
    def __init__(self, kind: str, message: str, **details):
        super().__init__(message)
        self.kind = kind
        self.details = details

    def to_mapping(self) -> dict:
        return {"error": self.kind, "message": str(self), **self.details}


@dataclass
class BenchResult:
    config_id: str
    mode: str
    batch: int
    throughput: float  # items / second from the median repetition
    times: list[float]
    warmups: int
    stage1_tokens: int  # tokens entering stage 1 per item
    dense_stage1_tokens: int
    environment: dict = field(default_factory=dict)

    @property
    def median(self) -> float:
        return statistics.median(self.times)

    def to_mapping(self) -> dict:
        out = asdict(self)
        out["median_seconds"] = self.median
        out["min_seconds"] = min(self.times)
        out["max_seconds"] = max(self.times)
        return out


def environment(threads: int) -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "cpu_count": os.cpu_count(),
        "blas_threads": threads,
    }


def bench_throughput(config: HieraConfig, mode: str = "dense", ratio: float = 0.6, batch: int = 8,
                     reps: int = 5, warmups: int = 2, seed: int = 0, threads: int = 1) -> BenchResult:
    """Time ``reps`` forward passes after ``warmups`` untimed ones.

    ``mode`` is "dense" (full classifier forward) or "sparse" (encoder on the
    kept units only, ``ratio`` of units deleted).
    """
    if reps < 5 or warmups < 2:
        raise ValueError("need at least 5 timed repetitions and 2 warmups")
    if mode not in ("dense", "sparse"):
        raise ValueError(f"mode must be 'dense' or 'sparse', got {mode!r}")
    extents = (config.num_frames, *config.input_size) if config.video else config.input_size
    layout = build_layout(extents, config)
    dense_tokens = layout.total_units * layout.tokens_per_unit(0)
    rng = np.random.default_rng(seed)
    try:
        pixels = rng.random((batch, *_pixel_shape(config)), dtype=np.float32)
        if mode == "dense":
            model = HieraClassifier(config, seed)
            run = lambda: model(pixels)  # noqa: E731
            tokens = dense_tokens
        else:
            model = HieraEncoder(replace(config, pretrain_mode=True), seed)
            masks = [sample_mask(layout, ratio, seed + i) for i in range(batch)]
            run = lambda: model(pixels, masks)  # noqa: E731
            tokens = keep_count(layout.total_units, ratio) * layout.tokens_per_unit(0)
        times = []
        with threadpool_limits(limits=threads), no_grad():
            for _ in range(warmups):
                run()
            for _ in range(reps):
                t0 = time.perf_counter()
                run()
                times.append(time.perf_counter() - t0)
    except MemoryError as exc:
        raise BenchError("out_of_memory", f"out of memory at batch {batch}; try --batch {max(batch // 2, 1)}",
                         batch=batch, suggested_batch=max(batch // 2, 1)) from exc
    tag = mode if mode == "dense" else f"sparse({ratio:g})"
    return BenchResult(
        config_id=f"{config.name}:{config.fingerprint()}:{tag}",
        mode=tag,
        batch=batch,
        throughput=batch / statistics.median(times),
        times=times,
        warmups=warmups,
        stage1_tokens=tokens,
        dense_stage1_tokens=dense_tokens,
        environment=environment(threads),
    )


def _pixel_shape(config: HieraConfig) -> tuple[int, ...]:
    if config.video:
        return (config.num_frames, *config.input_size, 3)
    return (*config.input_size, 3)
