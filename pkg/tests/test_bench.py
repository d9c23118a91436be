import json

import numpy as np
import pytest

import minihiera.bench as bench_mod
from minihiera.bench import BenchError, bench_throughput
from minihiera.config import tiny
from minihiera.layout import sample_mask
from minihiera.model import HieraEncoder


def test_sparse_token_accounting_19_of_49():
    cfg = tiny(input_size=(224, 224))
    res = bench_throughput(cfg, "sparse", 0.6, batch=1, reps=5, warmups=2)
    assert res.dense_stage1_tokens == 49 * 64
    assert res.stage1_tokens == 19 * 64
    # the encoder really runs stage 1 on that many tokens
    enc = HieraEncoder(tiny(input_size=(224, 224), pretrain_mode=True), 0)
    x = np.random.default_rng(0).random((1, 224, 224, 3), dtype=np.float32)
    feats = enc(x, [sample_mask(enc.layout, 0.6, 0)])
    first = feats.features[0]
    assert np.prod(first.shape[1:-1]) == res.stage1_tokens


def test_result_protocol_fields():
    res = bench_throughput(tiny(), "dense", batch=2, reps=5, warmups=2)
    assert len(res.times) == 5 and res.warmups == 2
    assert res.throughput == pytest.approx(2 / res.median)
    mapping = res.to_mapping()
    json.dumps(mapping)
    assert mapping["environment"]["blas_threads"] == 1
    assert res.mode == "dense" and res.config_id.startswith("tiny:")


def test_protocol_minimums_enforced():
    with pytest.raises(ValueError):
        bench_throughput(tiny(), reps=4)
    with pytest.raises(ValueError):
        bench_throughput(tiny(), warmups=1)
    with pytest.raises(ValueError):
        bench_throughput(tiny(), mode="half")


def test_two_runs_within_15_percent():
    cfg = tiny(input_size=(64, 64))
    a = bench_throughput(cfg, "dense", batch=8, reps=9, warmups=3)
    b = bench_throughput(cfg, "dense", batch=8, reps=9, warmups=3)
    assert abs(a.throughput - b.throughput) <= 0.15 * max(a.throughput, b.throughput)


def test_out_of_memory_is_structured(monkeypatch):
    class Boom:
        def __init__(self, *a, **k):
            raise MemoryError

    monkeypatch.setattr(bench_mod, "HieraClassifier", Boom)
    with pytest.raises(BenchError) as info:
        bench_throughput(tiny(), "dense", batch=16)
    err = info.value.to_mapping()
    assert err["error"] == "out_of_memory"
    assert err["suggested_batch"] == 8
    assert "--batch 8" in err["message"]
