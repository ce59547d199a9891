import json

import numpy as np
import pytest

from liquidtad.bench import (
    COLUMNS, BenchConfigError, BenchSpec, loglog_slope, run_bench, scaling_sweep,
)
from liquidtad.detector import Detector, PyramidConfig


def quick(**kw):
    base = dict(sequence_lengths=[64], channels=8, levels=3, warmup_iters=1, measured_iters=5, substeps=4)
    return BenchSpec(**{**base, **kw})


def test_spec_validation():
    for bad in (dict(thread_count=2), dict(include_nms=True), dict(measured_iters=4),
                dict(sequence_lengths=[0]), dict(warmup_iters=-1)):
        with pytest.raises(BenchConfigError):
            quick(**bad).validate()
    quick(thread_count=2, protocol=False).validate()
    with pytest.raises(ValueError):
        BenchSpec(backends=["rk4"])


def test_report_rows_and_files(tmp_path):
    rep = run_bench(quick(sequence_lengths=[32, 64]))
    assert len(rep.rows) == 6
    for r in rep.rows:
        assert set(COLUMNS) <= set(r)
        assert 0 < r["median_ms"] <= r["p95_ms"]
        assert r["C"] == 8 and r["flops"] > 0
    assert rep.row("parallel", 64)["speedup_vs_parallel"] == 1.0
    f32, f64 = rep.row("parallel", 32)["flops"], rep.row("parallel", 64)["flops"]
    assert f64 == 2 * f32
    assert rep.row("ode_euler", 64)["flops"] > rep.row("cfc_sequential", 64)["flops"]
    assert rep.environment["thread_count"] == 1
    rep.write(tmp_path)
    lines = (tmp_path / "bench.csv").read_text().splitlines()
    assert lines[0].split(",") == COLUMNS and len(lines) == 7
    assert len(json.loads((tmp_path / "bench.json").read_text())["rows"]) == 6


def test_shared_weights():
    m = Detector(PyramidConfig(levels=3, embed_dim=8, input_dim=8))
    before = [p.data.copy() for p in m.parameters()]
    run_bench(quick(), m)
    assert all(np.array_equal(a, p.data) for a, p in zip(before, m.parameters()))


def test_loglog_slope():
    T = [10, 20, 40, 80]
    assert loglog_slope(T, [3 * t for t in T]) == pytest.approx(1.0)
    assert loglog_slope(T, [t * t for t in T]) == pytest.approx(2.0)


def test_scaling_sweep(tmp_path):
    res = scaling_sweep(None, [32, 64, 128], quick())
    assert res.T == [32, 64, 128]
    assert res.flops[1] == 2 * res.flops[0] and res.flops[2] == 2 * res.flops[1]
    assert np.isfinite(res.slope)
    res.write(tmp_path)
    assert (tmp_path / "scaling.csv").read_text().startswith("T,latency_ms,flops")
    with pytest.raises(BenchConfigError):
        scaling_sweep(None, [64, 32], quick())
