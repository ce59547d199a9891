"""Single-thread latency protocol, backend comparison and linear-scaling sweep."""
from __future__ import annotations

import csv
import json
import os
import platform
import socket
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import engine as E
from . import kernels
from .detector import Detector, PyramidConfig, decode, nms
from .liquid import Backend, BackendKind

COLUMNS = ["backend", "T", "C", "median_ms", "mean_ms", "p95_ms", "flops", "params", "speedup_vs_parallel"]


class BenchConfigError(ValueError):
    pass


@dataclass
class BenchSpec:
    sequence_lengths: list = field(default_factory=lambda: [2304])
    channels: int = 64
    levels: int = 6
    backends: list = field(default_factory=lambda: ["parallel", "cfc_sequential", "ode_euler"])
    substeps: int = 16
    warmup_iters: int = 10
    measured_iters: int = 30
    thread_count: int = 1
    include_heads: bool = False
    include_nms: bool = False
    protocol: bool = True
    seed: int = 0

    def __post_init__(self):
        self.sequence_lengths = [int(t) for t in self.sequence_lengths]
        self.backends = [BackendKind(b).value for b in self.backends]

    def validate(self):
        if self.measured_iters < 5:
            raise BenchConfigError("measured_iters must be at least 5")
        if self.warmup_iters < 0:
            raise BenchConfigError("warmup_iters must be non-negative")
        if self.protocol and self.thread_count != 1:
            raise BenchConfigError("protocol runs are single-threaded (thread_count=1)")
        if self.protocol and self.include_nms:
            raise BenchConfigError("protocol runs exclude NMS")
        if not self.sequence_lengths or min(self.sequence_lengths) < 1:
            raise BenchConfigError("sequence_lengths must be positive")


@dataclass
class BenchReport:
    rows: list
    environment: dict
    unreliable: bool = False

    def row(self, backend, T):
        for r in self.rows:
            if r["backend"] == backend and r["T"] == T:
                return r
        raise KeyError((backend, T))

    def to_dict(self):
        return {"rows": self.rows, "environment": self.environment, "unreliable": self.unreliable}

    def write(self, out_dir, stem="bench"):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, f"{stem}.json"), "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        with open(os.path.join(out_dir, f"{stem}.csv"), "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=COLUMNS, extrasaction="ignore")
            w.writeheader()
            w.writerows(self.rows)


def timer_resolution_ns():
    info = time.get_clock_info("perf_counter")
    return info.resolution * 1e9


def environment(spec: BenchSpec):
    return {
        "host": socket.gethostname(),
        "platform": platform.platform(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "kernels": kernels.backend_name(),
        "precision": np.dtype(E.default_dtype()).name,
        "thread_count": spec.thread_count,
        "cpu_count": os.cpu_count(),
        "timer_resolution_ns": timer_resolution_ns(),
    }


def _thread_limit(n):
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def time_call(fn, warmup, iters):
    """Latencies in ms of ``iters`` calls after ``warmup`` untimed calls."""
    for _ in range(warmup):
        fn()
    out = np.empty(iters)
    for i in range(iters):
        t0 = time.perf_counter_ns()
        fn()
        out[i] = (time.perf_counter_ns() - t0) / 1e6
    return out


def _model_config(spec: BenchSpec, backend):
    return PyramidConfig(levels=spec.levels, embed_dim=spec.channels, input_dim=spec.channels,
                         backend=backend, substeps=spec.substeps)


def _forward_fn(model, x, spec: BenchSpec, backend):
    bk = Backend(BackendKind(backend), spec.substeps)
    if not spec.include_heads:
        return lambda: model.backbone(x, bk)
    if spec.include_nms:
        return lambda: nms(decode(model.forward(x, backend=bk), model.cfg.base_dt, num_frames=x.shape[0]))
    return lambda: model.forward(x, backend=bk)


def run_bench(spec: BenchSpec, model: Detector | None = None):
    """Latency of every backend at every T using one set of weights.

    All backends share the weights of ``model`` (built from ``spec`` if not
    given); the backend is switched per call.  Without heads the timed region
    is stem + pyramid on a (T, C) input.
    """
    spec.validate()
    if model is None:
        model = Detector(_model_config(spec, spec.backends[0]), seed=spec.seed)
    C = model.cfg.input_dim
    rows = []
    res_ns = timer_resolution_ns()
    unreliable = False
    with _thread_limit(spec.thread_count):
        for T in spec.sequence_lengths:
            rng = np.random.default_rng([spec.seed, T])
            Tp = model.cfg.padded_length(T) if not spec.include_heads else T
            x = np.zeros((Tp, C), dtype=E.default_dtype())
            x[:T] = rng.normal(size=(T, C))
            xt = E.Tensor(x)
            medians = {}
            for b in spec.backends:
                lat = time_call(_forward_fn(model, xt if not spec.include_heads else x, spec, b),
                                spec.warmup_iters, spec.measured_iters)
                med = float(np.median(lat))
                medians[b] = med
                unreliable |= res_ns > 0.01 * med * 1e6
                rows.append({
                    "backend": b,
                    "T": T,
                    "C": model.cfg.embed_dim,
                    "median_ms": med,
                    "mean_ms": float(lat.mean()),
                    "p95_ms": float(np.percentile(lat, 95)),
                    "flops": int(model.flops(Tp, spec.include_heads, Backend(BackendKind(b), spec.substeps))),
                    "params": model.n_params(),
                })
            base = medians.get("parallel")
            for r in rows[-len(spec.backends):]:
                r["speedup_vs_parallel"] = r["median_ms"] / base if base else float("nan")
    return BenchReport(rows, environment(spec), unreliable)


def loglog_slope(T, latency):
    """Least-squares slope of log(latency) against log(T)."""
    return float(np.polyfit(np.log(np.asarray(T, float)), np.log(np.asarray(latency, float)), 1)[0])


@dataclass
class ScalingResult:
    backend: str
    T: list
    latency_ms: list
    flops: list
    slope: float
    environment: dict

    def write(self, out_dir, stem="scaling"):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, f"{stem}.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["T", "latency_ms", "flops"])
            w.writerows(zip(self.T, self.latency_ms, self.flops))
        with open(os.path.join(out_dir, f"{stem}.json"), "w") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)


def scaling_sweep(model: Detector | None, T_list, spec: BenchSpec | None = None, backend="parallel"):
    """One protocol run per T (ascending) and the log-log latency slope."""
    T_list = [int(t) for t in T_list]
    if T_list != sorted(T_list):
        raise BenchConfigError("T list must be ascending")
    spec = spec or BenchSpec()
    spec = BenchSpec(**{**asdict(spec), "sequence_lengths": T_list, "backends": [backend]})
    rep = run_bench(spec, model)
    lat = [r["median_ms"] for r in rep.rows]
    return ScalingResult(backend, T_list, lat, [r["flops"] for r in rep.rows],
                         loglog_slope(T_list, lat), rep.environment)
