"""The ten headline acceptance criteria, each at its stated tolerance.

Every test records a one-line verdict that is printed in the terminal
summary, then asserts.
"""
import itertools
import json
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from liquidtad import cli
from liquidtad import engine as E
from liquidtad.bench import BenchSpec, run_bench, scaling_sweep
from liquidtad.detector import ActionSegment, Detector, PyramidConfig, model_flops
from liquidtad.evaluate import THUMOS_THRESHOLDS, evaluate
from liquidtad.gradcheck import GradcheckConfig, run as run_gradcheck
from liquidtad.liquid import DecayParams, DtPolicy, LptbWeights, decay_coefficients, lptb_forward, parallel_relax
from liquidtad.synthetic import SyntheticSpec, generate
from liquidtad.train import TrainConfig, train

from conftest import record
from oracles import brute_force_ap, naive_lptb

pytestmark = pytest.mark.acceptance


# 1 ---------------------------------------------------------------------------


def test_c01_vectorization_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, n = 0.0, 0
    with E.precision("f64"):
        while n < 100:
            T, C, K = int(rng.integers(1, 65)), int(rng.integers(1, 17)), int(rng.choice([1, 3, 5]))
            if K > 2 * T - 1:
                continue
            w = LptbWeights.init(C, rng, kernel_size=K, dropout_rate=0.0,
                                 sharing=str(rng.choice(["block_shared", "per_channel"])),
                                 dt_policy=DtPolicy(4 / 30, bool(rng.integers(2))))
            w.decay.rho.data = w.decay.rho.data + rng.normal(size=w.decay.rho.shape)
            w.ln_gamma.data = 1 + 0.3 * rng.normal(size=C)
            w.ln_beta.data = rng.normal(size=C)
            w.gate_bias.data = rng.normal(size=C)
            level = int(rng.integers(0, 4))
            x = rng.normal(size=(T, C))
            out = lptb_forward(E.Tensor(x), w, level).data
            worst = max(worst, float(np.max(np.abs(out - naive_lptb(x, w, level)))))
            n += 1
    secs = time.perf_counter() - t0
    ok = worst <= 1e-12 and secs < 60
    record(1, ok, f"vectorization oracle: max |diff| {worst:.2e} over {n} cases (<= 1e-12), {secs:.1f}s")
    assert ok


# 2 ---------------------------------------------------------------------------


def test_c02_full_model_gradcheck():
    cfg = GradcheckConfig(T=32, channels=8, step=1e-4, tolerance=1e-4, refine_steps=[])
    t0 = time.perf_counter()
    results, ok = run_gradcheck(cfg)
    secs = time.perf_counter() - t0
    worst = max(v for rep in results.values() for v in rep.values())
    rho_ok = all(any(k.endswith("rho") for k in rep) for rep in results.values())
    groups = sum(len(r) for r in results.values())
    passed = ok and rho_ok and set(results) == {"block_shared", "per_channel"} and secs < 600
    record(2, passed, f"gradcheck: worst rel err {worst:.2e} over {groups} groups in both sharing modes "
                      f"(<= 1e-4), {secs:.0f}s")
    assert passed


# 3 ---------------------------------------------------------------------------


def _alpha(rho, dt, eps=1e-3, align=False, level=0, stride=2):
    d = DecayParams(E.Parameter(np.asarray(rho, dtype=np.float64), "rho"), eps,
                    "per_channel" if np.ndim(rho) else "block_shared", DtPolicy(dt, align), stride)
    lam, a = decay_coefficients(d, level)
    return lam.data, a.data


def test_c03_decay_invariants():
    rng = np.random.default_rng(3)
    N = 10_000
    rho = rng.uniform(-10, 10, N)
    dts = np.exp(rng.uniform(np.log(1e-3), np.log(2.0), N))
    failures = []
    with E.precision("f64"):
        # sampled pairs: one dt per call, rho vectorised over channels
        for dt in np.unique(np.round(dts, 3)):
            lam, a = _alpha(rho, float(dt))
            if not (np.all(lam > 0) and np.all(a > 0) and np.all(a < 1)):
                failures.append(f"range at dt={dt}")
        for r, dt in zip(rho[:2000], dts[:2000]):
            l1, a1 = _alpha(float(r), float(dt))
            if not (l1 > 0 and 0 < a1 < 1):
                failures.append(f"range at ({r}, {dt})")
        # sorted grids
        grid_rho = np.sort(rng.uniform(-10, 10, 200))
        grid_dt = np.sort(np.exp(rng.uniform(np.log(1e-3), np.log(2.0), 200)))
        for dt in grid_dt[::20]:
            _, a = _alpha(grid_rho, float(dt))
            if not np.all(np.diff(a) < 0):
                failures.append(f"not decreasing in rho at dt={dt}")
        for r in grid_rho[::20]:
            a = np.array([_alpha(float(r), float(dt))[1] for dt in grid_dt])
            if not np.all(np.diff(a) < 0):
                failures.append(f"not decreasing in dt at rho={r}")
        # align_dt_pyramid
        worst = 0.0
        for r, dt in zip(rho[:500], dts[:500]):
            for level in range(6):
                lam, a = _alpha(float(r), float(dt), align=True, level=level)
                worst = max(worst, abs(float(a) - float(np.exp(-lam * dt * 2 ** level))))
        if worst > 1e-12:
            failures.append(f"align error {worst:.2e}")
    ok = not failures
    record(3, ok, f"decay invariants over {N} (rho, dt) samples; align max err {worst:.1e}"
                  + ("" if ok else f"; {failures[:3]}"))
    assert ok


# 4 ---------------------------------------------------------------------------


def test_c04_convexity_bound():
    rng = np.random.default_rng(4)
    checked, bad = 0, 0
    with E.precision("f64"):
        for trial in range(400):
            T, C = int(rng.integers(1, 65)), int(rng.integers(1, 17))
            scale = 10.0 ** rng.integers(-3, 4)
            x = rng.normal(size=(T, C)) * scale
            s = rng.normal(size=(T, C)) * scale
            kind = trial % 4
            if kind == 0:
                a = rng.uniform(1e-12, 1 - 1e-12, size=C)
            elif kind == 1:
                a = np.full((), rng.uniform(1e-6, 1 - 1e-6))
            elif kind == 2:
                a = rng.choice([1e-15, 1e-9, 0.5, 1 - 1e-9, 1 - 2 ** -52], size=C)
            else:
                a = rng.uniform(0.01, 0.99, size=C)
                s[::2] = x[::2]        # coincident pairs
            out = parallel_relax(E.Tensor(x), E.Tensor(s), E.Tensor(a)).data
            bad += int(np.sum((out < np.minimum(x, s)) | (out > np.maximum(x, s))))
            checked += out.size
    ok = bad == 0
    record(4, ok, f"convexity bound: {bad} violations in {checked} elements")
    assert ok


# 5, 6 ------------------------------------------------------------------------


def test_c05_backend_efficiency():
    spec = BenchSpec(sequence_lengths=[2304], channels=64, thread_count=1)
    t0 = time.perf_counter()
    rep = run_bench(spec)
    secs = time.perf_counter() - t0
    par = rep.row("parallel", 2304)["median_ms"]
    cfc = rep.row("cfc_sequential", 2304)["speedup_vs_parallel"]
    ode = rep.row("ode_euler", 2304)["speedup_vs_parallel"]
    ok = cfc >= 20 and ode >= 30 and secs < 900
    record(5, ok, f"backend efficiency at T=2304 C=64: parallel {par:.2f} ms, "
                  f"CfcSequential x{cfc:.1f} (>= 20), OdeEuler(16) x{ode:.1f} (>= 30)")
    assert ok


def test_c06_linear_scaling():
    T_list = [576, 1152, 2304, 4608]
    res = scaling_sweep(None, T_list, BenchSpec(channels=64, thread_count=1))
    cfg = PyramidConfig()
    flops = [model_flops(cfg, T) for T in T_list]
    flops_linear = all(f * T_list[0] == flops[0] * T for f, T in zip(flops, T_list))
    bench_linear = all(f * T_list[0] == res.flops[0] * T for f, T in zip(res.flops, T_list))
    ok = 0.8 <= res.slope <= 1.3 and flops_linear and bench_linear
    lat = ", ".join(f"{v:.2f}" for v in res.latency_ms)
    record(6, ok, f"linear scaling: log-log slope {res.slope:.3f} in [0.8, 1.3] (ms: {lat}); "
                  f"FLOPs exactly linear: {flops_linear and bench_linear}")
    assert ok


# 7, 8 ------------------------------------------------------------------------


_RUNS = {}


def _train_default(levels=6, sharing="block_shared"):
    key = (levels, sharing)
    if key not in _RUNS:
        ds = _RUNS.setdefault("data", generate(SyntheticSpec()))
        cfg = PyramidConfig(levels=levels, decay_sharing=sharing, input_dim=ds.spec.Cin,
                            num_classes=ds.spec.num_classes)
        t0 = time.perf_counter()
        with threadpool_limits(limits=1):
            res = train(ds, cfg, TrainConfig(epochs=50, eval_every=5))
        _RUNS[key] = (res, time.perf_counter() - t0)
    return _RUNS[key]


def test_c07_synthetic_learning():
    res, secs = _train_default()
    ratio = res.final_loss / res.initial_loss
    ok = res.best_map >= 0.80 and ratio <= 0.5 and secs < 1800
    record(7, ok, f"synthetic learning: best avg mAP {res.best_map:.3f} at epoch {res.best_epoch} (>= 0.80), "
                  f"final/initial loss {ratio:.3f} (<= 0.5), {secs:.0f}s")
    assert ok


def test_c08_directional_ablations():
    block, _ = _train_default()
    per, _ = _train_default(sharing="per_channel")
    four, _ = _train_default(levels=4)
    tol = 0.01  # ties within one mAP point do not fail
    sharing_ok = block.best_map >= per.best_map - tol
    depth_ok = block.best_map >= four.best_map - tol
    ok = sharing_ok and depth_ok
    record(8, ok, f"directional ablations: BlockShared {block.best_map:.3f} vs PerChannel {per.best_map:.3f}; "
                  f"6-level {block.best_map:.3f} vs 4-level {four.best_map:.3f} (tie tolerance 0.01)")
    assert ok


# 9 ---------------------------------------------------------------------------


def _check_instance(preds, gts):
    P, G = {}, {}
    for v, (s, e), p in preds:
        P.setdefault(v, []).append(ActionSegment(s, e, 0, p))
    for v, spans in gts.items():
        G[v] = [ActionSegment(s, e, 0) for s, e in spans]
    res = evaluate(P, G)
    oracle = {t: brute_force_ap(preds, gts, t) for t in THUMOS_THRESHOLDS}
    return (all(res.map_per_threshold[t] == float(oracle[t]) for t in THUMOS_THRESHOLDS)
            and res.avg_map == float(sum(oracle.values()) / len(oracle)))


def test_c09_map_oracle():
    spans = [(0.0, 2.0), (1.0, 3.0), (0.0, 4.0)]
    options = [("a", sp, sc) for sp in spans for sc in (0.5, 0.9)]
    gt_sets = [list(c) for k in (1, 2, 3) for c in itertools.combinations_with_replacement(spans, k)]
    n, bad = 0, 0
    # exhaustive over a small domain: every ranked list of up to 3 predictions
    for k in range(0, 4):
        for preds in itertools.product(options, repeat=k):
            for g in gt_sets:
                n += 1
                bad += not _check_instance(list(preds), {"a": g})
    # random instances up to the full 5 predictions / 3 GT over two videos
    rng = np.random.default_rng(9)
    for _ in range(5000):
        npred, ngt = int(rng.integers(0, 6)), int(rng.integers(1, 4))
        preds = []
        for _ in range(npred):
            s = float(rng.integers(0, 8))
            preds.append((str(rng.choice(["a", "b"])), (s, s + float(rng.integers(1, 5))),
                          float(rng.choice([0.2, 0.5, 0.9]))))
        preds.sort(key=lambda p: p[0])
        gts = {}
        for _ in range(ngt):
            s = float(rng.integers(0, 8))
            gts.setdefault(str(rng.choice(["a", "b"])), []).append((s, s + float(rng.integers(1, 5))))
        n += 1
        bad += not _check_instance(preds, gts)
    ok = bad == 0
    record(9, ok, f"mAP oracle: {n - bad}/{n} instances exactly equal to brute force")
    assert ok


# 10 --------------------------------------------------------------------------


def test_c10_determinism(tmp_path):
    data = tmp_path / "data"
    assert cli.main(["generate", "--out", str(data), "--seed", "11"]) == 0
    files = []
    for run in ("r1", "r2"):
        out = tmp_path / run
        assert cli.main(["train", "--data", str(data), "--out", str(out / "train"), "--seed", "11",
                         "--threads", "1", "--set", "train.epochs=3", "--set", "train.eval_every=1"]) == 0
        assert cli.main(["eval", "--data", str(data), "--checkpoint", str(out / "train" / "checkpoint"),
                         "--out", str(out / "eval"), "--threads", "1"]) == 0
        files.append([(out / "train" / "checkpoint" / "params.lqt").read_bytes(),
                      (out / "train" / "checkpoint" / "manifest.json").read_bytes(),
                      (out / "eval" / "eval.json").read_bytes(),
                      (out / "eval" / "detections.jsonl").read_bytes()])
    same = [a == b for a, b in zip(*files)]
    avg = json.loads(files[0][2])["avg_map"]
    ok = all(same)
    record(10, ok, f"determinism: checkpoint params/manifest and eval JSON/detections identical {same} "
                   f"(avg mAP {avg:.3f})")
    assert ok
