"""Central finite-difference verification of the reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .detector import ActionSegment, Detector, PyramidConfig
from .train import TrainConfig, assign_targets, loss


@dataclass
class GradcheckConfig:
    T: int = 32
    channels: int = 8
    input_dim: int = 8
    num_classes: int = 3
    levels: int = 5  # deepest level keeps 2 tokens at T=32
    step: float = 1e-4
    tolerance: float = 1e-4
    # groups failing at ``step`` are retried at these steps: a difference
    # straddling a ReLU or max-pool kink shrinks with h, a wrong rule does not
    refine_steps: list = field(default_factory=lambda: [1e-5, 1e-6])
    seed: int = 0
    decay_sharing: list = field(default_factory=lambda: ["block_shared", "per_channel"])
    backend: str = "parallel"


def numeric_grad(f, arr, h=1e-4):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (in place)."""
    g = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic, numeric, floor=1e-8):
    """Largest deviation relative to the largest gradient magnitude in the group."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(numeric), initial=0.0)), float(np.max(np.abs(analytic), initial=0.0)), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def elementwise_relative_error(analytic, numeric, floor=1e-8):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom, initial=0.0))


def check_params(loss_fn, params, h=1e-4, tolerance=None, refine_steps=(), steps_used=None):
    """Compare analytic and numeric gradients for each parameter.

    ``loss_fn()`` must build its graph fresh on every call and return a scalar
    Tensor.  Returns ``{name: relative_error}``.  With a ``tolerance``, a
    parameter above it is re-differenced at each of ``refine_steps`` until it
    passes; ``steps_used`` (a dict) receives the step behind each reported error.
    """
    for p in params:
        p.zero_grad()
    with E.Graph() as g:
        out = loss_fn()
    g.backward(out)
    analytic = {p.name: p.grad.astype(np.float64).copy() for p in params}
    report = {}
    f = lambda: float(loss_fn().data)  # noqa: E731
    for p in params:
        err = relative_error(analytic[p.name], numeric_grad(f, p.data, h))
        used = h
        if tolerance is not None:
            for h2 in refine_steps:
                if err <= tolerance:
                    break
                err2 = relative_error(analytic[p.name], numeric_grad(f, p.data, h2))
                if err2 < err:
                    err, used = err2, h2
        report[p.name] = err
        if steps_used is not None:
            steps_used[p.name] = used
    return report


def _toy_segments(T, num_classes, dt, rng):
    segs = []
    # one short and one long segment so several pyramid levels get positives
    for lo, hi in ((2, 6), (10, 26)):
        hi = max(min(hi, T // 2), 2)
        lo = max(min(lo, hi - 1), 1)
        s = int(rng.integers(0, T - hi + 1))
        d = int(rng.integers(lo, hi))
        segs.append(ActionSegment(s * dt, (s + d) * dt, int(rng.integers(num_classes))))
    return segs


def model_gradcheck(cfg: GradcheckConfig, sharing="block_shared", steps_used=None):
    """Gradcheck of the full detector loss w.r.t. every parameter, in float64."""
    with E.precision("f64"):
        mcfg = PyramidConfig(levels=cfg.levels, embed_dim=cfg.channels, input_dim=cfg.input_dim,
                             num_classes=cfg.num_classes, decay_sharing=sharing, backend=cfg.backend,
                             cls_prior=0.3)
        model = Detector(mcfg, seed=cfg.seed)
        rng = np.random.default_rng(cfg.seed + 1)
        # perturb away from the structured init so every path carries signal
        for p in model.parameters():
            p.data += rng.normal(0.0, 0.1, size=p.shape)
        x = rng.normal(size=(cfg.T, cfg.input_dim))
        tcfg = TrainConfig(center_sampling_radius=None)
        targets = assign_targets(_toy_segments(cfg.T, cfg.num_classes, mcfg.base_dt, rng),
                                 mcfg, tcfg, cfg.T, mcfg.base_dt)

        def loss_fn():
            outs = model.forward(x, training=True, seed=[cfg.seed])
            return loss(outs, targets, tcfg)

        return check_params(loss_fn, model.parameters(), cfg.step, cfg.tolerance,
                            cfg.refine_steps, steps_used)


def run(cfg: GradcheckConfig):
    """Returns ``{sharing: {param: rel_err}}`` and an overall pass flag."""
    results = {}
    ok = True
    for sharing in cfg.decay_sharing:
        rep = model_gradcheck(cfg, sharing)
        results[sharing] = rep
        ok &= all(np.isfinite(v) and v <= cfg.tolerance for v in rep.values())
    return results, ok
