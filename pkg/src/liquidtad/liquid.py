"""Liquid-inspired relaxation block and its sequential reference backends.

A block blends each input token with a gated stimulus::

    lambda = softplus(rho) + eps
    alpha  = exp(-lambda * dt)
    out_t  = alpha * x_t + (1 - alpha) * (mix_t * g_t)

``Parallel`` evaluates this for all tokens at once.  ``CfcSequential`` and
``OdeEuler`` keep a hidden state seeded with ``x_0`` and step through time;
they reuse the same stimulus (computed from the input sequence) so all three
backends have identical weights and differ only in how the relaxation is
carried out.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .engine import Parameter, Tensor


class DecayError(ValueError):
    pass


class DecaySharingMode(str, enum.Enum):
    BLOCK_SHARED = "block_shared"
    PER_CHANNEL = "per_channel"


class BackendKind(str, enum.Enum):
    PARALLEL = "parallel"
    CFC_SEQUENTIAL = "cfc_sequential"
    ODE_EULER = "ode_euler"


@dataclass(frozen=True)
class DtPolicy:
    base_dt: float = 4 / 30
    align_pyramid: bool = False

    def __post_init__(self):
        if not self.base_dt > 0:
            raise DecayError(f"base_dt must be positive, got {self.base_dt}")

    def effective_dt(self, level: int, stride: int = 2) -> float:
        if level < 0:
            raise ValueError("level must be >= 0")
        if self.align_pyramid:
            return self.base_dt * stride ** level
        return self.base_dt


@dataclass(frozen=True)
class Backend:
    kind: BackendKind = BackendKind.PARALLEL
    substeps: int = 16

    def __post_init__(self):
        object.__setattr__(self, "kind", BackendKind(self.kind))
        if self.substeps < 1:
            raise ValueError("substeps must be a positive integer")


def softplus_inverse(y: float) -> float:
    # log(exp(y) - 1), stable for large y
    return y + math.log(-math.expm1(-y))


@dataclass
class DecayParams:
    rho: Parameter
    epsilon: float = 1e-3
    sharing: DecaySharingMode = DecaySharingMode.BLOCK_SHARED
    dt_policy: DtPolicy = field(default_factory=DtPolicy)
    stride: int = 2

    @classmethod
    def init(cls, channels, sharing=DecaySharingMode.BLOCK_SHARED, epsilon=1e-3,
             dt_policy=None, stride=2, name="rho"):
        """Start at alpha = 0.5 for level 0 (lambda * dt = ln 2)."""
        dt_policy = dt_policy or DtPolicy()
        sharing = DecaySharingMode(sharing)
        rho0 = softplus_inverse(math.log(2.0) / dt_policy.base_dt - epsilon)
        shape = () if sharing is DecaySharingMode.BLOCK_SHARED else (channels,)
        return cls(Parameter(np.full(shape, rho0), name=name), epsilon, sharing, dt_policy, stride)

    def n_params(self):
        return self.rho.data.size


def decay_coefficients(decay: DecayParams, level: int = 0):
    """Return (lambda, alpha) tensors, differentiable w.r.t. ``decay.rho``."""
    dt = decay.dt_policy.effective_dt(level, decay.stride)
    if not dt > 0:
        raise DecayError(f"non-positive dt {dt}")
    lam = E.softplus(decay.rho) + decay.epsilon
    alpha = E.exp(-(lam * dt))
    return lam, alpha


@dataclass
class LptbWeights:
    ln_gamma: Parameter
    ln_beta: Parameter
    dw_kernel: Parameter
    pw_weight: Parameter
    pw_bias: Parameter
    gate_weight: Parameter
    gate_bias: Parameter
    decay: DecayParams
    dropout_rate: float = 0.1
    eps_ln: float = 1e-5

    @classmethod
    def init(cls, channels, rng, kernel_size=3, dropout_rate=0.1, prefix="lptb", **decay_kw):
        C, K = channels, kernel_size
        if K % 2 == 0:
            raise ValueError("kernel_size must be odd")
        dw = rng.normal(0.0, 1.0 / math.sqrt(K), size=(K, C))
        return cls(
            ln_gamma=Parameter(np.ones(C), f"{prefix}.ln_gamma"),
            ln_beta=Parameter(np.zeros(C), f"{prefix}.ln_beta"),
            dw_kernel=Parameter(dw, f"{prefix}.dw_kernel"),
            pw_weight=Parameter(rng.normal(0.0, 1.0 / math.sqrt(C), size=(C, C)), f"{prefix}.pw_weight"),
            pw_bias=Parameter(np.zeros(C), f"{prefix}.pw_bias"),
            gate_weight=Parameter(rng.normal(0.0, 1.0 / math.sqrt(C), size=(C, C)), f"{prefix}.gate_weight"),
            gate_bias=Parameter(np.zeros(C), f"{prefix}.gate_bias"),
            decay=DecayParams.init(C, name=f"{prefix}.rho", **decay_kw),
            dropout_rate=dropout_rate,
        )

    @property
    def channels(self):
        return self.ln_gamma.shape[0]

    @property
    def kernel_size(self):
        return self.dw_kernel.shape[0]

    def parameters(self):
        return [self.ln_gamma, self.ln_beta, self.dw_kernel, self.pw_weight, self.pw_bias,
                self.gate_weight, self.gate_bias, self.decay.rho]


def stimulus(x, w: LptbWeights, training=False, seed=None):
    """Gated stimulus ``mix * g``; the layer norm output feeds both branches."""
    xh = E.layer_norm(x, w.ln_gamma, w.ln_beta, w.eps_ln)
    mix = E.linear_per_timestep(E.conv1d_depthwise(xh, w.dw_kernel), w.pw_weight, w.pw_bias)
    mix = E.dropout(mix, w.dropout_rate, seed, training)
    g = E.sigmoid(E.linear_per_timestep(xh, w.gate_weight, w.gate_bias))
    return mix * g


def parallel_relax(x, s, alpha):
    a = alpha.data if isinstance(alpha, Tensor) else np.asarray(alpha)
    if not (np.all(a > 0) and np.all(a < 1)):
        raise DecayError(f"retention coefficient outside (0, 1): {a}")
    if x.shape != s.shape:
        raise E.ShapeError(f"x {x.shape} and stimulus {s.shape} differ")
    alpha = alpha if isinstance(alpha, Tensor) else Tensor(a)
    xd, sd = x.data, s.data
    a = a.astype(xd.dtype, copy=False)
    out = a * xd + (1 - a) * sd
    # the two roundings can land an ulp outside [min(x, s), max(x, s)];
    # clamping moves values by rounding error only, so the gradient is
    # that of the exact blend
    lo = np.minimum(xd, sd)
    np.maximum(out, lo, out=out)
    np.minimum(out, np.maximum(xd, sd, out=lo), out=out)
    return E.custom_op("relax_blend", out, (x, s, alpha), (xd, sd, a, alpha.shape), _relax_backward)


def _relax_backward(ctx, g):
    xd, sd, a, a_shape = ctx
    return g * a, g * (1 - a), E._unbroadcast(g * (xd - sd), a_shape)


def _cfc_sequential(x, s, alpha):
    keep = 1.0 - alpha
    state = E.row(x, 0)
    outs = []
    for t in range(x.shape[0]):
        state = alpha * state + keep * E.row(s, t)
        outs.append(state)
    return E.stack_rows(outs)


def _ode_euler(x, s, lam, dt, substeps):
    # dx/dt = -lambda (x - h_t), h_t held constant over each token interval
    rate = lam * (dt / substeps)
    state = E.row(x, 0)
    outs = []
    for t in range(x.shape[0]):
        h = E.row(s, t)
        for _ in range(substeps):
            state = state - rate * (state - h)
        outs.append(state)
    return E.stack_rows(outs)


def lptb_forward(x, w: LptbWeights, level=0, backend=Backend(), training=False, seed=None):
    if x.shape[0] == 0:
        raise E.ShapeError("empty sequence")
    lam, alpha = decay_coefficients(w.decay, level)
    s = stimulus(x, w, training, seed)
    kind = backend.kind
    if kind is BackendKind.PARALLEL:
        return parallel_relax(x, s, alpha)
    if kind is BackendKind.CFC_SEQUENTIAL:
        return _cfc_sequential(x, s, alpha)
    dt = w.decay.dt_policy.effective_dt(level, w.decay.stride)
    return _ode_euler(x, s, lam, dt, backend.substeps)


# per-token operation counts for one Parallel block; one multiply-accumulate = 1
LPTB_FLOP_TERMS = {
    "layer_norm": lambda C, K: 4 * C,       # mean, variance, normalize, affine
    "depthwise": lambda C, K: K * C,
    "pointwise": lambda C, K: C * C + C,    # matmul + bias
    "gate": lambda C, K: C * C + C,
    "sigmoid": lambda C, K: C,
    "gating_product": lambda C, K: C,
    "relax_blend": lambda C, K: 2 * C,      # alpha*x and (1-alpha)*s accumulate
}


def lptb_flops(T, C, K=3):
    """Analytic op count of one Parallel-backend block: T * (K*C + 2*C^2 + 10*C)."""
    if min(T, C, K) <= 0:
        raise ValueError("dimensions must be positive")
    return T * sum(f(C, K) for f in LPTB_FLOP_TERMS.values())
