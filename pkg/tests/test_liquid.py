import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from liquidtad import engine as E
from liquidtad.liquid import (
    Backend, BackendKind, DecayError, DecayParams, DecaySharingMode, DtPolicy, LptbWeights,
    decay_coefficients, lptb_flops, lptb_forward, parallel_relax, softplus_inverse, stimulus,
)
from oracles import naive_lptb

CFC = Backend(BackendKind.CFC_SEQUENTIAL)


def _decay(rho, eps=1e-3, dt=4 / 30, align=False, stride=2):
    return DecayParams(E.Parameter(np.asarray(rho, dtype=np.float64), "rho"), eps,
                       DecaySharingMode.BLOCK_SHARED, DtPolicy(dt, align), stride)


def _weights(C, seed=0, K=3, **kw):
    return LptbWeights.init(C, np.random.default_rng(seed), kernel_size=K, dropout_rate=0.0, **kw)


# -- decay -----------------------------------------------------------------


def test_decay_examples(f64):
    lam, a = decay_coefficients(_decay(-1e4))
    assert lam.item() == pytest.approx(1e-3, abs=1e-15)
    assert a.item() == pytest.approx(math.exp(-1e-3 * 4 / 30), abs=1e-12)
    assert a.item() == pytest.approx(0.999867, abs=1e-6)
    lam, a = decay_coefficients(_decay(0.0, eps=0.0, dt=1.0))
    assert lam.item() == pytest.approx(math.log(2), abs=1e-15)
    assert a.item() == pytest.approx(0.5, abs=1e-15)
    # exp(-(ln 2 + 1e-3) * 4/30) = 0.911601
    _, a = decay_coefficients(_decay(0.0))
    assert a.item() == pytest.approx(math.exp(-(math.log(2) + 1e-3) * 4 / 30), abs=1e-15)
    assert a.item() == pytest.approx(0.911601, abs=1e-6)


def test_decay_init_gives_half(f64):
    for dt in (2 / 30, 4 / 30, 1.0):
        d = DecayParams.init(4, dt_policy=DtPolicy(dt))
        _, a = decay_coefficients(d)
        assert a.item() == pytest.approx(0.5, abs=1e-12)


def test_softplus_inverse():
    for y in (1e-6, 0.3, 5.0, 80.0):
        assert math.log1p(math.exp(softplus_inverse(y))) == pytest.approx(y, rel=1e-12)


def test_decay_param_counts():
    assert DecayParams.init(16).n_params() == 1
    assert DecayParams.init(16, sharing="per_channel").n_params() == 16


def test_decay_errors():
    with pytest.raises(DecayError):
        DtPolicy(0.0)
    with pytest.raises(DecayError):
        DtPolicy(-1.0)
    with pytest.raises(ValueError):
        DtPolicy().effective_dt(-1)


@given(st.floats(-30, 30), st.floats(1e-4, 10), st.integers(0, 7))
def test_align_dt_pyramid(rho, dt, level):
    with E.precision("f64"):
        lam, a = decay_coefficients(_decay(rho, dt=dt, align=True), level)
        expected = math.exp(-lam.item() * dt * 2 ** level)
        assert abs(a.item() - expected) <= 1e-12
        _, a0 = decay_coefficients(_decay(rho, dt=dt, align=True), 0)
        assert a.item() == pytest.approx(a0.item() ** (2 ** level), rel=1e-9, abs=1e-300)


def test_decay_is_differentiable(f64):
    d = _decay(0.3)
    with E.Graph() as g:
        _, a = decay_coefficients(d)
        loss = E.sum(a)
    g.backward(loss)
    lam = math.log1p(math.exp(0.3)) + 1e-3
    expected = -math.exp(-lam * 4 / 30) * (4 / 30) / (1 + math.exp(-0.3))
    assert d.rho.grad.item() == pytest.approx(expected, rel=1e-10)


# -- parallel relax -----------------------------------------------------------


def test_parallel_relax_examples(f64):
    assert parallel_relax(E.Tensor([2.0]), E.Tensor([0.0]), E.Tensor(0.25)).data.tolist() == [0.5]
    x, s = E.Tensor([1.0, -3.0]), E.Tensor([5.0, 7.0])
    near1 = parallel_relax(x, s, E.Tensor(1 - 1e-12)).data
    near0 = parallel_relax(x, s, E.Tensor(1e-12)).data
    np.testing.assert_allclose(near1, x.data, atol=1e-10)
    np.testing.assert_allclose(near0, s.data, atol=1e-10)


def test_parallel_relax_errors(f64):
    x = E.Tensor(np.zeros((2, 2)))
    for bad in (0.0, 1.0, -0.5, 1.5):
        with pytest.raises(DecayError):
            parallel_relax(x, x, E.Tensor(bad))
    with pytest.raises(E.ShapeError):
        parallel_relax(x, E.Tensor(np.zeros((3, 2))), E.Tensor(0.5))


@given(st.integers(1, 30), st.integers(1, 8), st.booleans(), st.integers(0, 2**31 - 1))
def test_convexity_bound(T, C, per_channel, seed):
    r = np.random.default_rng(seed)
    x, s = r.normal(size=(T, C)) * 10, r.normal(size=(T, C)) * 10
    a = r.uniform(1e-9, 1 - 1e-9, size=C if per_channel else ())
    with E.precision("f64"):
        out = parallel_relax(E.Tensor(x), E.Tensor(s), E.Tensor(a)).data
    assert np.all(out >= np.minimum(x, s)) and np.all(out <= np.maximum(x, s))


# -- stimulus and block ---------------------------------------------------------


def test_stimulus_hand_example(f64):
    # layer norm over one channel is identically 0, so the [1, -1] example is
    # realised as a two-channel row (mean 0, variance 1) at each of two tokens
    w2 = _weights(2)
    w2.dw_kernel.data[:] = [[0.0, 0.0], [1.0, 1.0], [0.0, 0.0]]
    w2.pw_weight.data[:] = np.eye(2)
    w2.gate_weight.data[:] = 0.0
    w2.eps_ln = 1e-12
    x = E.Tensor([[1.0, -1.0], [-1.0, 1.0]])
    s = stimulus(x, w2).data
    np.testing.assert_allclose(s, [[0.5, -0.5], [-0.5, 0.5]], atol=1e-9)


def test_stimulus_limits(f64, rng):
    w = _weights(4)
    x = E.Tensor(rng.normal(size=(9, 4)))
    w.gate_bias.data[:] = -800.0
    assert np.all(np.abs(stimulus(x, w).data) < 1e-300)
    w = _weights(4)
    w.dw_kernel.data[:] = 0.0
    np.testing.assert_array_equal(stimulus(x, w).data, 0.0)


def test_gate_closed_is_pure_retention(f64, rng):
    w = _weights(4)
    w.gate_bias.data[:] = -800.0
    x = E.Tensor(rng.normal(size=(9, 4)))
    _, a = decay_coefficients(w.decay)
    np.testing.assert_allclose(lptb_forward(x, w).data, a.item() * x.data, atol=1e-12)


@given(st.integers(1, 24), st.integers(1, 6), st.sampled_from([1, 3, 5]), st.booleans(),
       st.integers(0, 3), st.booleans(), st.integers(0, 2**31 - 1))
def test_vectorization_oracle(T, C, K, per_channel, level, align, seed):
    if K > 2 * T - 1:
        return
    r = np.random.default_rng(seed)
    with E.precision("f64"):
        w = LptbWeights.init(C, r, kernel_size=K, dropout_rate=0.0,
                             sharing="per_channel" if per_channel else "block_shared",
                             dt_policy=DtPolicy(4 / 30, align))
        w.decay.rho.data = w.decay.rho.data + r.normal(size=w.decay.rho.shape)
        w.ln_beta.data = r.normal(size=C)
        w.gate_bias.data = r.normal(size=C)
        x = r.normal(size=(T, C))
        out = lptb_forward(E.Tensor(x), w, level).data
    assert np.max(np.abs(out - naive_lptb(x, w, level))) <= 1e-12


def test_cfc_geometric_decay(f64, rng):
    w = _weights(3)
    w.dw_kernel.data[:] = 0.0        # stimulus identically zero
    x = rng.normal(size=(12, 3))
    out = lptb_forward(E.Tensor(x), w, 0, CFC).data
    _, a = decay_coefficients(w.decay)
    a = a.item()
    # the hidden state seeded with x_0 is updated once per token
    expected = np.array([a ** (t + 1) * x[0] for t in range(12)])
    np.testing.assert_allclose(out, expected, rtol=1e-12)


def test_cfc_recurrence_definition(f64, rng):
    w = _weights(3, sharing="per_channel")
    w.decay.rho.data = w.decay.rho.data + rng.normal(size=3)
    x = rng.normal(size=(10, 3))
    s = stimulus(E.Tensor(x), w).data
    _, a = decay_coefficients(w.decay)
    a = a.data
    state = x[0].copy()
    expected = []
    for t in range(10):
        state = a * state + (1 - a) * s[t]
        expected.append(state.copy())
    np.testing.assert_allclose(lptb_forward(E.Tensor(x), w, 0, CFC).data, expected, rtol=1e-12, atol=1e-14)


def _euler_gap(n, seed=0):
    with E.precision("f64"):
        r = np.random.default_rng(seed)
        w = LptbWeights.init(8, r, dropout_rate=0.0)
        x = E.Tensor(r.normal(size=(64, 8)))
        ref = lptb_forward(x, w, 0, CFC).data
        return np.abs(lptb_forward(x, w, 0, Backend(BackendKind.ODE_EULER, n)).data - ref).max()


def test_ode_euler_first_order_convergence():
    gaps = [_euler_gap(n) for n in (16, 32, 64, 128, 256)]
    assert all(b < a for a, b in zip(gaps, gaps[1:]))
    ratios = [a / b for a, b in zip(gaps, gaps[1:])]
    assert all(1.8 < q < 2.2 for q in ratios), ratios


def test_ode_euler_64_substeps_within_1e3():
    assert _euler_gap(64) <= 1e-3


def test_backends_share_shapes(rng):
    w = _weights(5)
    x = E.Tensor(rng.normal(size=(11, 5)).astype(np.float32))
    for kind in BackendKind:
        assert lptb_forward(x, w, 0, Backend(kind, 2)).shape == (11, 5)
    with pytest.raises(E.ShapeError):
        lptb_forward(E.Tensor(np.zeros((0, 5))), w)


def test_temporal_locality(f64, rng):
    w = _weights(3, K=3)
    x = rng.normal(size=(20, 3))
    base = lptb_forward(E.Tensor(x), w).data
    x2 = x.copy()
    x2[10] += [1.0, -0.5, 0.2]      # not a constant shift, which layer norm would erase
    changed = np.nonzero(np.any(lptb_forward(E.Tensor(x2), w).data != base, axis=1))[0]
    assert set(changed) <= {9, 10, 11} and 10 in changed
    seq = lptb_forward(E.Tensor(x), w, 0, CFC).data
    seq2 = lptb_forward(E.Tensor(x2), w, 0, CFC).data
    changed = np.nonzero(np.any(seq2 != seq, axis=1))[0]
    assert changed.min() >= 9 and changed.max() == 19


def test_shift_equivariance_interior(f64, rng):
    w = _weights(4, K=5)
    x = rng.normal(size=(40, 4))
    a = lptb_forward(E.Tensor(x), w).data
    b = lptb_forward(E.Tensor(np.roll(x, 3, axis=0)), w).data
    np.testing.assert_allclose(b[8:-8], np.roll(a, 3, axis=0)[8:-8], atol=1e-6)


def test_dropout_changes_training_only(rng):
    w = LptbWeights.init(4, rng, dropout_rate=0.5)
    x = E.Tensor(rng.normal(size=(10, 4)).astype(np.float32))
    ev1, ev2 = lptb_forward(x, w).data, lptb_forward(x, w).data
    np.testing.assert_array_equal(ev1, ev2)
    tr = lptb_forward(x, w, training=True, seed=[1]).data
    assert not np.array_equal(tr, ev1)
    np.testing.assert_array_equal(tr, lptb_forward(x, w, training=True, seed=[1]).data)


# -- flops ---------------------------------------------------------------


def test_flops_examples():
    assert lptb_flops(1, 1, 1) == 1 + 2 + 10
    assert lptb_flops(512, 16, 3) == 2 * lptb_flops(256, 16, 3)
    T, C, K = 256, 64, 3
    assert lptb_flops(T, C, K) == T * C * K + 2 * T * C * C + 10 * T * C
    with pytest.raises(ValueError):
        lptb_flops(0, 1, 1)


def test_param_count_per_mode():
    base = _weights(6)
    per = _weights(6, sharing="per_channel")
    n = lambda w: sum(p.data.size for p in w.parameters())  # noqa: E731
    assert n(per) - n(base) == 6 - 1
    assert base.decay.rho.shape == () and per.decay.rho.shape == (6,)
