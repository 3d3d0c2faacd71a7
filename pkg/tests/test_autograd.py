import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from loopus import autograd as ag
from loopus.autograd import Parameter, Tensor
from loopus.errors import ContractError, NumericError, ShapeError

from oracles import FD_RTOL, central_diff, rel_err, sigmoid, silu, softplus

N_DRAWS = 100


def grad_check(fn, arrays_in, seed=0, wrt=None):
    """Analytic vs central-difference gradient of ``sum(fn(*xs) * R)``."""
    xs = [np.array(a, dtype=np.float64) for a in arrays_in]
    params = [Parameter(x) for x in xs]
    out = fn(*params)
    r = np.random.default_rng(seed).normal(size=out.shape)
    loss = ag.sum_(ag.mul(out, Tensor(r)))
    grads = ag.gradient(loss, params)
    wrt = range(len(xs)) if wrt is None else wrt
    worst = 0.0
    for i in wrt:
        def f():
            with ag.no_grad():
                return float(np.sum(fn(*[Tensor(p.data) for p in params]).data * r))

        num = central_diff(f, params[i].data)
        worst = max(worst, rel_err(grads[i], num))
    return worst


def _draws(make, fn, wrt=None):
    rng = np.random.default_rng(1234)
    worst = 0.0
    for k in range(N_DRAWS):
        worst = max(worst, grad_check(fn, make(rng), seed=k, wrt=wrt))
    return worst


def _away_from_zero(rng, shape):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 0.05, 0.5, x)


ELEMENTWISE = {
    "add": (lambda r: [r.normal(size=(2, 3)), r.normal(size=(3,))], ag.add),
    "sub": (lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 1))], ag.sub),
    "mul": (lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 3))], ag.mul),
    "neg": (lambda r: [r.normal(size=(4,))], ag.neg),
    "exp": (lambda r: [r.normal(size=(2, 3))], ag.exp),
    "log": (lambda r: [r.uniform(0.5, 3.0, size=(2, 3))], ag.log),
    "sigmoid": (lambda r: [3 * r.normal(size=(2, 3))], ag.sigmoid),
    "softplus": (lambda r: [3 * r.normal(size=(2, 3))], ag.softplus),
    "silu": (lambda r: [3 * r.normal(size=(2, 3))], ag.silu),
    "relu": (lambda r: [_away_from_zero(r, (2, 3))], ag.relu),
    "selu": (lambda r: [_away_from_zero(r, (2, 3))], ag.selu),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_elementwise_gradients(name):
    make, fn = ELEMENTWISE[name]
    assert _draws(make, fn) <= FD_RTOL


SHAPE_OPS = {
    "reshape": (lambda r: [r.normal(size=(2, 6))], lambda a: ag.reshape(a, (3, 4))),
    "transpose": (lambda r: [r.normal(size=(2, 3, 4))], lambda a: ag.transpose(a, (2, 0, 1))),
    "getitem": (lambda r: [r.normal(size=(4, 3))], lambda a: ag.getitem(a, (np.array([0, 2, 2]), slice(None)))),
    "sum_axis": (lambda r: [r.normal(size=(3, 4))], lambda a: ag.sum_(a, 1)),
    "sum_all": (lambda r: [r.normal(size=(3, 4))], lambda a: ag.sum_(a)),
    "mean_axis": (lambda r: [r.normal(size=(3, 4))], lambda a: ag.mean(a, 0)),
    "mean_all": (lambda r: [r.normal(size=(3, 4))], lambda a: ag.mean(a)),
}


@pytest.mark.parametrize("name", sorted(SHAPE_OPS))
def test_shape_op_gradients(name):
    make, fn = SHAPE_OPS[name]
    assert _draws(make, fn) <= FD_RTOL


MATMULS = {
    "2d@2d": ((3, 4), (4, 2)),
    "3d@2d": ((2, 3, 4), (4, 5)),
    "3d@3d": ((2, 3, 4), (2, 4, 2)),
    "1d@2d": ((4,), (4, 3)),
}


@pytest.mark.parametrize("name", sorted(MATMULS))
def test_matmul_gradients(name):
    sa, sb = MATMULS[name]
    assert _draws(lambda r: [r.normal(size=sa), r.normal(size=sb)], ag.matmul) <= FD_RTOL


def test_embedding_gradient():
    ids = np.array([[0, 2, 2], [1, 0, 3]])
    assert _draws(lambda r: [r.normal(size=(4, 3))], lambda w: ag.embedding(w, ids)) <= FD_RTOL


def test_rms_norm_gradient():
    assert _draws(lambda r: [r.normal(size=(2, 3, 5)), r.normal(size=(5,))], ag.rms_norm) <= FD_RTOL


def test_softmax_gradient():
    assert _draws(lambda r: [2 * r.normal(size=(3, 5))], ag.softmax) <= FD_RTOL


def _rot(t, d, pos0=0):
    inv = 10000.0 ** (-np.arange(0, d, 2) / d)
    ang = np.arange(pos0, pos0 + t)[:, None] * inv[None, :]
    return np.cos(ang), np.sin(ang)


def test_rope_gradient():
    cos, sin = _rot(3, 4)
    assert _draws(lambda r: [r.normal(size=(2, 3, 4))], lambda x: ag.rope(x, cos, sin)) <= FD_RTOL


def test_causal_attention_gradient():
    shape = (1, 2, 3, 4)
    make = lambda r: [r.normal(size=shape), r.normal(size=shape), r.normal(size=shape)]
    assert _draws(make, ag.causal_attention) <= FD_RTOL


@pytest.mark.parametrize("use_rope", [False, True])
def test_self_attention_gradient(use_rope):
    rot = _rot(3, 4) if use_rope else None
    make = lambda r: [r.normal(size=(2, 3, 24))]
    assert _draws(make, lambda qkv: ag.self_attention(qkv, 2, rot)) <= FD_RTOL


def test_cross_entropy_gradient():
    targets = np.array([[1, 0, 3], [2, 2, 0]])
    mask = np.array([[1, 1, 0], [1, 0, 1]], bool)

    def fn(z):
        return ag.cross_entropy(z, targets, mask)

    assert _draws(lambda r: [2 * r.normal(size=(2, 3, 4))], fn) <= FD_RTOL


def test_bce_gradient():
    y = np.array([0.0, 0.25, 0.75, 1.0])
    assert _draws(lambda r: [3 * r.normal(size=(4,))], lambda z: ag.bce_with_logits(z, y)) <= FD_RTOL


# -- forward values -------------------------------------------------------


def test_scalar_oracles():
    assert ag.softplus(Tensor(np.array([1.0]))).item() == pytest.approx(softplus(1.0), abs=1e-12)
    assert ag.softplus(Tensor(np.array([1.0]))).item() == pytest.approx(1.313262, abs=1e-6)
    assert ag.silu(Tensor(np.array([1.0]))).item() == pytest.approx(silu(1.0), abs=1e-12)
    assert ag.silu(Tensor(np.array([1.0]))).item() == pytest.approx(0.731059, abs=1e-6)
    assert ag.sigmoid(Tensor(np.array([2.0]))).item() == pytest.approx(sigmoid(2.0), abs=1e-12)


def test_softmax_uniform():
    p = ag.softmax(Tensor(np.zeros(3))).data
    np.testing.assert_allclose(p, [1 / 3] * 3, atol=1e-12)


def test_selu_constants():
    assert ag.SELU_LAMBDA == 1.0507009873554805
    assert ag.SELU_ALPHA == 1.6732632423543772
    x = Tensor(np.array([-1.0, 2.0]))
    expect = [1.0507009873554805 * 1.6732632423543772 * (math.exp(-1) - 1), 1.0507009873554805 * 2]
    np.testing.assert_allclose(ag.selu(x).data, expect, rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    p = ag.softmax(Tensor(x)).data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)
    assert (p >= 0).all()


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 10), st.integers(0, 9), st.floats(30, 80))
def test_cross_entropy_of_delta_is_zero(v, t, big):
    t = t % v
    z = np.zeros((1, v))
    z[0, t] = big
    assert ag.cross_entropy(Tensor(z), np.array([t])).item() < 1e-6


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-30, 30, allow_nan=False)))
def test_sigmoid_matches_scalar_oracle(x):
    got = ag.sigmoid(Tensor(x)).data
    expect = [sigmoid(v) for v in x]
    np.testing.assert_allclose(got, expect, rtol=1e-12, atol=1e-300)


def test_float32_sigmoid_saturates_cleanly():
    x = np.array([-200.0, -50.0, 0.0, 50.0, 200.0], np.float32)
    s = ag.sigmoid(Tensor(x)).data
    assert np.isfinite(s).all()
    assert s[0] == 0.0 and s[-1] == 1.0 and s[2] == 0.5


def test_attention_is_causal():
    rng = np.random.default_rng(0)
    q, k, v = (Tensor(rng.normal(size=(1, 1, 5, 4))) for _ in range(3))
    out = ag.causal_attention(q, k, v).data
    v2 = v.data.copy()
    v2[..., 3:, :] += 10.0
    k2 = k.data.copy()
    k2[..., 3:, :] -= 3.0
    out2 = ag.causal_attention(q, Tensor(k2), Tensor(v2)).data
    np.testing.assert_array_equal(out[..., :3, :], out2[..., :3, :])


def test_self_attention_matches_unfused_composition():
    rng = np.random.default_rng(3)
    qkv = rng.normal(size=(2, 5, 24))
    cos, sin = _rot(5, 4)
    fused = ag.self_attention(Tensor(qkv), 2, (cos, sin)).data
    parts = qkv.reshape(2, 5, 3, 2, 4).transpose(2, 0, 3, 1, 4)
    q = ag.rope(Tensor(parts[0]), cos, sin)
    k = ag.rope(Tensor(parts[1]), cos, sin)
    ref = ag.causal_attention(q, k, Tensor(parts[2])).data.transpose(0, 2, 1, 3).reshape(2, 5, 8)
    np.testing.assert_allclose(fused, ref, atol=1e-12)


# -- engine semantics -------------------------------------------------------


def test_polynomial_gradient():
    x = Parameter(np.array(3.0))
    g = ag.gradient(ag.mul(x, x), [x])[0]
    assert float(g) == 6.0


def test_uniform_logits_ce_gradient_closed_form():
    v = 5
    z = Parameter(np.zeros((1, v)))
    g = ag.gradient(ag.cross_entropy(z, np.array([2])), [z])[0]
    expect = np.full((1, v), 1 / v)
    expect[0, 2] -= 1
    np.testing.assert_allclose(g, expect, atol=1e-12)


def test_random_mlp_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    for _ in range(10):
        x = rng.normal(size=(4, 3))
        ws = [rng.normal(size=(3, 5)), rng.normal(size=(5, 5)), rng.normal(size=(5, 2))]

        def mlp(w1, w2, w3):
            h = ag.silu(ag.matmul(Tensor(x), w1))
            h = ag.relu(ag.matmul(h, w2))
            return ag.matmul(h, w3)

        assert grad_check(mlp, ws, seed=1) <= FD_RTOL


def test_detach_value_transparent_gradient_opaque():
    x = Parameter(np.array([1.5, -2.0]))
    w = Parameter(np.array([0.3, 0.7]))
    d = ag.detach(x)
    np.testing.assert_array_equal(d.data, x.data)
    loss = ag.sum_(ag.mul(d, w))
    gx, gw = ag.gradient(loss, [x, w]).values()
    np.testing.assert_array_equal(gx, 0.0)
    np.testing.assert_array_equal(gw, x.data)


def test_two_step_unroll_with_detach_keeps_only_second_path():
    # f(h) = tanh-free scalar map h -> a*h + c*h^2 ; param a shared by both steps
    a = Parameter(np.array(0.7))
    h0 = Tensor(np.array(1.3))

    def f(h):
        return ag.add(ag.mul(a, h), ag.mul(ag.mul(h, h), 0.1))

    h1 = f(h0)
    h2 = f(ag.detach(h1))
    g = float(ag.gradient(h2, [a])[0])
    # oracle: only d h2/d a with h1 held constant
    h1v = 0.7 * 1.3 + 0.1 * 1.3**2
    assert g == pytest.approx(h1v, rel=1e-12)
    full = float(ag.gradient(f(f(h0)), [a])[0])
    assert abs(full - g) > 1e-3


def test_tape_is_reverse_topological():
    x = Parameter(np.array([1.0, 2.0]))
    y = ag.exp(x)
    z = ag.add(ag.mul(y, y), y)
    loss = ag.sum_(z)
    tape = ag.GradTape(loss)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for n in tape.nodes:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]
    assert tape.nodes[-1] is loss


def test_backward_accumulates_into_leaf_grad():
    x = Parameter(np.array([2.0]))
    ag.backward(ag.sum_(ag.mul(x, x)))
    ag.backward(ag.sum_(ag.mul(x, x)))
    np.testing.assert_allclose(x.grad, [8.0])


def test_no_grad_records_nothing():
    x = Parameter(np.ones(3))
    with ag.no_grad():
        y = ag.exp(x)
    assert not y.requires_grad and y.is_leaf


def test_non_scalar_loss_rejected():
    x = Parameter(np.ones(3))
    with pytest.raises(ContractError):
        ag.gradient(ag.exp(x), [x])


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        ag.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    with pytest.raises(ShapeError):
        ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_non_finite_names_primitive():
    with pytest.raises(NumericError, match="'exp'"):
        ag.exp(Tensor(np.array([1000.0])))
    with pytest.raises(NumericError, match="'log'"):
        ag.log(Tensor(np.array([-1.0])))


def test_unused_parameter_gets_zero_gradient():
    x = Parameter(np.ones(2))
    unused = Parameter(np.ones((3, 3)))
    g = ag.gradient(ag.sum_(x), {"x": x, "u": unused})
    np.testing.assert_array_equal(g["u"], 0.0)
