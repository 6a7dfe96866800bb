import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from drscl import diffcore as dc
from drscl.errors import NonFiniteLoss, ShapeMismatch


def pv(**segs):
    return dc.ParamVector({k: np.asarray(v, dtype=np.float64) for k, v in segs.items()})


def half_sq(t, _):
    return (t["p"] * t["p"]).sum() * 0.5


def mlp_loss(t, batch):
    x, y = batch
    w1 = t["w"][:12].reshape(4, 3)
    b1 = t["w"][12:15]
    w2 = t["w"][15:21].reshape(3, 2)
    h = dc.tanh(dc.Tensor(x) @ w1 + b1)
    logp = dc.log_softmax(h @ w2, axis=1)
    return -logp[np.arange(y.size), y].mean()


# forward_backward ---------------------------------------------------------


def test_quadratic_loss_and_gradient():
    loss, grads = dc.forward_backward(half_sq, pv(p=[3.0, 4.0]), None)
    assert loss == 12.5
    np.testing.assert_array_equal(grads["p"], [3.0, 4.0])


def test_constant_loss_has_zero_gradient():
    loss, grads = dc.forward_backward(lambda t, _: dc.Tensor(7.0), pv(p=[1.0, 2.0]), None)
    assert loss == 7.0
    np.testing.assert_array_equal(grads["p"], [0.0, 0.0])


def test_grads_keep_segment_structure():
    params = pv(a=[1.0, 2.0], b=[3.0])
    _, grads = dc.forward_backward(lambda t, _: (t["a"] * t["a"]).sum(), params, None)
    assert grads.names == ("a", "b")
    np.testing.assert_array_equal(grads["b"], [0.0])


def test_two_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(0)
    params = pv(w=rng.normal(size=21))
    batch = (rng.normal(size=(1, 4)), np.array([1]))
    assert dc.finite_diff_check(mlp_loss, params, batch, eps=1e-5) <= 1e-4


def test_non_finite_loss_raises():
    with pytest.raises(NonFiniteLoss):
        dc.forward_backward(lambda t, _: dc.log(t["p"]).sum(), pv(p=[-1.0]), None)


def test_every_op_matches_finite_differences():
    rng = np.random.default_rng(3)
    a = rng.uniform(0.5, 1.5, size=(3, 4))

    def fn(t, _):
        x = t["x"].reshape(3, 4)
        y = dc.concat([dc.exp(x) / (x + 2.0), dc.softplus(-x) ** 2], axis=1)
        z = dc.clip(dc.tanh(y @ y.T), -0.9, 0.9) - dc.relu(x[:, :2] - 1.0).sum()
        return (z * z).mean() + dc.log(x).sum() - dc.log_softmax(y, axis=0)[1].sum()

    assert dc.finite_diff_check(fn, pv(x=a.ravel()), None) <= 1e-6


# adam_step ----------------------------------------------------------------


def test_adam_zero_gradient_is_a_no_op():
    params = pv(p=[1.0, -2.0])
    state = dc.AdamState.fresh(params, lr=0.1)
    new, st1 = dc.adam_step(params, params.zeros_like(), state)
    assert new.equals(params)
    assert st1.step_count == 1


def test_adam_moves_against_constant_gradient():
    params = pv(p=[0.0])
    state = dc.AdamState.fresh(params, lr=0.01)
    g = pv(p=[2.5])
    trace = [0.0]
    for _ in range(50):
        params, state = dc.adam_step(params, g, state)
        trace.append(params["p"][0])
    assert np.all(np.diff(trace) < 0)


def test_adam_first_step_size():
    # t=1: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps)
    params = pv(p=[0.0])
    new, _ = dc.adam_step(params, pv(p=[1.0]), dc.AdamState.fresh(params, lr=0.1))
    expected = -0.1 * 1.0 / (1.0 + 1e-8)
    assert new["p"][0] == pytest.approx(expected, abs=1e-15)


def test_adam_is_deterministic():
    rng = np.random.default_rng(1)
    params, grads = pv(p=rng.normal(size=5)), pv(p=rng.normal(size=5))
    state = dc.AdamState.fresh(params, lr=0.01)
    a = dc.adam_step(params, grads, state)
    b = dc.adam_step(params, grads, state)
    assert a[0].equals(b[0]) and a[1].m.equals(b[1].m) and a[1].v.equals(b[1].v)


def test_adam_rejects_misaligned_gradients():
    params = pv(p=[0.0, 1.0])
    with pytest.raises(ShapeMismatch):
        dc.adam_step(params, pv(p=[1.0]), dc.AdamState.fresh(params))


# param_distance_sq --------------------------------------------------------


def test_distance_identity_and_unit_offsets():
    a = pv(p=[1.0, 0.0])
    assert dc.param_distance_sq(a, a) == 0.0
    assert dc.param_distance_sq(a, pv(p=[0.0, 1.0])) == 2.0


def test_distance_matches_explicit_loop():
    rng = np.random.default_rng(2)
    a = pv(e=rng.normal(size=7), d=rng.normal(size=4))
    b = pv(e=rng.normal(size=7), d=rng.normal(size=4))
    total = 0.0
    for x, y in zip(a.flat(), b.flat()):
        total += (x - y) ** 2
    assert dc.param_distance_sq(a, b) == pytest.approx(total, rel=1e-14)


def test_distance_requires_same_structure():
    with pytest.raises(ShapeMismatch):
        dc.param_distance_sq(pv(a=[1.0]), pv(b=[1.0]))


# finite_diff_check --------------------------------------------------------


def test_finite_diff_exact_for_quadratics():
    params = pv(p=np.linspace(-2, 2, 9))
    assert dc.finite_diff_check(half_sq, params, None) <= 1e-8


def test_finite_diff_flags_a_wrong_gradient():
    def doubled(t, _):
        # value 0.5*sum(p^2) but gradient 2p, through a custom node
        p = t["p"]
        out = dc._node(np.array(0.5 * np.sum(p.data ** 2)), (p,),
                       lambda g: (2.0 * g * p.data,))
        return out

    assert dc.finite_diff_check(doubled, pv(p=[1.0, -0.5, 2.0]), None) >= 0.1


def test_finite_diff_subsamples_large_models():
    params = pv(p=np.ones(1000))
    calls = []

    def fn(t, _):
        calls.append(1)
        return (t["p"] * t["p"]).sum()

    dc.finite_diff_check(fn, params, None, max_coords=256)
    assert len(calls) == 1 + 2 * 256


def test_finite_diff_rejects_bad_eps():
    with pytest.raises(ValueError):
        dc.finite_diff_check(half_sq, pv(p=[1.0]), None, eps=0.1)


# vector-space properties --------------------------------------------------

vec = arrays(np.float64, 6, elements=st.floats(-1e3, 1e3))


@settings(max_examples=60, deadline=None)
@given(vec, vec, vec, st.floats(-10, 10), st.floats(-10, 10))
def test_param_vector_axioms(x, y, z, s, t):
    a, b, c = pv(e=x[:4], d=x[4:]), pv(e=y[:4], d=y[4:]), pv(e=z[:4], d=z[4:])
    close = lambda u, v: np.allclose(u.flat(), v.flat(), rtol=1e-12, atol=1e-9)
    assert close(a + b, b + a)
    assert close((a + b) + c, a + (b + c))
    assert close(a + a.zeros_like(), a)
    assert close(a - a, a.zeros_like())
    assert close((a + b) * s, a * s + b * s)
    assert close(a * (s + t), a * s + a * t)
    assert dc.param_distance_sq(a, b) == pytest.approx(dc.param_distance_sq(b, a), rel=1e-12)
    assert dc.param_distance_sq(a, b) == pytest.approx((a - b).dot(a - b), rel=1e-12, abs=1e-12)


def test_param_vector_round_trips():
    a = pv(encoder=[1.5, -2.0], decoder=[0.1])
    assert dc.ParamVector.from_dict(a.to_dict()).equals(a)
    assert dc.ParamVector.from_flat(a, a.flat()).equals(a)
    assert a.total_dim == 3 and a.names == ("encoder", "decoder")


def test_tensor_backward_accumulates_through_shared_nodes():
    x = dc.Tensor(np.array([2.0]), requires_grad=True)
    y = x * x + x * 3.0
    y.sum().backward()
    np.testing.assert_allclose(x.grad, [7.0])
