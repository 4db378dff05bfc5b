import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hvp import autodiff as ad
from hvp.errors import DimensionError, NumericError
from hvp.gradcheck import directional_rel_err
from hvp.nn import (AdamState, Mlp, adam_step, init_mlp, input_jacobian, lipschitz_bound,
                    mlp_forward)

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def test_backward_square():
    tape = ad.Tape()
    w = tape.watch("w", np.array([3.0]))
    assert ad.backward(tape, ad.sum(w * w))["w"] == pytest.approx([6.0])


def test_backward_constant_output_gives_zero():
    tape = ad.Tape()
    w = tape.watch("w", np.array([3.0, -1.0]))
    out = ad.sum(w * 0.0) + 4.0
    np.testing.assert_array_equal(ad.backward(tape, out)["w"], [0.0, 0.0])


def test_untracked_leaf_gets_zero_gradient():
    tape = ad.Tape()
    a = tape.watch("a", np.ones(2))
    tape.watch("b", np.ones(3))
    g = ad.backward(tape, ad.sum(a))
    np.testing.assert_array_equal(g["b"], np.zeros(3))


def test_ops_without_tape_return_arrays():
    x = np.array([[1.0, 2.0]])
    out = ad.sum(ad.silu(x) * ad.exp(x))
    assert isinstance(out, np.ndarray) or np.isscalar(out)


def test_matmul_shape_mismatch_raises():
    tape = ad.Tape()
    with pytest.raises((DimensionError, ValueError)):
        tape.watch("a", np.ones((2, 3))) @ np.ones((2, 2))


def test_watch_same_name_returns_same_leaf():
    tape = ad.Tape()
    assert tape.watch("a", np.ones(2)) is tape.watch("a", np.zeros(2))


UNARY = {
    "exp": ad.exp, "tanh": ad.tanh, "sigmoid": ad.sigmoid, "silu": ad.silu, "square": ad.square,
    "softmax": lambda v: ad.softmax(v, axis=-1) * np.arange(1.0, 4.0),
    "logsumexp": lambda v: ad.logsumexp(v, axis=-1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=20, deadline=None)
@given(x=arrays(np.float64, (2, 3), elements=finite))
def test_unary_op_gradients_match_finite_differences(name, x):
    f = UNARY[name]
    tape = ad.Tape()
    g = ad.backward(tape, ad.sum(f(tape.watch("x", x))))
    err = directional_rel_err(lambda p: float(np.sum(ad.value(f(p["x"])))), g, {"x": x},
                              np.random.default_rng(0), h=1e-6)
    assert err < 1e-4


@settings(max_examples=20, deadline=None)
@given(a=arrays(np.float64, (3, 2), elements=finite), b=arrays(np.float64, (2,), elements=finite))
def test_broadcast_binary_gradients(a, b):
    def f(p):
        return (ad.sum(ad.square(p["a"] * p["b"] - p["b"] / (1.5 + ad.square(p["a"]))))
                + ad.sum(p["a"] @ p["b"]))

    tape = ad.Tape()
    g = ad.backward(tape, f({"a": tape.watch("a", a), "b": tape.watch("b", b)}))
    err = directional_rel_err(lambda p: float(ad.value(f(p))), g, {"a": a, "b": b},
                              np.random.default_rng(1), h=1e-6)
    assert err < 1e-4


def test_single_linear_layer_forward():
    net = Mlp("f", (1, 1), {"W0": np.array([[2.0]]), "b0": np.array([1.0])})
    np.testing.assert_array_equal(mlp_forward(net, np.array([[3.0]])), [[7.0]])


@given(x=arrays(np.float64, (4, 3), elements=finite))
def test_zero_last_layer_outputs_zero(x):
    net = init_mlp("f", (3, 8, 2), np.random.default_rng(0))
    np.testing.assert_array_equal(mlp_forward(net, x), np.zeros((4, 2)))


def test_golden_forward_2_16_2():
    # frozen from the first verified run
    net = init_mlp("f", (2, 16, 2), np.random.default_rng(0), zero_last=False)
    out = mlp_forward(net, np.array([[1.0, 0.0]]))
    np.testing.assert_allclose(out, [[0.08416457260980878, 0.19753680988565117]], rtol=1e-12)


def test_forward_is_pure():
    net = init_mlp("f", (3, 5, 2), np.random.default_rng(1), zero_last=False)
    x = np.random.default_rng(2).normal(size=(4, 3))
    before = {k: v.copy() for k, v in net.params.items()}
    a, b = mlp_forward(net, x), mlp_forward(net, x)
    np.testing.assert_array_equal(a, b)
    for k in before:
        np.testing.assert_array_equal(before[k], net.params[k])


def test_input_jacobian_matches_finite_differences():
    rng = np.random.default_rng(3)
    net = init_mlp("f", (3, 6, 2), rng, zero_last=False)
    x = rng.normal(size=(1, 3))
    J = input_jacobian(net, x)[0]
    h = 1e-6
    fd = np.stack([(mlp_forward(net, x + h * e) - mlp_forward(net, x - h * e))[0] / (2 * h)
                   for e in np.eye(3)], axis=1)
    np.testing.assert_allclose(J, fd, rtol=1e-6, atol=1e-8)


def test_lipschitz_bound_dominates_jacobian_norm():
    rng = np.random.default_rng(4)
    net = init_mlp("f", (4, 8, 4), rng, zero_last=False)
    x = rng.normal(size=(50, 4))
    norms = [np.linalg.norm(J, 2) for J in input_jacobian(net, x)]
    assert max(norms) <= lipschitz_bound(net) + 1e-12


@given(p=arrays(np.float64, (3,), elements=finite))
def test_adam_zero_gradient_is_identity(p):
    out = adam_step(AdamState(lr=0.1), {"w": p}, {"w": np.zeros(3)})
    np.testing.assert_array_equal(out["w"], p)


def test_adam_first_step_moves_by_lr():
    out = adam_step(AdamState(lr=0.01), {"w": np.array([1.0])}, {"w": np.array([3.0])})
    assert out["w"][0] == pytest.approx(1.0 - 0.01, abs=1e-8)


def test_adam_quadratic_descent():
    st_ = AdamState(lr=0.1)
    p = {"w": np.array([0.0])}
    for _ in range(100):
        p = adam_step(st_, p, {"w": 2 * (p["w"] - 5.0)})
    assert abs(p["w"][0] - 5.0) < 0.5


def test_adam_rejects_nonfinite_gradient():
    with pytest.raises(NumericError):
        adam_step(AdamState(), {"w": np.ones(1)}, {"w": np.array([np.nan])})
