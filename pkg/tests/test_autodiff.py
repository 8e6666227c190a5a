from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from voxedit.autodiff import (
    Tape,
    check_gradients,
    cosine_matrix,
    evaluate,
    finite_difference,
    forward_backward,
    relative_error,
    softmax,
    stable_sigmoid,
)
from voxedit.errors import NumericalError


def _scalar(tape, node, target):
    """Scalar readout of any 2-D node: mean squared distance to a constant."""
    return tape.mean(tape.sq_dist(node, tape.const(target)))


def _check(build, params, tol=1e-6):
    report = check_gradients(build, params, h=1e-5, tol=tol)
    assert report.passed, report.format()


# -- numeric helpers ----------------------------------------------------------

def test_softmax_two_logits():
    assert_allclose(softmax(np.array([1.0, 0.0])), [0.7310585786, 0.2689414214], rtol=1e-9)


def test_softmax_shift_invariant_and_large():
    z = np.array([1000.0, 999.0, -5.0])
    assert_allclose(softmax(z), softmax(z - 1000.0))
    assert np.all(np.isfinite(softmax(z)))


def test_sigmoid_values():
    assert stable_sigmoid(3.0) == pytest.approx(0.9525741268, rel=1e-9)
    assert stable_sigmoid(0.0) == 0.5
    assert_allclose(stable_sigmoid(np.array([-800.0, 800.0])), [0.0, 1.0])


def test_cosine_matrix_oracle():
    rng = np.random.default_rng(0)
    q, s = rng.standard_normal((3, 4)), rng.standard_normal((5, 4))
    got = cosine_matrix(q, s)
    for i in range(3):
        for j in range(5):
            ref = q[i] @ s[j] / ((np.linalg.norm(q[i]) + 1e-8) * (np.linalg.norm(s[j]) + 1e-8))
            assert got[i, j] == pytest.approx(ref, rel=1e-12)


def test_kl_of_point_mass_against_uniform():
    tape = Tape()
    p = tape.const([[1.0, 0.0]])
    q = tape.const([[0.5, 0.5]])
    assert tape.kl(p, q).value[0] == pytest.approx(math.log(2.0), rel=1e-12)


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-10, 0.0) == pytest.approx(1e-2)
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)


# -- per-op gradients ---------------------------------------------------------

@pytest.fixture
def rng():
    return np.random.default_rng(11)


def test_affine_relu_gradients(rng):
    params = {"x": rng.standard_normal((3, 4)), "W": rng.standard_normal((5, 4)), "b": rng.standard_normal(5)}
    target = rng.standard_normal((3, 5))
    _check(lambda t, p: _scalar(t, t.relu(t.affine(p["x"], p["W"], p["b"])), target), params)


def test_gather_gradient_accumulates_repeats(rng):
    params = {"T": rng.standard_normal((4, 3))}
    target = rng.standard_normal((5, 3))
    ids = [0, 2, 2, 3, 0]
    _check(lambda t, p: _scalar(t, t.gather(p["T"], ids), target), params)
    _, g = forward_backward(lambda t, p: _scalar(t, t.gather(p["T"], ids), target), params)
    assert_array_equal(g["T"][1], 0.0)


def test_cosine_softmax_slotsum_gradients(rng):
    params = {"q": rng.standard_normal((3, 4)), "K": rng.standard_normal((6, 4)), "V": rng.standard_normal((6, 4))}
    target = rng.standard_normal((3, 4))

    def build(t, p):
        w = t.softmax(t.cosine(p["q"], p["K"]), scale=2.5)
        return _scalar(t, t.slot_sum(w, p["V"]), target)

    _check(build, params)


def test_sigmoid_concat_mix_gradients(rng):
    params = {"a": rng.standard_normal((3, 2)), "b": rng.standard_normal((3, 2)), "z": rng.standard_normal((3, 1))}
    target = rng.standard_normal((3, 4))

    def build(t, p):
        m = t.mix(t.sigmoid(p["z"]), p["a"], p["b"])
        return _scalar(t, t.concat([m, t.add(p["a"], p["b"])]), target)

    _check(build, params)


def test_kl_lincomb_reparam_gradients(rng):
    params = {"x": rng.standard_normal((2, 5)), "y": rng.standard_normal((2, 5)),
              "mu": rng.standard_normal((2, 1)), "lv": rng.standard_normal((2, 1))}
    eps = rng.standard_normal((2, 1))
    target = rng.standard_normal((2, 1))

    def build(t, p):
        kl = t.mean(t.kl(t.softmax(p["x"]), t.softmax(p["y"])))
        r = _scalar(t, t.reparam(p["mu"], p["lv"], eps), target)
        return t.lincomb([3.0, 0.5], [kl, r])

    _check(build, params)


@settings(max_examples=25, deadline=None)
@given(B=st.integers(1, 4), M=st.integers(1, 5), D=st.integers(2, 5), tau=st.floats(0.5, 5.0),
       seed=st.integers(0, 2**31))
def test_readout_gradient_random_shapes(B, M, D, tau, seed):
    r = np.random.default_rng(seed)
    params = {"q": r.standard_normal((B, D)) + 0.1, "K": r.standard_normal((M, D)), "V": r.standard_normal((M, D))}
    target = r.standard_normal((B, D))

    def build(t, p):
        w = t.softmax(t.cosine(p["q"], p["K"]), scale=tau)
        return _scalar(t, t.slot_sum(w, p["V"]), target)

    _, analytic = forward_backward(build, params)
    numeric = finite_difference(lambda p: evaluate(build, p), params)
    for k in params:
        assert_allclose(analytic[k], numeric[k], rtol=1e-5, atol=1e-8)


# -- tape behaviour -----------------------------------------------------------

def test_tape_order_invariants(rng):
    tape = Tape()
    x = tape.param("x", rng.standard_normal((2, 3)))
    y = tape.relu(tape.affine(x, tape.const(rng.standard_normal((3, 3)))))
    tape.mean(tape.sq_dist(y, x))
    for n in tape.nodes:
        assert all(p.index < n.index for p in n.parents)
    assert [n.index for n in tape.nodes] == list(range(len(tape.nodes)))


def test_unused_param_gets_zero_gradient(rng):
    params = {"x": rng.standard_normal((2, 2)), "unused": rng.standard_normal(3)}
    _, g = forward_backward(lambda t, p: t.mean(t.sq_dist(p["x"], t.const(np.zeros((2, 2))))), params)
    assert_array_equal(g["unused"], np.zeros(3))
    assert_allclose(g["x"], params["x"])  # d/dx mean_i |x_i|^2 = 2 x / 2


def test_relu_subgradient_zero_at_kink():
    params = {"x": np.array([[0.0, 1.0, -1.0]])}
    _, g = forward_backward(lambda t, p: t.mean(t.sq_dist(t.relu(p["x"]), t.const([[-1.0, 0.0, 0.0]]))), params)
    assert_array_equal(g["x"], [[0.0, 2.0, 0.0]])


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_value_names_node():
    tape = Tape()
    x = tape.param("x", np.array([[1e300]]))
    with pytest.raises(NumericalError, match="sq_dist"):
        tape.sq_dist(x, tape.const([[-1e300]]))


def test_backward_needs_scalar():
    tape = Tape()
    x = tape.param("x", np.ones((2, 2)))
    with pytest.raises(ValueError):
        tape.backward(x)


def test_duplicate_param_rejected():
    tape = Tape()
    tape.param("x", 1.0)
    with pytest.raises(ValueError):
        tape.param("x", 2.0)


def test_finite_difference_leaves_params_untouched(rng):
    params = {"x": rng.standard_normal((2, 3))}
    before = params["x"].copy()
    fd = finite_difference(lambda p: float(np.sum(p["x"] ** 3)), params)
    assert_array_equal(params["x"], before)
    # central difference of x^3 is exactly 3x^2 + h^2
    assert_allclose(fd["x"], 3 * before**2 + 1e-10, rtol=1e-8, atol=1e-9)


def test_check_gradients_detects_wrong_gradient(rng):
    params = {"x": rng.standard_normal((2, 3))}

    def build(t, p):
        return t.mean(t.sq_dist(p["x"], t.const(np.zeros((2, 3)))))

    # oracle computes a different function: its gradient must disagree
    report = check_gradients(build, params, oracle=lambda p: float(np.sum(p["x"] ** 2)))
    assert not report.passed
    assert check_gradients(build, params, oracle=lambda p: float(np.sum(p["x"] ** 2)) / 2).passed


def test_evaluate_matches_forward_backward(rng):
    params = {"x": rng.standard_normal((2, 3))}

    def build(t, p):
        return t.mean(t.sq_dist(t.sigmoid(p["x"]), t.const(np.ones((2, 3)))))

    assert evaluate(build, params) == forward_backward(build, params)[0]
