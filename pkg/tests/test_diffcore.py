import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ppsebm.diffcore import (Adam, NonFiniteError, Rng, ShapeError, Tape, Tensor,
                             analytic_grad, finite_diff_check, numeric_grad, ops)


def test_softmax_uniform_on_equal_logits():
    np.testing.assert_allclose(ops.softmax(np.zeros(3)).data, [1 / 3] * 3, atol=1e-15)


def test_matmul_identity():
    v = np.array([1.5, -2.0, 0.25])
    np.testing.assert_array_equal(ops.matmul(np.eye(3), v).data, v)


def test_softmax_sums_to_one_over_seeded_draws():
    rng = Rng(0)
    for i in range(100):
        z = rng.child(i).gaussian(8) * 5
        assert abs(ops.softmax(z).data.sum() - 1.0) <= 1e-12


def test_backward_of_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.mul(x, x))
    np.testing.assert_array_equal(tape.backward(loss)[x], [2.0, 4.0])


def test_logsumexp_gradient_is_softmax():
    rng = Rng(1)
    for i in range(20):
        z = rng.child(i).gaussian(7) * 3
        g = analytic_grad(lambda t: ops.logsumexp(t), z)
        np.testing.assert_allclose(g, ops.softmax_np(z), atol=1e-14)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ops.scale(x, 2.0)
    with pytest.raises(ShapeError):
        tape.backward(y)


def test_tape_is_consumed():
    x = Tensor(1.0, requires_grad=True)
    with Tape() as tape:
        y = ops.mul(x, x)
    tape.backward(y)
    with pytest.raises(RuntimeError):
        tape.backward(y)


def test_shape_mismatch_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        ops.add(np.ones((2, 3)), np.ones(4))
    with pytest.raises(ShapeError, match="matmul"):
        ops.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_non_finite_output_rejected():
    with pytest.raises(NonFiniteError):
        ops.log(np.array([0.0, 1.0]))
    with pytest.raises(NonFiniteError):
        ops.exp(np.array([1000.0]))


def test_no_recording_without_grad_inputs():
    with Tape() as tape:
        ops.add(np.ones(2), np.ones(2))
    assert tape.nodes == []


def test_gradient_accumulates_over_reuse():
    x = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        y = ops.add(ops.mul(x, x), ops.scale(x, 2.0))
    assert tape.backward(y)[x] == pytest.approx(8.0)


def _composed(params):
    w1, w2 = params

    def f(x):
        h = ops.tanh(ops.matmul(x, w1))
        out = ops.log_softmax(ops.matmul(h, w2))
        return ops.mean(ops.sum(ops.mul(ops.exp(out), out), axis=1))

    return f


def test_composed_network_matches_finite_differences():
    rng = Rng(2)
    for i in range(10):
        r = rng.child(i)
        f = _composed((r.gaussian((4, 5)), r.gaussian((5, 3))))
        assert finite_diff_check(f, r.gaussian((2, 4))) <= 1e-4


@pytest.mark.parametrize("op", [
    lambda t: ops.sum(ops.tanh(t)),
    lambda t: ops.sum(ops.sigmoid(t)),
    lambda t: ops.sum(ops.mul(ops.softmax(t), np.arange(6.0).reshape(2, 3))),
    lambda t: ops.sum(ops.log(ops.exp(t))),
    lambda t: ops.sum(ops.mul(ops.concat([t, ops.scale(t, 2.0)], axis=1), 1.5)),
    lambda t: ops.sum(ops.pick(ops.log_softmax(t), np.array([0, 2]))),
    lambda t: ops.sum(ops.mul(ops.gather_rows(t, np.array([[1, 0], [1, 1]])), 2.0)),
    lambda t: ops.sum(ops.index(ops.reshape(t, (3, 2)), (slice(1, None), 0))),
    lambda t: ops.mean(ops.sub(t, ops.sum(t, axis=0))),
])
def test_primitive_gradients(op):
    x = Rng(3).gaussian((2, 3))
    assert finite_diff_check(op, x) <= 1e-6


def test_gru_sequence_gradients():
    rng = Rng(4)
    B, T, I, H = 2, 4, 3, 5
    x0, h0 = rng.gaussian((B, T, I)), rng.gaussian((B, H))
    w, u, b = rng.gaussian((I, 3 * H)), rng.gaussian((H, 3 * H)), rng.gaussian(3 * H)
    probe = rng.gaussian((B, T, H))
    out = lambda hs: ops.sum(ops.mul(hs, probe))  # noqa: E731
    assert finite_diff_check(lambda t: out(ops.gru_sequence(t, h0, w, u, b)), x0) <= 1e-6
    assert finite_diff_check(lambda t: out(ops.gru_sequence(x0, t, w, u, b)), h0) <= 1e-6
    assert finite_diff_check(lambda t: out(ops.gru_sequence(x0, h0, t, u, b)), w) <= 1e-6
    assert finite_diff_check(lambda t: out(ops.gru_sequence(x0, h0, w, t, b)), u) <= 1e-6
    assert finite_diff_check(lambda t: out(ops.gru_sequence(x0, h0, w, u, t)), b) <= 1e-6


def test_finite_diff_check_contract():
    with pytest.raises(ValueError):
        finite_diff_check(lambda t: ops.sum(t), np.ones(2), eps=0.0)
    with pytest.raises(NonFiniteError):
        finite_diff_check(lambda t: ops.sum(ops.log(t)), np.array([1e-6]), eps=1e-5)
    # A deliberately wrong gradient is caught.
    def wrong(t):
        from ppsebm.diffcore.tensor import make_output
        return make_output(np.sum(t.data ** 2), (t,), lambda g: (g * t.data,))
    assert finite_diff_check(wrong, np.array([1.0, 2.0])) > 0.3


def test_numeric_grad_simple():
    np.testing.assert_allclose(numeric_grad(lambda t: ops.sum(ops.mul(t, t)), np.array([1.0, -3.0])),
                               [2.0, -6.0], atol=1e-8)


def test_rng_determinism_and_independence():
    a, b = Rng(7), Rng(7)
    np.testing.assert_array_equal(a.gaussian(5), b.gaussian(5))
    np.testing.assert_array_equal(a.child("x").uniform(shape=3), b.child("x").uniform(shape=3))
    assert not np.array_equal(Rng(7).child("x").gaussian(4), Rng(7).child("y").gaussian(4))
    # Streams are separate: drawing uniforms does not shift the gaussian stream.
    c = Rng(7)
    c.uniform(shape=10)
    np.testing.assert_array_equal(c.gaussian(5), Rng(7).gaussian(5))


def test_rng_uses_pcg64_with_hashed_path():
    from ppsebm.diffcore.rng import _key
    ss = np.random.SeedSequence(42, spawn_key=(_key("a"), _key("gaussian")))
    expected = np.random.Generator(np.random.PCG64(ss)).standard_normal(3)
    np.testing.assert_array_equal(Rng(42).child("a").gaussian(3), expected)


def test_rng_categorical_and_sampling():
    rng = Rng(5)
    p = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    np.testing.assert_array_equal(rng.categorical(p), [1, 0])
    idx = rng.sample_without_replacement(10, 10)
    assert sorted(idx.tolist()) == list(range(10))
    with pytest.raises(ValueError):
        rng.sample_without_replacement(3, 4)
    with pytest.raises(ValueError):
        Rng(-1)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=1, max_size=10))
def test_log_softmax_is_log_of_softmax(xs):
    x = np.array(xs)
    np.testing.assert_allclose(ops.log_softmax(x).data, np.log(ops.softmax(x).data), atol=1e-9)


def test_adam_moves_against_gradient_and_ignores_zero_grad():
    p = Tensor(np.array([1.0, 1.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    opt.step({p: np.array([1.0, 0.0])})
    assert p.data[0] < 1.0 and p.data[1] == 1.0
