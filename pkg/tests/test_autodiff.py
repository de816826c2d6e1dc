"""Tape correctness: finite-difference oracles, re-running, determinism."""

import numpy as np
import pytest

from cdd.autodiff import GradCheckReport, Tape, TapeError, grad_check


def fd_grad(fn, x, step=1e-6):
    """Central-difference gradient of a scalar fn at x, elementwise."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + step
        hi = fn(x)
        flat[i] = saved - step
        lo = fn(x)
        flat[i] = saved
        gflat[i] = (hi - lo) / (2.0 * step)
    return g


def test_add_mul_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    for trial in range(5):
        a0 = rng.normal(size=(3, 4))
        b0 = rng.normal(size=(3, 4))
        tape = Tape()
        a = tape.input("a", a0)
        b = tape.input("b", b0)
        out = tape.sum(tape.mul(tape.add(a, b), a))
        grads = tape.backward(out, ["a", "b"])
        ga = fd_grad(lambda x: ((x + b0) * x).sum(), a0)
        gb = fd_grad(lambda x: ((a0 + x) * a0).sum(), b0)
        np.testing.assert_allclose(grads["a"], ga, atol=1e-7)
        np.testing.assert_allclose(grads["b"], gb, atol=1e-7)


def test_broadcast_add_gradient_sums_over_broadcast_axes():
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=(5, 3))
    b0 = rng.normal(size=(3,))
    tape = Tape()
    x = tape.input("x", x0)
    b = tape.input("b", b0)
    out = tape.sum(tape.square(tape.add(x, b)))
    grads = tape.backward(out, ["x", "b"])
    assert grads["b"].shape == (3,)
    np.testing.assert_allclose(grads["b"], fd_grad(lambda v: ((x0 + v) ** 2).sum(), b0), atol=1e-6)
    np.testing.assert_allclose(grads["x"], fd_grad(lambda v: ((v + b0) ** 2).sum(), x0), atol=1e-6)


def test_matmul_and_affine_gradients():
    rng = np.random.default_rng(2)
    x0 = rng.normal(size=(4, 3))
    w0 = rng.normal(size=(3, 2))
    b0 = rng.normal(size=(2,))
    tape = Tape()
    x = tape.input("x", x0)
    w = tape.input("w", w0)
    b = tape.input("b", b0)
    out = tape.sum(tape.tanh(tape.affine(x, w, b)))
    grads = tape.backward(out, ["x", "w", "b"])
    np.testing.assert_allclose(
        grads["w"], fd_grad(lambda v: np.tanh(x0 @ v + b0).sum(), w0), atol=1e-6
    )
    np.testing.assert_allclose(
        grads["b"], fd_grad(lambda v: np.tanh(x0 @ w0 + v).sum(), b0), atol=1e-6
    )
    np.testing.assert_allclose(
        grads["x"], fd_grad(lambda v: np.tanh(v @ w0 + b0).sum(), x0), atol=1e-6
    )

    tape2 = Tape()
    a = tape2.input("a", x0)
    m = tape2.input("m", w0)
    out2 = tape2.sum(tape2.matmul(a, m))
    g2 = tape2.backward(out2, ["a", "m"])
    np.testing.assert_allclose(g2["a"], np.ones((4, 2)) @ w0.T, atol=1e-12)
    np.testing.assert_allclose(g2["m"], x0.T @ np.ones((4, 2)), atol=1e-12)


def test_huber_values_and_gradient():
    # 0.5 a^2 inside the threshold, delta * (|a| - delta / 2) outside
    tape = Tape()
    a = tape.input("a", np.array([0.3, -2.0, 1.0]))
    h = tape.huber(a, delta=1.0)
    np.testing.assert_allclose(h.value, [0.045, 1.5, 0.5], atol=1e-15)
    grads = tape.backward(tape.sum(h), ["a"])
    np.testing.assert_allclose(grads["a"], [0.3, -1.0, 1.0], atol=1e-15)


def test_mean_concat_blend_gradients():
    rng = np.random.default_rng(3)
    a0 = rng.normal(size=(2, 3))
    b0 = rng.normal(size=(2, 2))
    c0 = rng.normal(size=(2, 5))
    mu0 = 0.3

    def scalar(a, b, c, mu):
        cat = np.concatenate([a, b], axis=1)
        return (((1.0 - mu) * cat + mu * c) ** 2).mean()

    tape = Tape()
    a = tape.input("a", a0)
    b = tape.input("b", b0)
    c = tape.input("c", c0)
    mu = tape.input("mu", mu0)
    out = tape.mean(tape.square(tape.blend(tape.concat([a, b], axis=1), c, mu)))
    grads = tape.backward(out, ["a", "b", "c", "mu"])
    np.testing.assert_allclose(grads["a"], fd_grad(lambda v: scalar(v, b0, c0, mu0), a0), atol=1e-6)
    np.testing.assert_allclose(grads["b"], fd_grad(lambda v: scalar(a0, v, c0, mu0), b0), atol=1e-6)
    np.testing.assert_allclose(grads["c"], fd_grad(lambda v: scalar(a0, b0, v, mu0), c0), atol=1e-6)
    fd_mu = (scalar(a0, b0, c0, mu0 + 1e-6) - scalar(a0, b0, c0, mu0 - 1e-6)) / 2e-6
    np.testing.assert_allclose(float(grads["mu"]), fd_mu, atol=1e-6)


def test_forward_rerun_matches_fresh_computation():
    rng = np.random.default_rng(4)
    tape = Tape()
    x = tape.input("x", rng.normal(size=(3, 2)))
    w = tape.const(rng.normal(size=(2, 2)))
    tape.output("y", tape.mean(tape.tanh(tape.matmul(x, w))))
    x_new = rng.normal(size=(3, 2))
    got = tape.forward({"x": x_new})["y"]
    np.testing.assert_allclose(got, np.tanh(x_new @ w.value).mean(), atol=1e-15)


def test_forward_rejects_unknown_missing_and_misshapen_inputs():
    tape = Tape()
    x = tape.input("x", np.zeros((2, 2)))
    tape.output("y", tape.sum(tape.square(x)))
    with pytest.raises(TapeError):
        tape.forward({"x": np.zeros((2, 2)), "bogus": np.zeros(2)})
    with pytest.raises(TapeError):
        tape.forward({})
    with pytest.raises(TapeError):
        tape.forward({"x": np.zeros((3, 2))})


def test_backward_requires_scalar_output():
    tape = Tape()
    x = tape.input("x", np.ones((2, 2)))
    y = tape.square(x)
    with pytest.raises(TapeError):
        tape.backward(y, ["x"])


def test_non_finite_input_rejected():
    tape = Tape()
    with pytest.raises(TapeError):
        tape.input("x", np.array([1.0, np.nan]))
    with pytest.raises(TapeError):
        tape.const(np.array([np.inf]))


def test_unreached_input_gets_zero_gradient():
    tape = Tape()
    x = tape.input("x", np.ones(3))
    unused = tape.input("u", np.ones((2, 2)))
    out = tape.sum(tape.square(x))
    grads = tape.backward(out, ["x", "u"])
    np.testing.assert_allclose(grads["x"], 2.0 * np.ones(3))
    assert grads["u"].shape == (2, 2)
    assert np.all(grads["u"] == 0.0)


def test_backward_is_bit_deterministic():
    rng = np.random.default_rng(5)
    tape = Tape()
    x = tape.input("x", rng.normal(size=(6, 4)))
    w1 = tape.input("w1", rng.normal(size=(4, 8)))
    w2 = tape.input("w2", rng.normal(size=(8, 1)))
    h = tape.tanh(tape.matmul(x, w1))
    out = tape.mean(tape.square(tape.matmul(h, w2)))
    g1 = tape.backward(out, ["x", "w1", "w2"])
    g2 = tape.backward(out, ["x", "w1", "w2"])
    for k in g1:
        assert np.array_equal(g1[k], g2[k])


def test_grad_check_passes_on_mlp_composite():
    rng = np.random.default_rng(6)
    tape = Tape()
    x = tape.const(rng.normal(size=(5, 3)))
    w1 = tape.input("w1", rng.normal(size=(3, 7)))
    b1 = tape.input("b1", rng.normal(size=(7,)))
    w2 = tape.input("w2", rng.normal(size=(7, 2)))
    mu = tape.input("mu", 0.25)
    h = tape.tanh(tape.affine(x, w1, b1))
    y = tape.matmul(h, w2)
    target = tape.const(rng.normal(size=(5, 2)))
    loss = tape.output("loss", tape.mean(tape.huber(tape.sub(tape.blend(y, target, mu), target))))
    for name in ["w1", "b1", "w2", "mu"]:
        report = grad_check(tape, "loss", name)
        assert isinstance(report, GradCheckReport)
        assert report.passed, f"{name}: max_rel_err={report.max_rel_err}"
        assert report.max_rel_err <= 1e-4


def test_grad_check_flags_a_corrupted_backward_rule():
    class BrokenTape(Tape):
        def _partials(self, node, g):
            outs = super()._partials(node, g)
            if node.op == "tanh":
                outs = [outs[0] * 1.01]
            return outs

    rng = np.random.default_rng(7)
    tape = BrokenTape()
    x = tape.input("x", rng.normal(size=(4, 3)))
    tape.output("y", tape.sum(tape.tanh(x)))
    report = grad_check(tape, "y", "x")
    assert not report.passed
    assert report.max_rel_err > 1e-4


def test_duplicate_input_name_rejected():
    tape = Tape()
    tape.input("x", 1.0)
    with pytest.raises(TapeError):
        tape.input("x", 2.0)


def test_mixing_tapes_rejected():
    t1, t2 = Tape(), Tape()
    a = t1.input("a", 1.0)
    b = t2.input("b", 2.0)
    with pytest.raises(TapeError):
        t1.add(a, b)


def test_shape_errors_name_the_offending_node():
    tape = Tape()
    a = tape.input("a", np.ones((2, 3)))
    b = tape.input("b", np.ones((4, 2)))
    with pytest.raises(TapeError, match="node"):
        tape.matmul(a, b)
    with pytest.raises(TapeError, match="node"):
        tape.add(a, tape.const(np.ones((7, 7))))
