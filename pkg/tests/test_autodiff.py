"""Gradient fidelity of every primitive against central finite differences,
plus Adam behavior. All checks run in float64 so truncation error is the
only discrepancy."""

import numpy as np
import pytest

from prtgrad import autodiff as ad
from prtgrad.errors import InvalidInputError, NumericalError

RNG = np.random.default_rng(42)


def fd_check(build, params, h=1e-6, tol=1e-6):
    """build(list_of_Vars) -> (tape, loss). Checks every entry of every
    parameter against central differences."""
    tape = ad.Tape()
    leaves = [tape.leaf(p) for p in params]
    loss = build(tape, leaves)
    grads = ad.backward(tape, loss)
    for leaf, p in zip(leaves, params):
        g = grads[leaf.node_id]
        assert g.shape == p.shape
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + h
            t2 = ad.Tape()
            lp = build(t2, [t2.leaf(q) for q in params])
            p[idx] = orig - h
            t3 = ad.Tape()
            lm = build(t3, [t3.leaf(q) for q in params])
            p[idx] = orig
            fd = (float(lp.value) - float(lm.value)) / (2 * h)
            an = g[idx]
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
            assert rel < tol, f"{idx}: analytic {an} vs fd {fd} (rel {rel:.2e})"


def test_constant_loss_gives_zero_gradients():
    tape = ad.Tape()
    p = tape.leaf(RNG.normal(size=4))
    loss = ad.reduce_sum(ad.mul(p, ad.constant(np.zeros(4))))
    grads = ad.backward(tape, loss)
    assert np.array_equal(grads[p.node_id], np.zeros(4))


def test_sum_of_squares_gradient_closed_form():
    tape = ad.Tape()
    p = tape.leaf(np.array([1.0, -2.0, 3.0]))
    loss = ad.reduce_sum(ad.mul(p, p))
    grads = ad.backward(tape, loss)
    assert np.allclose(grads[p.node_id], [2.0, -4.0, 6.0], rtol=0, atol=0)


@pytest.mark.parametrize("op,shapes", [
    ("add", [(3, 4), (3, 4)]),
    ("add_broadcast", [(3, 4), (4,)]),
    ("sub", [(3, 4), (3, 4)]),
    ("mul", [(3, 4), (3, 4)]),
    ("mul_broadcast", [(3, 4, 2), (3, 1, 2)]),
    ("matmul", [(3, 4), (4, 2)]),
])
def test_binary_primitives_match_finite_differences(op, shapes):
    params = [RNG.normal(size=s) for s in shapes]
    fns = {"add": ad.add, "add_broadcast": ad.add, "sub": ad.sub,
           "mul": ad.mul, "mul_broadcast": ad.mul, "matmul": ad.matmul}

    def build(tape, leaves):
        out = fns[op](leaves[0], leaves[1])
        return ad.reduce_sum(ad.mul(out, ad.constant(np.ones_like(out.value) * 0.7)))

    fd_check(build, params)


@pytest.mark.parametrize("name", ["exp", "softplus", "sin", "cos", "relu", "neg"])
def test_unary_primitives_match_finite_differences(name):
    p = RNG.normal(size=(4, 3))
    if name == "relu":
        p = p + np.sign(p) * 0.2  # stay away from the kink

    def build(tape, leaves):
        out = getattr(ad, name)(leaves[0])
        return ad.reduce_sum(ad.mul(out, out))

    fd_check(build, [p])


def test_cumsum_exclusive_forward_and_gradient():
    x = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    out = ad.cumsum_exclusive(ad.constant(x), axis=1)
    assert np.array_equal(out.value, [[0, 1, 3], [0, 4, 9]])

    def build(tape, leaves):
        out = ad.cumsum_exclusive(leaves[0], axis=1)
        w = ad.constant(np.arange(6, dtype=float).reshape(2, 3) + 1)
        return ad.reduce_sum(ad.mul(out, w))

    fd_check(build, [RNG.normal(size=(2, 3))])


def test_reshape_concat_sum_axis_gradients():
    def build(tape, leaves):
        a = ad.reshape(leaves[0], (2, 6))
        b = ad.concat([a, leaves[1]], axis=1)
        s = ad.reduce_sum(b, axis=0)
        return ad.reduce_sum(ad.mul(s, s))

    fd_check(build, [RNG.normal(size=(3, 4)), RNG.normal(size=(2, 2))])


@pytest.mark.parametrize("activation", [None, "relu"])
def test_fused_linear_matches_finite_differences(activation):
    x = RNG.normal(size=(5, 3))
    w = RNG.normal(size=(3, 4))
    b = RNG.normal(size=(4,))
    if activation == "relu":
        b = b + 0.5  # keep most units clearly on or off

    def build(tape, leaves):
        out = ad.linear(leaves[0], leaves[1], leaves[2], activation=activation)
        return ad.reduce_sum(ad.mul(out, out))

    fd_check(build, [x, w, b], tol=1e-5)


def test_fused_linear2_matches_concat_form():
    x1 = RNG.normal(size=(5, 3))
    x2 = RNG.normal(size=(5, 2))
    w = RNG.normal(size=(5, 4))
    b = RNG.normal(size=(4,))
    fused = ad.linear2(ad.constant(x1), ad.constant(x2), ad.constant(w), ad.constant(b))
    ref = np.concatenate([x1, x2], axis=1) @ w + b
    assert np.allclose(fused.value, ref, rtol=1e-12, atol=0)

    def build(tape, leaves):
        out = ad.linear2(leaves[0], leaves[1], leaves[2], leaves[3])
        return ad.reduce_sum(ad.mul(out, out))

    fd_check(build, [x1, x2, w, b], tol=1e-5)


def test_chain_rule_composition_matches_jacobian_product():
    # f(g(p)) with g = sin(W p), f = sum(exp(.)); compare the tape gradient
    # against the explicit jacobian chain
    w = RNG.normal(size=(3, 3))
    p = RNG.normal(size=(3, 1))
    tape = ad.Tape()
    leaf = tape.leaf(p)
    g = ad.sin(ad.matmul(ad.constant(w), leaf))
    loss = ad.reduce_sum(ad.exp(g))
    grads = ad.backward(tape, loss)
    z = w @ p
    manual = w.T @ (np.exp(np.sin(z)) * np.cos(z))
    assert np.allclose(grads[leaf.node_id], manual, rtol=1e-12)


def test_no_gradient_flows_to_constants():
    tape = ad.Tape()
    p = tape.leaf(np.ones(3))
    c = ad.constant(np.array([1.0, 2.0, 3.0]))
    loss = ad.reduce_sum(ad.mul(p, c))
    grads = ad.backward(tape, loss)
    assert set(grads.keys()) == {p.node_id}
    assert np.array_equal(grads[p.node_id], c.value)


def test_stop_gradient_blocks_flow():
    tape = ad.Tape()
    p = tape.leaf(np.array([2.0]))
    frozen = ad.stop_gradient(ad.mul(p, p))
    loss = ad.reduce_sum(ad.mul(p, frozen))  # d/dp should see frozen as constant 4
    grads = ad.backward(tape, loss)
    assert np.allclose(grads[p.node_id], [4.0])


def test_tape_replay_reproduces_values_bitwise():
    tape = ad.Tape()
    p = tape.leaf(RNG.normal(size=(4, 4)))
    h = ad.relu(ad.matmul(p, p))
    out = ad.reduce_sum(ad.exp(ad.mul(h, 0.1)))
    del out
    assert tape.replay()


def test_backward_rejects_non_scalar_loss():
    tape = ad.Tape()
    p = tape.leaf(np.ones(3))
    vec = ad.mul(p, p)
    with pytest.raises(InvalidInputError):
        ad.backward(tape, vec)


def test_backward_identifies_non_finite_gradient_op():
    tape = ad.Tape()
    with np.errstate(over="ignore", invalid="ignore"):
        p = tape.leaf(np.array([1000.0]))
        loss = ad.reduce_sum(ad.exp(p))  # exp overflows to inf
        with pytest.raises(NumericalError, match="exp"):
            ad.backward(tape, loss, check_finite=True)


# ---------------------------------------------------------------------------
# Adam

def _params():
    return {"w": np.array([1.0, -2.0, 0.5]), "b": np.array([[0.3, 0.1]])}


def test_adam_zero_gradients_leave_params_unchanged():
    params = _params()
    before = {k: v.copy() for k, v in params.items()}
    state = ad.AdamState.for_params(params, lr=1e-2)
    state.m = {k: np.full_like(v, 0.25) for k, v in params.items()}
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    ad.adam_step(state, params, zeros)
    # v stays 0 -> denominator is eps, but m decayed from its seed; run with
    # fresh moments for the unchanged check
    params2 = _params()
    state2 = ad.AdamState.for_params(params2, lr=1e-2)
    ad.adam_step(state2, params2, {k: np.zeros_like(v) for k, v in params2.items()})
    for k in params2:
        assert np.array_equal(params2[k], before[k])
    assert state.m["w"][0] == 0.25 * 0.9  # first moment decays toward zero


def test_adam_constant_gradient_update_magnitude_approaches_lr():
    # direct evaluation of the Adam recurrence: with g = 1 the bias-corrected
    # moments converge to 1, so each step moves by ~lr
    params = {"w": np.zeros(4)}
    state = ad.AdamState.for_params(params, lr=3e-3)
    ones = {"w": np.ones(4)}
    prev = params["w"].copy()
    for _ in range(2000):
        prev = params["w"].copy()
        ad.adam_step(state, params, ones)
    step_size = np.abs(params["w"] - prev)
    assert np.allclose(step_size, state.lr, rtol=1e-3)


def test_adam_two_runs_bit_identical():
    rng = np.random.default_rng(3)
    grads_seq = [rng.normal(size=3) for _ in range(50)]

    def run():
        params = {"w": np.array([0.1, 0.2, 0.3])}
        state = ad.AdamState.for_params(params, lr=1e-3)
        for g in grads_seq:
            ad.adam_step(state, params, {"w": g})
        return params["w"]

    assert np.array_equal(run(), run())


def test_adam_shape_mismatch_raises():
    params = _params()
    state = ad.AdamState.for_params(params)
    bad = {"w": np.zeros(2), "b": np.zeros((1, 2))}
    with pytest.raises(InvalidInputError):
        ad.adam_step(state, params, bad)
