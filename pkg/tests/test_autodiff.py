import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from regram.autodiff import AdamState, BatchNormState, Tape, Tensor, adam_step, batchnorm_1d, ops, softmax_temperature
from regram.autodiff.gradcheck import gradcheck
from regram.errors import ContractError, NonFiniteError, ShapeError

finite = st.floats(-50, 50, allow_nan=False)


def mish_ref(x: float) -> float:
    mpmath.mp.dps = 50
    x = mpmath.mpf(x)
    return float(x * mpmath.tanh(mpmath.log1p(mpmath.exp(x))))


def test_mish_values_against_high_precision():
    assert ops.mish(np.array([0.0])).data[0] == 0.0
    xs = np.array([-30.0, -5.0, -1.0, -1e-3, 0.5, 1.0, 10.0, 40.0, 800.0, -800.0])
    got = ops.mish(xs).data
    want = np.array([mish_ref(x) for x in xs])
    np.testing.assert_allclose(got, want, rtol=1e-14, atol=1e-300)
    assert abs(got[6] - 9.99999995877) < 1e-10


def test_leaky_relu_relu_tanh():
    x = np.array([-2.0, 0.0, 3.0])
    np.testing.assert_array_equal(ops.leaky_relu(x).data, [-0.02, 0.0, 3.0])
    np.testing.assert_array_equal(ops.relu(x).data, [0.0, 0.0, 3.0])
    np.testing.assert_allclose(ops.tanh(x).data, np.tanh(x))


def test_concat_order_and_shape_errors():
    out = ops.concat([np.array([1.0, 2.0]), np.array([3.0, 4.0, 5.0])])
    np.testing.assert_array_equal(out.data, [1, 2, 3, 4, 5])
    with pytest.raises(ShapeError, match="matmul"):
        ops.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError, match="add"):
        ops.add(np.ones(3), np.ones(4))
    with pytest.raises(ShapeError, match="concat"):
        ops.concat([np.ones((2, 2)), np.ones((3, 3))], axis=1)


def test_non_finite_results_raise():
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        ops.scale(np.array([1e308]), 10.0)
    with pytest.raises(FloatingPointError):
        ops.mul(np.array([np.inf]), 1.0)


def test_softmax_examples():
    np.testing.assert_array_equal(softmax_temperature(np.array([4.2]), 3.0).data, [1.0])
    np.testing.assert_allclose(softmax_temperature(np.zeros(3), 7.0).data, [1 / 3] * 3, rtol=1e-15)
    e = math.e
    np.testing.assert_allclose(softmax_temperature(np.array([30.0, 0.0]), 30.0).data, [e / (e + 1), 1 / (e + 1)],
                               rtol=1e-14)
    with pytest.raises(ShapeError):
        softmax_temperature(np.zeros(0), 1.0)
    with pytest.raises(ContractError):
        softmax_temperature(np.zeros(2), 0.0)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=finite), st.floats(0.05, 1e4), st.randoms())
def test_softmax_sums_to_one_and_is_permutation_equivariant(logits, tau, rnd):
    w = softmax_temperature(logits, tau).data
    assert abs(w.sum() - 1.0) <= 1e-12
    perm = np.array(rnd.sample(range(len(logits)), len(logits)))
    np.testing.assert_allclose(softmax_temperature(logits[perm], tau).data, w[perm], rtol=1e-12, atol=1e-300)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(2, 8), elements=finite), st.floats(0.1, 100), st.floats(1.0, 100))
def test_max_weight_non_increasing_in_temperature(logits, tau, factor):
    lo = softmax_temperature(logits, tau).data.max()
    hi = softmax_temperature(logits, tau * factor).data.max()
    assert hi <= lo + 1e-12


def test_segment_softmax_matches_per_segment_softmax():
    rng = np.random.default_rng(0)
    seg = np.array([0, 0, 2, 2, 2, 3])
    logits = rng.normal(size=(6, 2))
    w = ops.segment_softmax(logits, seg, 4, tau=2.0).data
    for s in (0, 2, 3):
        m = seg == s
        for h in range(2):
            np.testing.assert_allclose(w[m, h], softmax_temperature(logits[m, h], 2.0).data, rtol=1e-14)


def test_batchnorm_examples():
    st_ = BatchNormState.fresh(2)
    x = np.array([[-1.0, 5.0], [1.0, 5.0]])
    out = batchnorm_1d(x, np.ones(2), np.zeros(2), st_, "train").data
    np.testing.assert_allclose(out[:, 0], [-1 / math.sqrt(1 + 1e-5), 1 / math.sqrt(1 + 1e-5)], rtol=1e-14)
    np.testing.assert_array_equal(out[:, 1], [0.0, 0.0])
    # running stats: momentum 0.1 towards batch mean (0, 5) and unbiased var (2, 0)
    np.testing.assert_allclose(st_.running_mean, [0.0, 0.5])
    np.testing.assert_allclose(st_.running_var, [0.9 + 0.2, 0.9])
    ev = BatchNormState.fresh(3)
    y = np.random.default_rng(1).normal(size=(4, 3))
    np.testing.assert_allclose(batchnorm_1d(y, np.ones(3), np.zeros(3), ev, "eval").data, y, atol=1e-5 * 3)
    with pytest.raises(ContractError):
        batchnorm_1d(np.ones((1, 3)), np.ones(3), np.zeros(3), ev, "train")
    with pytest.raises(ContractError):
        batchnorm_1d(y, np.ones(3), np.zeros(3), ev, "predict")


def test_backward_hand_examples():
    p = Tensor(np.array(2.5), requires_grad=True)
    with Tape() as tape:
        loss = ops.scale(p, 1.0)
    assert tape.backward(loss)[p] == 1.0
    w = Tensor(np.array(3.0), requires_grad=True)
    with Tape() as tape:
        y = ops.mul(w, 2.0)
        loss = ops.mul(y, y)
    tape.backward(loss)
    assert w.grad == 24.0


def test_reused_tensor_accumulates_gradient():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.add(ops.mul(a, a), ops.scale(a, 3.0)))
    tape.backward(loss)
    np.testing.assert_array_equal(a.grad, [5.0, 7.0])
    with Tape() as tape:
        loss = ops.sum(a)
    tape.backward(loss)
    np.testing.assert_array_equal(a.grad, [6.0, 8.0])  # accumulates across passes until zeroed


def test_non_scalar_loss_and_no_recording_outside_tape():
    a = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        out = ops.scale(a, 2.0)
        with pytest.raises(ContractError):
            tape.backward(out)
    assert len(tape) == 1
    assert not ops.scale(a, 2.0).requires_grad


def test_every_op_gradient_against_finite_differences():
    rng = np.random.default_rng(0)
    names = ["A", "B", "v", "s", "bn_g", "bn_b"]
    P = {
        "A": Tensor(rng.normal(size=(5, 4)), requires_grad=True),
        "B": Tensor(rng.normal(size=(3, 4)), requires_grad=True),
        "v": Tensor(rng.normal(size=(4,)), requires_grad=True),
        "s": Tensor(rng.normal(size=(5, 3)), requires_grad=True),
        "bn_g": Tensor(rng.uniform(0.5, 1.5, size=3), requires_grad=True),
        "bn_b": Tensor(rng.normal(size=3), requires_grad=True),
    }
    seg = np.array([0, 0, 1, 2, 2])
    target = rng.normal(size=3)

    def loss():
        h = ops.mish(ops.linear(P["A"], P["B"]))  # (5, 3)
        h = ops.add(h, ops.leaky_relu(P["s"]))
        bn = batchnorm_1d(h, P["bn_g"], P["bn_b"], BatchNormState.fresh(3), "train", update_stats=False)
        att = ops.segment_softmax(bn, seg, 3, tau=1.7)
        pooled = ops.weighted_sum(ops.mean(att, axis=1), ops.tanh(h), seg, 3)  # (3, 3)
        rows = ops.softmax(pooled, 0.8)
        g = ops.gather(ops.relu(ops.concat([pooled, rows], axis=1)), np.array([0, 2, 2]))
        vec = ops.matmul(ops.reshape(P["v"], (1, 4)), ops.reshape(ops.sub(P["v"], 0.1), (4, 1)))
        pred = ops.add(ops.sum(g, axis=1), ops.reshape(vec, (1,)))
        return ops.mse_loss(pred, target)

    res = gradcheck(loss, {k: P[k] for k in names})
    assert res.checked > 40
    assert res.pass_fraction == 1.0, res.worst


def test_adam_zero_gradient_leaves_parameter_and_counts_step():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    s = AdamState()
    adam_step(p, {"w": np.zeros(2)}, s)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])
    assert s.step == 1
    adam_step(p, {}, s)
    assert s.step == 2


@settings(max_examples=100)
@given(arrays(np.float64, 5, elements=st.floats(1e-3, 1e3) | st.floats(-1e3, -1e-3)))
def test_first_adam_step_is_signed_learning_rate(g):
    p = {"w": Tensor(np.zeros(5))}
    adam_step(p, {"w": g}, AdamState(lr=0.001))
    np.testing.assert_allclose(p["w"].data, -0.001 * np.sign(g), rtol=1e-4)


def test_adam_matches_reference_recurrence():
    rng = np.random.default_rng(2)
    w0 = rng.normal(size=4)
    p = {"w": Tensor(w0.copy())}
    s = AdamState(lr=0.01)
    m = v = np.zeros(4)
    w = w0.copy()
    for t in range(1, 6):
        g = rng.normal(size=4)
        adam_step(p, {"w": g}, s)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p["w"].data, w, rtol=1e-14)
    with pytest.raises(ShapeError):
        adam_step(p, {"w": np.zeros(3)}, s)
