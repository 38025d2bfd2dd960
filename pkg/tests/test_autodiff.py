"""Unit tests for the tape: op semantics, optimizer, EMA, determinism."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radfield import autodiff as ad
from radfield.autodiff import AdamState, EmaState, ShapeError, Tensor


def t(x, requires_grad=False, dtype=np.float32):
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------- forward ops


def test_sigmoid_at_zero():
    assert ad.sigmoid(t(0.0)).data == pytest.approx(0.5)


def test_truncated_exp_clamps_at_15():
    out = ad.truncated_exp(t([20.0, -20.0, 1.0], dtype=np.float64))
    np.testing.assert_allclose(out.data, [np.exp(15.0), np.exp(-15.0), np.e])


def test_concat_values():
    out = ad.concat([t([1.0, 2.0]), t([3.0])], axis=0)
    np.testing.assert_array_equal(out.data, [1.0, 2.0, 3.0])


def test_relu_and_leaky_relu():
    x = t([-2.0, 0.0, 3.0])
    np.testing.assert_array_equal(ad.relu(x).data, [0.0, 0.0, 3.0])
    np.testing.assert_allclose(ad.leaky_relu(x, 0.02).data, [-0.04, 0.0, 3.0])


def test_softmax_rows_sum_to_one():
    x = t(np.random.default_rng(0).normal(size=(4, 7)))
    s = ad.softmax_lastaxis(x).data
    np.testing.assert_allclose(s.sum(axis=-1), np.ones(4), rtol=1e-6)
    assert (s > 0).all()


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as e:
        ad.matmul(t(np.zeros((2, 3))), t(np.zeros((4, 5))))
    assert "(2, 3)" in str(e.value) and "(4, 5)" in str(e.value)


def test_default_dtype_is_float32():
    assert t([1.0]).data.dtype == np.float32
    assert ad.sigmoid(t([1.0])).data.dtype == np.float32


def test_float64_mode_propagates():
    x = t([1.0], dtype=np.float64)
    assert ad.sigmoid(x).data.dtype == np.float64


# ------------------------------------------------------------------ backward


def test_backward_sum_of_squares():
    x = t([1.0, 2.0], requires_grad=True)
    ad.tsum(x * x).backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_backward_sigmoid_at_zero():
    w = t(0.0, requires_grad=True)
    ad.sigmoid(w).backward()
    assert w.grad == pytest.approx(0.25)


def test_backward_requires_scalar():
    x = t([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        (x * x).backward()


def test_repeated_backward_accumulates():
    x = t([3.0], requires_grad=True)
    loss = ad.tsum(x * x)
    loss.backward()
    loss.backward()
    np.testing.assert_allclose(x.grad, [12.0])  # 2 * (2x)


def test_shared_tensor_grads_add():
    x = t([2.0], requires_grad=True)
    ad.tsum(x * x + x).backward()
    np.testing.assert_allclose(x.grad, [5.0])  # 2x + 1


def test_broadcast_grad_unbroadcasts():
    a = t(np.ones((3, 4)), requires_grad=True)
    b = t(np.ones((4,)), requires_grad=True)
    ad.tsum(a + b).backward()
    assert a.grad.shape == (3, 4)
    assert b.grad.shape == (4,)
    np.testing.assert_allclose(b.grad, 3.0 * np.ones(4))  # summed over rows


def test_no_grad_blocks_tape():
    x = t([1.0], requires_grad=True)
    with ad.no_grad():
        y = ad.sigmoid(x * x)
    assert not y.requires_grad and y._parents == ()
    assert x.grad is None


def test_tape_is_deterministic():
    def run():
        rng = np.random.default_rng(7)
        x = t(rng.normal(size=(5, 3)), requires_grad=True)
        w = t(rng.normal(size=(3, 2)), requires_grad=True)
        loss = ad.tsum(ad.sigmoid(ad.matmul(x, w)))
        loss.backward()
        return loss.data.copy(), x.grad.copy(), w.grad.copy()

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert np.array_equal(l1, l2)
    assert np.array_equal(gx1, gx2) and np.array_equal(gw1, gw2)


def test_finite_difference_composite_graph():
    # an in-scope composite: matmul -> leaky_relu -> matmul -> sigmoid -> sum
    from radfield import gradcheck as gc

    rng = np.random.default_rng(3)

    def build(r):
        return [r.normal(size=(4, 5)), r.normal(size=(5, 3)), r.normal(size=(3, 2))]

    def loss(ts):
        x, w1, w2 = ts
        h = ad.leaky_relu(ad.matmul(x, w1), 0.02)
        return ad.tsum(ad.sigmoid(ad.matmul(h, w2)))

    res = gc.check_op("composite", build, loss, rng, cases=20)
    assert res.passed, res.max_rel_error
    assert res.max_rel_error < 1e-3


# --------------------------------------------------------------------- adam


def test_adam_first_step_moves_by_lr():
    w = t([0.0], requires_grad=True)
    opt = AdamState({"w": w}, lr_init=0.005, total_steps=100)
    w.grad = np.ones(1, dtype=np.float32)
    opt.step()
    assert w.data[0] == pytest.approx(-0.005, abs=1e-7)


def test_adam_zero_grad_is_noop():
    w = t([1.25, -3.5], requires_grad=True)
    opt = AdamState({"w": w}, lr_init=0.005, total_steps=10)
    w.grad = np.zeros(2, dtype=np.float32)
    before = w.data.copy()
    opt.step()
    np.testing.assert_array_equal(w.data, before)


def test_lr_schedule_endpoints_exact():
    w = t([0.0], requires_grad=True)
    opt = AdamState({"w": w}, lr_init=0.0005, total_steps=20000)
    assert opt.lr_at(0) == 0.0005
    assert opt.lr_at(20000) == 0.0005 * 0.1
    # monotone decay in between
    mids = [opt.lr_at(s) for s in range(0, 20001, 1000)]
    assert all(a > b for a, b in zip(mids, mids[1:]))


def test_lr_schedule_is_exponential():
    w = t([0.0], requires_grad=True)
    opt = AdamState({"w": w}, lr_init=0.005, total_steps=1000)
    # lr(s) = lr0 * 0.1^(s/total): log-linear in s
    s = np.array([100, 200, 300, 400])
    lrs = np.array([opt.lr_at(int(i)) for i in s])
    ratios = lrs[1:] / lrs[:-1]
    np.testing.assert_allclose(ratios, ratios[0], rtol=1e-12)


def test_adam_separate_groups_use_own_lr():
    w_net = t([0.0], requires_grad=True)
    w_grid = t([0.0], requires_grad=True)
    o1 = AdamState({"w": w_net}, lr_init=0.0005, total_steps=100)
    o2 = AdamState({"w": w_grid}, lr_init=0.005, total_steps=100)
    w_net.grad = np.ones(1, dtype=np.float32)
    w_grid.grad = np.ones(1, dtype=np.float32)
    o1.step()
    o2.step()
    assert abs(w_grid.data[0]) == pytest.approx(10 * abs(w_net.data[0]), rel=1e-5)


def test_adam_converges_on_quadratic():
    w = t([5.0], requires_grad=True)
    opt = AdamState({"w": w}, lr_init=0.1, total_steps=2000)
    for _ in range(2000):
        ad.zero_grads({"w": w})
        ad.tsum(w * w).backward()
        opt.step()
    assert abs(w.data[0]) < 1e-2


# ---------------------------------------------------------------------- ema


def test_ema_single_update():
    w = t([0.0], requires_grad=True)
    ema = EmaState({"w": w}, decay=0.95)
    ema.shadow["w"][:] = 1.0
    ema.update()
    assert ema.shadow["w"][0] == pytest.approx(0.95)


def test_ema_decay_zero_tracks_param():
    w = t([3.0], requires_grad=True)
    ema = EmaState({"w": w}, decay=0.0)
    w.data[:] = 7.0
    ema.update()
    assert ema.shadow["w"][0] == 7.0


def test_ema_converges_to_constant():
    w = t([2.0], requires_grad=True)
    ema = EmaState({"w": w}, decay=0.95)
    ema.shadow["w"][:] = 0.0
    for _ in range(400):
        ema.update()
    assert ema.shadow["w"][0] == pytest.approx(2.0, abs=1e-5)  # fp32 plateau


def test_ema_applied_swaps_and_restores():
    w = t([1.0], requires_grad=True)
    ema = EmaState({"w": w}, decay=0.95)
    ema.shadow["w"][:] = 9.0
    with ema.applied():
        assert w.data[0] == 9.0
    assert w.data[0] == 1.0


def test_ema_recursion_matches_closed_form():
    w = t([1.0], requires_grad=True)
    ema = EmaState({"w": w}, decay=0.95)
    ema.shadow["w"][:] = 0.0
    n = 25
    for _ in range(n):
        ema.update()
    # shadow_n = 1 - decay^n for constant param 1, shadow_0 = 0
    assert ema.shadow["w"][0] == pytest.approx(1.0 - 0.95**n, rel=1e-6)


# ---------------------------------------------------------- property checks


finite_floats = st.floats(min_value=-30.0, max_value=30.0, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(st.lists(finite_floats, min_size=1, max_size=16))
def test_sigmoid_range_and_truncexp_bound(xs):
    x = t(xs, dtype=np.float64)
    s = ad.sigmoid(x).data
    assert ((s >= 0.0) & (s <= 1.0)).all()
    e = ad.truncated_exp(x).data
    assert (e > 0).all() and (e <= np.exp(15.0)).all()
    assert np.isfinite(e).all()


@settings(max_examples=100, deadline=None)
@given(
    st.lists(finite_floats, min_size=1, max_size=8),
    st.lists(finite_floats, min_size=1, max_size=8),
)
def test_concat_preserves_contents(a, b):
    out = ad.concat([t(a, dtype=np.float64), t(b, dtype=np.float64)], axis=0)
    np.testing.assert_array_equal(out.data, np.concatenate([a, b]))


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=1, max_value=6), st.integers(min_value=1, max_value=6))
def test_matmul_grad_shapes(n, m):
    a = t(np.ones((n, m)), requires_grad=True)
    b = t(np.ones((m, n)), requires_grad=True)
    ad.tsum(ad.matmul(a, b)).backward()
    assert a.grad.shape == (n, m)
    assert b.grad.shape == (m, n)


@settings(max_examples=50, deadline=None)
@given(st.lists(finite_floats, min_size=2, max_size=12))
def test_cumsum_matches_numpy(xs):
    x = t(xs, dtype=np.float64)
    np.testing.assert_allclose(ad.cumsum(x, axis=0).data, np.cumsum(xs))


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_lr_monotone_between_endpoints(seed):
    rng = np.random.default_rng(seed)
    total = int(rng.integers(10, 100000))
    s = int(rng.integers(0, total + 1))
    w = t([0.0], requires_grad=True)
    opt = AdamState({"w": w}, lr_init=0.005, total_steps=total)
    lr = opt.lr_at(s)
    assert 0.1 * 0.005 - 1e-12 <= lr <= 0.005 + 1e-12
