import numpy as np
import pytest

from maskforge import autodiff as ad
from maskforge.objective import (KDState, LagrangianState, kd_loss, lagrangian_penalty,
                                 sparsity_schedule, total_loss)


def _lag(l1, l2):
    lag = LagrangianState.zeros(dtype=np.float64)
    lag.lam1.data = np.asarray(l1, dtype=np.float64)
    lag.lam2.data = np.asarray(l2, dtype=np.float64)
    return lag


def test_penalty_zero_violation():
    for l1, l2 in ((0.0, 0.0), (3.0, -2.0)):
        out = lagrangian_penalty(ad.constant(0.6, dtype=np.float64), 0.6, _lag(l1, l2))
        assert out.item() == pytest.approx(0.0, abs=1e-12)


def test_penalty_direct_formula():
    out = lagrangian_penalty(ad.constant(1.0, dtype=np.float64), 0.5, _lag(2.0, 4.0))
    assert out.item() == pytest.approx(2 * 0.5 + 4 * 0.25)


def test_penalty_gradient_wrt_lambda1_is_violation():
    lag = _lag(0.3, 0.7)
    cur = ad.constant(0.8, dtype=np.float64)
    ad.backward(lagrangian_penalty(cur, 0.5, lag))
    assert float(lag.lam1.grad) == pytest.approx(0.3, abs=1e-9)
    assert float(lag.lam2.grad) == pytest.approx(0.09, abs=1e-9)


def test_penalty_sign_follows_violation():
    for v, l1, l2 in ((0.2, 1.0, 2.0), (-0.2, 1.0, 2.0), (0.1, -1.0, 0.0)):
        out = lagrangian_penalty(ad.constant(0.5 + v, dtype=np.float64), 0.5, _lag(l1, l2))
        assert np.sign(out.item()) == np.sign(l1 * v + l2 * v * v)


def test_kd_zero_when_transform_maps_teacher_to_student():
    rng = np.random.default_rng(0)
    kd = KDState.identity(4, 2, dtype=np.float64)
    kd.w_layer[0].data = rng.standard_normal((4, 4))
    teacher = [ad.constant(rng.standard_normal((1, 3, 4)), dtype=np.float64) for _ in range(2)]
    student = [ad.constant(t.data @ kd.w_layer[0].data, dtype=np.float64) for t in teacher]
    assert kd_loss(student, teacher, kd).item() == pytest.approx(0.0, abs=1e-12)


def test_kd_zero_for_identity_and_equal_hiddens():
    rng = np.random.default_rng(1)
    kd = KDState.identity(4, 2, dtype=np.float64)
    hid = [ad.constant(rng.standard_normal((2, 3, 4)), dtype=np.float64) for _ in range(2)]
    assert kd_loss(hid, hid, kd).item() == pytest.approx(0.0, abs=1e-12)


def test_kd_matches_hand_computed_mean():
    kd = KDState.identity(2, 2, dtype=np.float64)
    s = [ad.constant([[[1.0, 2.0], [3.0, 4.0]]], dtype=np.float64),
         ad.constant([[[0.0, 0.0], [0.0, 0.0]]], dtype=np.float64)]
    t = [ad.constant([[[1.0, 1.0], [3.0, 5.0]]], dtype=np.float64),
         ad.constant([[[2.0, 0.0], [0.0, 1.0]]], dtype=np.float64)]
    per_layer = [np.mean((s[i].data - t[i].data) ** 2) for i in range(2)]
    assert kd_loss(s, t, kd).item() == pytest.approx(np.mean(per_layer))


def test_kd_length_mismatch_rejected():
    kd = KDState.identity(2, 1)
    h = [ad.constant(np.zeros((1, 2, 2)))]
    with pytest.raises(ad.ShapeError):
        kd_loss(h, h * 2, kd)


def test_kd_nonnegative_and_gradient_sides():
    rng = np.random.default_rng(2)
    kd = KDState.identity(3, 1, dtype=np.float64)
    teacher = [ad.tensor(rng.standard_normal((1, 2, 3)), requires_grad=True, dtype=np.float64)]
    student = [ad.tensor(rng.standard_normal((1, 2, 3)), requires_grad=True, dtype=np.float64)]
    loss = kd_loss(student, teacher, kd)
    assert loss.item() >= 0
    ad.backward(loss)
    assert student[0].grad is not None and np.any(student[0].grad != 0)
    assert kd.w_layer[0].grad is not None and np.any(kd.w_layer[0].grad != 0)
    assert teacher[0].grad is None  # teacher side is detached


def test_kd_stop_gradient_contract():
    rng = np.random.default_rng(3)
    kd = KDState.identity(3, 1, dtype=np.float64)
    teacher_arr = rng.standard_normal((1, 2, 3))
    teacher = [ad.constant(teacher_arr.copy(), dtype=np.float64)]
    student = [ad.tensor(rng.standard_normal((1, 2, 3)), requires_grad=True, dtype=np.float64)]
    ad.backward(kd_loss(student, teacher, kd))
    grad_before = student[0].grad.copy()
    teacher[0].data[:] = 0.0  # perturbing after capture must not matter
    np.testing.assert_array_equal(student[0].grad, grad_before)


def test_per_layer_transforms():
    kd = KDState.identity(3, 2, per_layer=True)
    assert len(kd.w_layer) == 2
    assert kd.transform_for(1) is kd.w_layer[1]


def test_total_loss_values_and_gradient_additivity():
    assert total_loss(ad.constant(1.0), ad.constant(0.0), ad.constant(0.0)).item() == pytest.approx(1.0)
    assert total_loss(ad.constant(0.5), ad.constant(0.2), ad.constant(0.3)).item() == pytest.approx(1.0)
    # gradient w.r.t. a shared leaf equals the sum of component gradients
    x = ad.tensor([0.7], requires_grad=True, dtype=np.float64)
    task = ad.sum_(ad.mul(x, x))
    reg = ad.sum_(ad.scale(x, 3.0))
    kd = ad.sum_(ad.sigmoid(x))
    ad.backward(total_loss(task, reg, kd))
    def f(t):
        return total_loss(ad.sum_(ad.mul(t, t)), ad.sum_(ad.scale(t, 3.0)), ad.sum_(ad.sigmoid(t)))
    fd = ad.finite_difference_gradient(f, x, h=1e-6)
    np.testing.assert_allclose(x.grad, fd, rtol=1e-6)


def test_schedule_endpoints_and_midpoint():
    assert sparsity_schedule(0, 100, 0.5) == 0.0
    assert sparsity_schedule(100, 100, 0.5) == 0.5
    assert sparsity_schedule(50, 100, 0.5) == 0.25
    assert sparsity_schedule(10_000, 100, 0.5) == 0.5


def test_schedule_nondecreasing_and_clamped():
    vals = [sparsity_schedule(s, 37, 0.42) for s in range(0, 200)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert max(vals) == pytest.approx(0.42)


def test_schedule_rejects_bad_args():
    with pytest.raises(ValueError):
        sparsity_schedule(-1, 10, 0.5)
    with pytest.raises(ValueError):
        sparsity_schedule(0, 0, 0.5)
    with pytest.raises(ValueError):
        sparsity_schedule(0, 10, 1.0)
