"""Differentiable ops: worked cases, boundary behavior, and the FD suite."""

import numpy as np
import pytest

from heightfuse import autodiff as ad
from heightfuse import checks


def scalar(v):
    return ad.parameter(np.array([v]), dtype=np.float64)


# ---------------------------------------------------------------------------
# tiny worked cases


def test_square_gradient_at_three():
    x = scalar(3.0)
    y = ad.mul(x, x)
    ad.backward(ad.reduce_sum(y))
    assert y.data[0] == 9.0
    assert x.grad[0] == 6.0


def test_backward_is_linear_in_upstream():
    # doubling the readout weight doubles every gradient
    rng = np.random.default_rng(0)
    base = rng.standard_normal((4, 3))
    w = rng.standard_normal((4, 3))

    def run(scale):
        x = ad.parameter(base, dtype=np.float64)
        out = ad.reduce_sum(ad.mul(ad.exp(x), ad.constant(w * scale)))
        ad.backward(out)
        return x.grad

    g1 = run(1.0)
    g2 = run(2.0)
    assert np.allclose(g2, 2.0 * g1, atol=1e-12)


def test_abs_subgradient_at_zero_is_zero():
    x = ad.parameter(np.array([-2.0, 0.0, 3.0]), dtype=np.float64)
    ad.backward(ad.reduce_sum(ad.absolute(x)))
    assert np.array_equal(x.grad, [-1.0, 0.0, 1.0])


def test_relu_subgradient_at_zero_is_zero():
    x = ad.parameter(np.array([-1.0, 0.0, 2.0]), dtype=np.float64)
    ad.backward(ad.reduce_sum(ad.relu(x)))
    assert np.array_equal(x.grad, [0.0, 0.0, 1.0])


def test_reduce_max_worked_example():
    x = ad.parameter(np.array([1.0, 3.0, 2.0]), dtype=np.float64)
    out = ad.reduce_max(x, axis=0)
    ad.backward(ad.reduce_sum(out))
    assert out.data == 3.0
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0])


def test_max_ties_route_to_first_index():
    x = ad.parameter(np.array([[5.0, 5.0, 1.0]]), dtype=np.float64)
    ad.backward(ad.reduce_sum(ad.reduce_max(x, axis=1)))
    assert np.array_equal(x.grad, [[1.0, 0.0, 0.0]])

    y = ad.parameter(np.full((1, 1, 2, 2), 4.0), dtype=np.float64)
    ad.backward(ad.reduce_sum(ad.max_pool2x2(y)))
    assert np.array_equal(y.grad.reshape(-1), [1.0, 0.0, 0.0, 0.0])


def test_sgd_step_worked_example():
    p = scalar(1.0)
    p.grad = np.array([2.0])
    ad.sgd_step([p], 0.1)
    assert p.data[0] == pytest.approx(0.8)


def test_sgd_skips_parameters_without_gradients():
    p, q = scalar(1.0), scalar(5.0)
    p.grad = np.array([1.0])
    ad.sgd_step([p, q], 0.5)
    assert p.data[0] == 0.5 and q.data[0] == 5.0
    ad.zero_grads([p, q])
    assert p.grad is None


def test_backward_requires_scalar():
    x = ad.parameter(np.ones((2, 2)))
    with pytest.raises(ValueError):
        ad.backward(ad.mul(x, x))


def test_gradients_accumulate_across_reuse():
    x = scalar(2.0)
    out = ad.reduce_sum(ad.add(ad.mul(x, x), x))  # x^2 + x
    ad.backward(out)
    assert x.grad[0] == pytest.approx(5.0)


# ---------------------------------------------------------------------------
# shape and indexing ops


def test_concat_splits_gradient():
    a = ad.parameter(np.ones((2, 2)), dtype=np.float64)
    b = ad.parameter(np.ones((3, 2)), dtype=np.float64)
    out = ad.concat([a, b], axis=0)
    assert out.shape == (5, 2)
    w = np.arange(10.0).reshape(5, 2)
    ad.backward(ad.reduce_sum(ad.mul(out, ad.constant(w))))
    assert np.array_equal(a.grad, w[:2])
    assert np.array_equal(b.grad, w[2:])


def test_take_batch_selects_one_row():
    x = ad.parameter(np.arange(12.0).reshape(3, 4), dtype=np.float64)
    out = ad.take_batch(x, 1)
    assert np.array_equal(out.data, [[4.0, 5.0, 6.0, 7.0]])
    ad.backward(ad.reduce_sum(out))
    assert np.array_equal(x.grad[1], np.ones(4))
    assert np.all(x.grad[[0, 2]] == 0.0)


def test_gather_cells_fill_gets_no_gradient():
    a = ad.parameter(np.arange(4.0).reshape(1, 1, 2, 2), dtype=np.float64)
    src = np.array([3, -1, 0, -1])
    fill = np.array([9.0, 9.0, 9.0, 9.0])
    out = ad.gather_cells(a, src, fill)
    assert np.array_equal(out.data.reshape(-1), [3.0, 9.0, 0.0, 9.0])
    ad.backward(ad.reduce_sum(out))
    # only the two gathered source cells receive gradient
    assert np.array_equal(a.grad.reshape(-1), [1.0, 0.0, 0.0, 1.0])


def test_gather_cells_duplicate_sources_accumulate():
    a = ad.parameter(np.array([[[[2.0, 5.0]]]]), dtype=np.float64)
    out = ad.gather_cells(a, np.array([1, 1]), np.zeros(2))
    ad.backward(ad.reduce_sum(out))
    assert np.array_equal(a.grad.reshape(-1), [0.0, 2.0])


def test_resize_nearest_upsamples_by_repetition():
    a = ad.parameter(np.arange(4.0).reshape(1, 1, 2, 2), dtype=np.float64)
    out = ad.resize_nearest(a, (4, 4))
    assert np.array_equal(out.data[0, 0, :2, :2], np.zeros((2, 2)))
    assert np.array_equal(out.data[0, 0, 2:, 2:], np.full((2, 2), 3.0))
    ad.backward(ad.reduce_sum(out))
    assert np.all(a.grad == 4.0)


def test_stride2_conv_identity_kernel_subsamples():
    x = ad.parameter(np.arange(16.0).reshape(1, 1, 4, 4), dtype=np.float64)
    w = ad.constant(np.ones((1, 1, 1, 1)))
    out = ad.conv2d(x, w, stride=2)
    assert np.array_equal(out.data[0, 0], [[0.0, 2.0], [8.0, 10.0]])


def test_conv2d_matches_direct_sum():
    rng = np.random.default_rng(1)
    x = ad.constant(rng.standard_normal((1, 2, 5, 5)))
    w = ad.constant(rng.standard_normal((3, 2, 3, 3)))
    b = ad.constant(rng.standard_normal(3))
    out = ad.conv2d(x, w, b, stride=1, padding=1).data
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    want = np.empty((1, 3, 5, 5))
    for f in range(3):
        for i in range(5):
            for j in range(5):
                want[0, f, i, j] = (xp[0, :, i:i + 3, j:j + 3] * w.data[f]).sum() \
                    + b.data[f]
    assert np.allclose(out, want, atol=1e-12)


# ---------------------------------------------------------------------------
# batch norm


def test_batch_norm_eval_is_affine_closed_form():
    c = 3
    state = ad.BatchNormState(c, dtype=np.float64)
    state.running_mean = np.array([1.0, -2.0, 0.5])
    state.running_var = np.array([4.0, 1.0, 9.0])
    gamma = ad.parameter(np.array([2.0, 1.0, 3.0]), dtype=np.float64)
    beta = ad.parameter(np.array([0.0, 5.0, -1.0]), dtype=np.float64)
    rng = np.random.default_rng(2)
    x = ad.constant(rng.standard_normal((2, c, 4, 4)))
    out = ad.batch_norm2d(x, gamma, beta, state, training=False).data
    shape = (1, c, 1, 1)
    want = gamma.data.reshape(shape) * (x.data - state.running_mean.reshape(shape)) \
        / np.sqrt(state.running_var.reshape(shape) + 1e-5) + beta.data.reshape(shape)
    assert np.allclose(out, want, atol=1e-12)


def test_batch_norm_training_updates_running_stats():
    state = ad.BatchNormState(1, dtype=np.float64)
    gamma = ad.parameter(np.ones(1), dtype=np.float64)
    beta = ad.parameter(np.zeros(1), dtype=np.float64)
    x = ad.constant(np.full((1, 1, 2, 2), 10.0))
    out = ad.batch_norm2d(x, gamma, beta, state, training=True).data
    assert np.allclose(out, 0.0, atol=1e-4)   # constant batch normalizes to 0
    assert state.running_mean[0] == pytest.approx(0.9 * 0.0 + 0.1 * 10.0)
    assert state.running_var[0] == pytest.approx(0.9 * 1.0 + 0.1 * 0.0)


def test_batch_norm_eval_ignores_batch_content():
    state = ad.BatchNormState(2, dtype=np.float64)
    gamma = ad.parameter(np.ones(2), dtype=np.float64)
    beta = ad.parameter(np.zeros(2), dtype=np.float64)
    before_mean = state.running_mean.copy()
    x = ad.constant(np.random.default_rng(3).standard_normal((2, 2, 3, 3)) * 50)
    ad.batch_norm2d(x, gamma, beta, state, training=False)
    assert np.array_equal(state.running_mean, before_mean)


# ---------------------------------------------------------------------------
# checkpoints


def test_weight_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(4)
    arrays = {
        "conv_w": rng.standard_normal((4, 3, 3, 3)).astype(np.float32),
        "bias": rng.standard_normal(4).astype(np.float32),
        "scalar": np.float32(2.5),
    }
    path = tmp_path / "w.vgfw"
    ad.save_weights(path, arrays)
    back = ad.load_weights(path)
    assert set(back) == set(arrays)
    for k in arrays:
        assert np.array_equal(back[k], np.asarray(arrays[k], dtype=np.float32))
    # identical content serializes identically regardless of dict order
    path2 = tmp_path / "w2.vgfw"
    ad.save_weights(path2, dict(reversed(list(arrays.items()))))
    assert path.read_bytes() == path2.read_bytes()


def test_load_weights_rejects_garbage(tmp_path):
    path = tmp_path / "junk.vgfw"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError):
        ad.load_weights(path)


# ---------------------------------------------------------------------------
# the finite-difference suite


def test_every_op_passes_finite_difference():
    rows = checks.op_checks()
    names = [n for n, _ in rows]
    assert len(names) == len(set(names)) and len(names) >= 20
    worst = max(err for _, err in rows)
    assert worst < checks.BOUND, rows


def test_op_checks_are_deterministic():
    a = checks.op_checks()
    b = checks.op_checks()
    assert a == b


def test_grad_check_flags_a_wrong_gradient():
    # a deliberately broken op must fail the same harness that passes above
    def bad(tensors):
        (x,) = tensors
        out = ad.mul(x, x)
        real_bwd = out._backward

        def wrong(g):
            real_bwd(g * 0.5)

        out._backward = wrong
        return ad.reduce_sum(out)

    err = ad.grad_check(bad, [np.array([1.0, 2.0])], eps=1e-5)
    assert err > 0.3
