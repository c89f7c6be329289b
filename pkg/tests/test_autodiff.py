"""Tests for the reverse-mode tensor engine.

The oracles live at the top of this file and are deliberately naive:
a six-nested-loop convolution and a central finite-difference gradient,
both independent of the engine's vectorized paths.
"""

import contextlib

import numpy as np
import pytest

from edue import autodiff as ad
from edue.autodiff import (
    Adam,
    ShapeError,
    Tape,
    Tensor,
    add,
    bce_loss,
    channel_norm,
    concat_channels,
    conv2d,
    mean_all,
    relu,
    scale,
    select_rows,
    sigmoid,
    sqrt,
    square,
    stack_first,
    sub,
    upsample_nearest,
    variance_along_first_axis,
)


# ---------------------------------------------------------------------------
# oracles


def naive_conv2d(x, w, b, stride=1, padding=0):
    """Six nested loops, no vectorization; the reference for conv2d."""
    bsz, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((bsz, cout, ho, wo), dtype=np.float64)
    for n in range(bsz):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[n, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[n, o, i, j] = acc + b[o]
    return out


def numerical_grad(f, arrays, h):
    """Central finite differences of scalar f with respect to each array."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def rel_err(analytic, numeric):
    return np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), 1e-8)


@contextlib.contextmanager
def dtype64():
    ad.set_default_dtype(np.float64)
    try:
        yield
    finally:
        ad.set_default_dtype(np.float32)


def check_gradients(build_loss, leaves, h, tol):
    """Compare tape gradients of build_loss() against finite differences.

    build_loss must construct the graph from the leaves' current data and
    return the scalar loss Tensor; leaves are requires_grad Tensors.
    """
    with Tape() as tape:
        loss = build_loss()
        tape.backward(loss)
    analytic = [leaf.grad.copy() for leaf in leaves]

    def f():
        return float(build_loss().data)

    numeric = numerical_grad(f, [leaf.data for leaf in leaves], h)
    for a, n in zip(analytic, numeric):
        assert rel_err(a, n) < tol, f"gradient mismatch: rel err {rel_err(a, n):.3e}"


def projected_loss(out, projector):
    """Scalar with non-uniform dependence on every output element."""
    return mean_all(square(add(out, projector)))


# ---------------------------------------------------------------------------
# conv2d


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(0)
    x = Tensor(rng.random((2, 3, 5, 5)))
    w = Tensor(np.ones((3, 3, 1, 1)) * np.eye(3)[:, :, None, None])
    b = Tensor(np.zeros(3))
    out = conv2d(x, w, b, stride=1, padding=0)
    np.testing.assert_allclose(out.data, x.data, rtol=1e-6)


def test_conv2d_box_sum_interior():
    c = 0.7
    x = Tensor(np.full((1, 1, 6, 6), c))
    w = Tensor(np.ones((1, 1, 3, 3)))
    b = Tensor(np.zeros(1))
    out = conv2d(x, w, b, stride=1, padding=1)
    assert out.data.shape == (1, 1, 6, 6)
    np.testing.assert_allclose(out.data[0, 0, 1:-1, 1:-1], 9 * c, rtol=1e-5)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_matches_naive_loops(stride, padding):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 6, 7)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
    ref = naive_conv2d(x.astype(np.float64), w.astype(np.float64), b.astype(np.float64),
                       stride=stride, padding=padding)
    np.testing.assert_allclose(out.data, ref, atol=1e-5)


def test_conv2d_gradients_fd_32bit():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((2, 2, 4, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.5, requires_grad=True)
    b = Tensor(rng.standard_normal(3) * 0.1, requires_grad=True)
    proj = Tensor(rng.standard_normal((2, 3, 4, 4)))
    check_gradients(lambda: projected_loss(conv2d(x, w, b, stride=1, padding=1), proj),
                    [x, w, b], h=1e-3, tol=1e-2)


def test_conv2d_gradients_fd_64bit():
    with dtype64():
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((2, 2, 4, 4)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.5, requires_grad=True)
        b = Tensor(rng.standard_normal(3) * 0.1, requires_grad=True)
        proj = Tensor(rng.standard_normal((2, 3, 2, 2)))
        check_gradients(lambda: projected_loss(conv2d(x, w, b, stride=2, padding=1), proj),
                        [x, w, b], h=1e-5, tol=1e-5)


def test_conv2d_shape_mismatch_names_both_shapes():
    x = Tensor(np.zeros((1, 2, 4, 4)))
    w = Tensor(np.zeros((3, 5, 3, 3)))
    b = Tensor(np.zeros(3))
    with pytest.raises(ShapeError) as exc:
        conv2d(x, w, b)
    assert "(1, 2, 4, 4)" in str(exc.value) and "(3, 5, 3, 3)" in str(exc.value)


def test_conv2d_kernel_too_large():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros(1)))


# ---------------------------------------------------------------------------
# pointwise ops


def test_relu_values_and_simple_gradient():
    x = Tensor(np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3), requires_grad=True)
    with Tape() as tape:
        out = relu(x)
        np.testing.assert_array_equal(out.data.ravel(), [0.0, 0.0, 2.0])
        tape.backward(mean_all(out))
    # gradient of sum is 3x the gradient of mean over 3 elements
    np.testing.assert_allclose(x.grad.ravel() * 3.0, [0.0, 0.0, 1.0])


def test_relu_gradient_fd():
    rng = np.random.default_rng(4)
    data = rng.standard_normal((2, 3, 4, 4))
    data[np.abs(data) < 2e-2] = 0.5  # keep fd away from the kink
    x = Tensor(data, requires_grad=True)
    proj = Tensor(rng.standard_normal((2, 3, 4, 4)))
    # the composed loss is piecewise quadratic, so central differences are
    # exact away from the kink and a wide step drowns float32 rounding
    check_gradients(lambda: projected_loss(relu(x), proj), [x], h=1e-2, tol=1e-3)


def test_sigmoid_midpoint_and_saturation():
    x = Tensor(np.array([0.0, 100.0, -100.0]).reshape(1, 1, 1, 3))
    out = sigmoid(x).data.ravel()
    assert out[0] == pytest.approx(0.5)
    assert out[1] == pytest.approx(1.0)
    assert 0.0 < out[2] < 1e-40
    assert np.all(np.isfinite(out))


def test_sigmoid_derivative_at_zero():
    x = Tensor(np.zeros((1, 1, 1, 1)), requires_grad=True)
    with Tape() as tape:
        tape.backward(mean_all(sigmoid(x)))
    assert x.grad.ravel()[0] == pytest.approx(0.25, rel=1e-6)

    def f():
        return float(mean_all(sigmoid(x)).data)

    (num,) = numerical_grad(f, [x.data], h=1e-3)
    assert num.ravel()[0] == pytest.approx(0.25, rel=1e-3)


# ---------------------------------------------------------------------------
# upsample


def test_upsample_factor_one_is_identity():
    x = Tensor(np.arange(8.0).reshape(1, 2, 2, 2))
    np.testing.assert_array_equal(upsample_nearest(x, 1).data, x.data)


def test_upsample_block_replication():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    out = upsample_nearest(x, 2).data[0, 0]
    expected = np.array([
        [1, 1, 2, 2],
        [1, 1, 2, 2],
        [3, 3, 4, 4],
        [3, 3, 4, 4],
    ], dtype=np.float64)
    np.testing.assert_array_equal(out, expected)


def test_upsample_gradient_counts_replicas():
    factor = 3
    x = Tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
    with Tape() as tape:
        out = upsample_nearest(x, factor)
        tape.backward(scale(mean_all(out), float(out.data.size)))  # sum of outputs
    np.testing.assert_allclose(x.grad, factor * factor)


# ---------------------------------------------------------------------------
# channel_norm


def test_channel_norm_constant_channel_is_zeroed():
    x = Tensor(np.full((2, 3, 4, 4), 7.0))
    gain = Tensor(np.ones(3))
    shift = Tensor(np.zeros(3))
    out = channel_norm(x, gain, shift)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-6)


def test_channel_norm_moments_match_affine():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((2, 3, 8, 8)) * 4.0 + 2.0)
    gain = Tensor(np.array([1.0, 2.0, 0.5]))
    shift = Tensor(np.array([0.0, -1.0, 3.0]))
    out = channel_norm(x, gain, shift, epsilon=1e-8).data
    for b in range(2):
        for c in range(3):
            plane = out[b, c]
            assert plane.mean() == pytest.approx(shift.data[c], abs=1e-4)
            assert plane.std() == pytest.approx(gain.data[c], abs=1e-4)


def test_channel_norm_gradient_fd():
    rng = np.random.default_rng(6)
    x = Tensor(rng.standard_normal((2, 2, 3, 3)), requires_grad=True)
    gain = Tensor(np.array([1.5, 0.7]), requires_grad=True)
    shift = Tensor(np.array([0.1, -0.2]), requires_grad=True)
    proj = Tensor(rng.standard_normal((2, 2, 3, 3)))
    check_gradients(lambda: projected_loss(channel_norm(x, gain, shift), proj),
                    [x, gain, shift], h=1e-3, tol=1e-2)


def test_channel_norm_gradient_fd_64bit():
    with dtype64():
        rng = np.random.default_rng(7)
        x = Tensor(rng.standard_normal((2, 2, 3, 3)), requires_grad=True)
        gain = Tensor(np.array([1.5, 0.7]), requires_grad=True)
        shift = Tensor(np.array([0.1, -0.2]), requires_grad=True)
        proj = Tensor(rng.standard_normal((2, 2, 3, 3)))
        check_gradients(lambda: projected_loss(channel_norm(x, gain, shift), proj),
                        [x, gain, shift], h=1e-5, tol=1e-5)


# ---------------------------------------------------------------------------
# variance along the stacked axis


def test_variance_identical_maps_is_zero():
    m = np.random.default_rng(8).random((1, 1, 3, 3))
    stacked = Tensor(np.stack([m, m, m]))
    np.testing.assert_allclose(variance_along_first_axis(stacked).data, 0.0, atol=1e-7)


def test_variance_binary_half_split():
    stacked = Tensor(np.array([0.0, 0.0, 1.0, 1.0]).reshape(4, 1, 1, 1))
    assert variance_along_first_axis(stacked).data.ravel()[0] == pytest.approx(0.25)


def test_variance_one_of_three():
    # mean = 2/3, population variance = ((1/3)^2 + 2*(1/3)^2 ... ) = 2/9
    stacked = Tensor(np.array([0.0, 1.0, 1.0]).reshape(3, 1, 1, 1))
    assert variance_along_first_axis(stacked).data.ravel()[0] == pytest.approx(2.0 / 9.0, rel=1e-6)


def test_variance_requires_two_slices():
    with pytest.raises(ShapeError):
        variance_along_first_axis(Tensor(np.zeros((1, 1, 2, 2))))


def test_variance_bounds_for_unit_interval_inputs():
    rng = np.random.default_rng(9)
    for _ in range(20):
        stacked = Tensor(rng.random((5, 2, 3, 3)))
        v = variance_along_first_axis(stacked).data
        assert np.all(v >= 0.0) and np.all(v <= 0.25 + 1e-7)


def test_variance_gradient_fd():
    rng = np.random.default_rng(10)
    x = Tensor(rng.random((3, 1, 2, 2)), requires_grad=True)
    proj = Tensor(rng.standard_normal((1, 2, 2)))
    check_gradients(lambda: projected_loss(variance_along_first_axis(x), proj),
                    [x], h=1e-3, tol=1e-2)


# ---------------------------------------------------------------------------
# plumbing ops and tape semantics


def test_add_zero_is_identity_and_shape_checked():
    x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
    z = Tensor(np.zeros((1, 1, 2, 2)))
    np.testing.assert_array_equal(add(x, z).data, x.data)
    with pytest.raises(ShapeError) as exc:
        add(x, Tensor(np.zeros((1, 1, 2, 3))))
    assert "(1, 1, 2, 2)" in str(exc.value) and "(1, 1, 2, 3)" in str(exc.value)


def test_mean_all_gradient_is_one_over_numel():
    x = Tensor(np.random.default_rng(11).random((2, 1, 3, 3)), requires_grad=True)
    with Tape() as tape:
        tape.backward(mean_all(x))
    np.testing.assert_allclose(x.grad, 1.0 / 18.0, rtol=1e-6)


def test_concat_channels_splits_gradient():
    a = Tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
    b = Tensor(np.ones((1, 3, 2, 2)), requires_grad=True)
    with Tape() as tape:
        out = concat_channels([a, b])
        assert out.data.shape == (1, 5, 2, 2)
        tape.backward(mean_all(out))
    np.testing.assert_allclose(a.grad, 1.0 / 20.0, rtol=1e-6)
    np.testing.assert_allclose(b.grad, 1.0 / 20.0, rtol=1e-6)


def test_stack_first_roundtrips_gradient():
    parts = [Tensor(np.full((1, 1, 2, 2), float(i)), requires_grad=True) for i in range(3)]
    with Tape() as tape:
        out = stack_first(parts)
        assert out.data.shape == (3, 1, 1, 2, 2)
        tape.backward(mean_all(out))
    for p in parts:
        np.testing.assert_allclose(p.grad, 1.0 / 12.0, rtol=1e-6)


def test_select_rows_scatters_gradient():
    x = Tensor(np.arange(6.0).reshape(3, 1, 1, 2), requires_grad=True)
    with Tape() as tape:
        out = select_rows(x, [0, 2])
        np.testing.assert_array_equal(out.data, x.data[[0, 2]])
        tape.backward(mean_all(out))
    np.testing.assert_allclose(x.grad[0], 0.25)
    np.testing.assert_allclose(x.grad[1], 0.0)
    np.testing.assert_allclose(x.grad[2], 0.25)


def test_two_consumer_node_accumulates_both_paths():
    # loss = mean(x + x) -> dloss/dx = 2/numel, computed by hand
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with Tape() as tape:
        tape.backward(mean_all(add(x, x)))
    np.testing.assert_allclose(x.grad, 2.0 / 4.0)

    # a node feeding two distinct consumers: loss = mean(square(x)) + mean(x)
    y = Tensor(np.full((1, 1, 1, 2), 3.0), requires_grad=True)
    with Tape() as tape:
        loss = add(mean_all(square(y)), mean_all(y))
        tape.backward(loss)
    np.testing.assert_allclose(y.grad, 2.0 * 3.0 / 2.0 + 1.0 / 2.0)


def test_backward_twice_accumulates():
    x = Tensor(np.ones((1, 1, 1, 2)), requires_grad=True)
    with Tape() as tape:
        loss = mean_all(x)
        tape.backward(loss)
        first = x.grad.copy()
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, 2.0 * first)


def test_no_tape_means_no_recording():
    x = Tensor(np.ones((1, 1, 1, 2)), requires_grad=True)
    out = relu(x)
    assert out.requires_grad is False and out.grad is None


def test_sqrt_shift_guards_zero():
    x = Tensor(np.zeros((1, 1, 1, 1)), requires_grad=True)
    with Tape() as tape:
        out = sqrt(x, shift=1e-12)
        tape.backward(out)
    assert out.data.ravel()[0] == pytest.approx(1e-6)
    assert np.all(np.isfinite(x.grad))


def test_debug_finite_checks_flag():
    ad.set_debug_checks(True)
    try:
        with pytest.raises(FloatingPointError):
            square(Tensor(np.array([np.nan]).reshape(1, 1, 1, 1)))
    finally:
        ad.set_debug_checks(False)


# ---------------------------------------------------------------------------
# bce


def test_bce_at_half_is_ln2():
    p = Tensor(np.full((1, 1, 2, 2), 0.5))
    t = Tensor(np.ones((1, 1, 2, 2)))
    assert float(bce_loss(p, t).data) == pytest.approx(np.log(2.0), rel=1e-6)


def test_bce_gradient_fd():
    rng = np.random.default_rng(12)
    p = Tensor(rng.uniform(0.1, 0.9, (1, 1, 3, 3)), requires_grad=True)
    t = Tensor((rng.random((1, 1, 3, 3)) > 0.5).astype(np.float64))
    check_gradients(lambda: bce_loss(p, t), [p], h=1e-4, tol=1e-2)


def test_bce_clamps_saturated_probabilities():
    p = Tensor(np.array([0.0, 1.0]).reshape(1, 1, 1, 2))
    t = Tensor(np.array([0.0, 1.0]).reshape(1, 1, 1, 2))
    loss = float(bce_loss(p, t).data)
    assert 0.0 <= loss < 1e-5


# ---------------------------------------------------------------------------
# optimizer


def test_adam_first_step_is_almost_lr():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([1.0], dtype=p.data.dtype)
    opt = Adam({"p": p}, lr=0.1)
    opt.step()
    # bias correction makes the first step lr * g / (|g| + eps)
    assert p.data[0] == pytest.approx(1.0 - 0.1, abs=1e-6)


def test_adam_zero_gradient_keeps_parameter():
    p = Tensor(np.array([2.5]), requires_grad=True)
    p.grad = np.zeros(1, dtype=p.data.dtype)
    opt = Adam({"p": p}, lr=0.1)
    opt.step()
    assert p.data[0] == pytest.approx(2.5)


def test_adam_converges_on_quadratic():
    with dtype64():
        p = Tensor(np.array([[[[8.0]]]]), requires_grad=True)
        target = Tensor(np.array([[[[3.0]]]]))
        opt = Adam({"p": p}, lr=0.05)
        for _ in range(2000):
            opt.zero_grad()
            with Tape() as tape:
                loss = mean_all(square(sub(p, target)))
                tape.backward(loss)
            opt.step()
            if abs(p.data.ravel()[0] - 3.0) < 1e-3:
                break
        assert abs(p.data.ravel()[0] - 3.0) < 1e-3


def test_adam_rejects_non_finite_gradient_with_name():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([np.nan], dtype=p.data.dtype)
    opt = Adam({"encoder.w": p}, lr=0.1)
    with pytest.raises(FloatingPointError) as exc:
        opt.step()
    assert "encoder.w" in str(exc.value)
