"""Tensor-op correctness: frozen examples, loop-nest oracles, gradient checks."""

import numpy as np
import pytest

from defectforge.gradcheck import check_gradient, finite_difference_gradient, relative_errors
from defectforge.tensor import (
    ConvKernel,
    ShapeMismatchError,
    Tensor,
    assert_finite,
    bilinear_gather,
    bilinear_gather_backward,
    bilinear_resize,
    bilinear_sample,
    bilinear_sample_backward,
    conv2d,
    conv2d_backward,
    conv_output_size,
    linear,
    linear_backward,
    log_softmax,
    matmul,
    matmul_backward,
    max_pool2d,
    max_pool2d_backward,
    nearest_resize,
    nearest_resize_adjoint,
    relu,
    relu_backward,
    sgd_step,
    sigmoid,
    sigmoid_backward,
    softmax,
)

RNG = np.random.default_rng(1234)


def conv2d_oracle(x, w, b, stride, padding):
    """Direct six-loop convolution (cross-correlation), the reference."""
    n, c, h, wid = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wid, kw, stride, padding)
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for yi in range(ho):
                for xi in range(wo):
                    acc = b[oi]
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[oi, ci, u, v] * xp[ni, ci, yi * stride + u, xi * stride + v]
                    out[ni, oi, yi, xi] = acc
    return out


class TestConv2d:
    def test_ones_kernel_on_ones_image(self):
        x = np.ones((1, 1, 4, 4))
        k = ConvKernel(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
        out = conv2d(x, k)
        assert out.shape == (1, 1, 2, 2)
        np.testing.assert_allclose(out, 9.0)

    @pytest.mark.parametrize(
        "n,c,o,h,w,k,stride,padding",
        [
            (1, 1, 1, 5, 5, 3, 1, 0),
            (2, 3, 4, 8, 7, 3, 1, 1),
            (1, 2, 3, 9, 9, 3, 2, 1),
            (2, 2, 2, 6, 6, 1, 1, 0),
            (1, 3, 2, 10, 8, 5, 2, 2),
        ],
    )
    def test_matches_loop_nest(self, n, c, o, h, w, k, stride, padding):
        x = RNG.normal(size=(n, c, h, w))
        wt = RNG.normal(size=(o, c, k, k))
        b = RNG.normal(size=o)
        kern = ConvKernel(Tensor(wt), Tensor(b), stride=stride, padding=padding)
        got = conv2d(x, kern)
        want = conv2d_oracle(x, wt, b, stride, padding)
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)

    def test_rejects_channel_mismatch(self):
        k = ConvKernel(Tensor(RNG.normal(size=(2, 3, 3, 3))), Tensor(np.zeros(2)))
        with pytest.raises(ShapeMismatchError):
            conv2d(np.zeros((1, 2, 8, 8)), k)

    def test_rejects_kernel_larger_than_padded_input(self):
        k = ConvKernel(Tensor(RNG.normal(size=(1, 1, 5, 5))), Tensor(np.zeros(1)))
        with pytest.raises(ShapeMismatchError):
            conv2d(np.zeros((1, 1, 3, 3)), k)

    def test_gradients(self):
        x = RNG.normal(size=(2, 2, 6, 6))
        wt = RNG.normal(size=(3, 2, 3, 3))
        b = RNG.normal(size=3)
        kern = ConvKernel(Tensor(wt), Tensor(b), stride=2, padding=1)
        probe = RNG.normal(size=conv2d(x, kern).shape)
        gx, gw, gb = conv2d_backward(x, kern, probe)

        ok, errs = check_gradient(
            lambda v: np.sum(conv2d(v.reshape(x.shape), kern) * probe),
            x.ravel().copy(), gx.ravel())
        assert ok, f"input grad max rel err {errs.max():.2e}"

        def wloss(v):
            kern2 = ConvKernel(Tensor(v.reshape(wt.shape)), Tensor(b), stride=2, padding=1)
            return np.sum(conv2d(x, kern2) * probe)
        ok, errs = check_gradient(wloss, wt.ravel().copy(), gw.ravel())
        assert ok, f"weight grad max rel err {errs.max():.2e}"

        def bloss(v):
            kern2 = ConvKernel(Tensor(wt), Tensor(v), stride=2, padding=1)
            return np.sum(conv2d(x, kern2) * probe)
        ok, errs = check_gradient(bloss, b.copy(), gb.ravel())
        assert ok, f"bias grad max rel err {errs.max():.2e}"


class TestPointwise:
    def test_relu_forward(self):
        x = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
        np.testing.assert_array_equal(relu(x), [0.0, 0.0, 0.0, 0.5, 2.0])

    def test_relu_gradient_off_kink(self):
        x = RNG.normal(size=64)
        x[np.abs(x) < 0.05] += 0.2  # keep clear of the non-differentiable point
        probe = RNG.normal(size=64)
        g = relu_backward(x, probe)
        ok, errs = check_gradient(lambda v: np.sum(relu(v) * probe), x.copy(), g)
        assert ok, errs.max()

    def test_sigmoid_matches_definition_and_is_stable(self):
        x = np.array([-800.0, -5.0, 0.0, 5.0, 800.0])
        s = sigmoid(x)
        assert s[0] == 0.0 or s[0] < 1e-300
        assert s[-1] == pytest.approx(1.0)
        assert s[2] == pytest.approx(0.5)
        assert np.all(np.isfinite(s))

    def test_sigmoid_gradient(self):
        x = RNG.normal(size=32)
        probe = RNG.normal(size=32)
        g = sigmoid_backward(x, probe)
        ok, errs = check_gradient(lambda v: np.sum(sigmoid(v) * probe), x.copy(), g)
        assert ok, errs.max()

    def test_softmax_rows_sum_to_one(self):
        z = RNG.normal(size=(10, 7)) * 30
        p = softmax(z)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)
        assert np.all(p >= 0)

    def test_softmax_shift_invariance(self):
        z = RNG.normal(size=(4, 5))
        np.testing.assert_allclose(softmax(z), softmax(z + 123.0), atol=1e-12)

    def test_log_softmax_consistent(self):
        z = RNG.normal(size=(6, 4))
        np.testing.assert_allclose(np.exp(log_softmax(z)), softmax(z), atol=1e-12)
        # stays finite where naive log(softmax) underflows
        z = np.array([[0.0, -2000.0]])
        assert np.isfinite(log_softmax(z)).all()


class TestLinear:
    def test_matches_numpy(self):
        x = RNG.normal(size=(5, 8))
        w = Tensor(RNG.normal(size=(8, 3)))
        b = Tensor(RNG.normal(size=3))
        np.testing.assert_allclose(linear(x, w, b), x @ w.data + b.data, atol=1e-14)

    def test_gradients(self):
        x = RNG.normal(size=(4, 6))
        w = Tensor(RNG.normal(size=(6, 3)))
        b = Tensor(RNG.normal(size=3))
        probe = RNG.normal(size=(4, 3))
        gx, gw, gb = linear_backward(x, w, probe)
        ok, _ = check_gradient(
            lambda v: np.sum(linear(v.reshape(4, 6), w, b) * probe), x.ravel().copy(), gx.ravel())
        assert ok
        ok, _ = check_gradient(
            lambda v: np.sum(linear(x, Tensor(v.reshape(6, 3)), b) * probe),
            w.data.ravel().copy(), gw.ravel())
        assert ok
        ok, _ = check_gradient(
            lambda v: np.sum(linear(x, w, Tensor(v)) * probe), b.data.copy(), gb.ravel())
        assert ok

    def test_matmul_gradients(self):
        a = RNG.normal(size=(3, 4))
        b = RNG.normal(size=(4, 5))
        probe = RNG.normal(size=(3, 5))
        ga, gb = matmul_backward(a, b, probe)
        ok, _ = check_gradient(
            lambda v: np.sum(matmul(v.reshape(3, 4), b) * probe), a.ravel().copy(), ga.ravel())
        assert ok
        ok, _ = check_gradient(
            lambda v: np.sum(matmul(a, v.reshape(4, 5)) * probe), b.ravel().copy(), gb.ravel())
        assert ok


class TestMaxPool:
    def test_known_values(self):
        x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
        out = max_pool2d(x, size=2)
        np.testing.assert_array_equal(out[0, 0], [[5.0, 7.0], [13.0, 15.0]])

    def test_floor_semantics_on_odd_size(self):
        out = max_pool2d(np.zeros((1, 1, 5, 7)), size=2)
        assert out.shape == (1, 1, 2, 3)

    def test_backward_routes_to_first_max(self):
        x = np.zeros((1, 1, 2, 2))
        x[0, 0] = [[3.0, 3.0], [1.0, 0.0]]  # tie: row-major first wins
        g = max_pool2d_backward(x, np.ones((1, 1, 1, 1)), size=2)
        np.testing.assert_array_equal(g[0, 0], [[1.0, 0.0], [0.0, 0.0]])

    def test_gradient(self):
        x = RNG.normal(size=(2, 3, 6, 6))
        # perturbations of 1e-5 must not flip the argmax; separate close values
        x += np.linspace(0, 1e-2, x.size).reshape(x.shape)
        probe = RNG.normal(size=(2, 3, 3, 3))
        g = max_pool2d_backward(x, probe, size=2)
        ok, errs = check_gradient(
            lambda v: np.sum(max_pool2d(v.reshape(x.shape), size=2) * probe),
            x.ravel().copy(), g.ravel())
        assert ok, errs.max()


class TestBilinear:
    def test_center_of_unit_square(self):
        m = np.array([[[0.0, 1.0], [2.0, 3.0]]])
        assert bilinear_sample(m, 0.5, 0.5)[0] == pytest.approx(1.5)

    def test_lattice_points_exact(self):
        m = RNG.normal(size=(2, 5, 5))
        for y in range(5):
            for x in range(5):
                np.testing.assert_allclose(bilinear_sample(m, float(y), float(x)), m[:, y, x])

    def test_border_clamp(self):
        m = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        np.testing.assert_allclose(bilinear_sample(m, -5.0, -5.0), [1.0])
        np.testing.assert_allclose(bilinear_sample(m, 9.0, 9.0), [4.0])

    def test_gather_matches_pointwise(self):
        m = RNG.normal(size=(3, 6, 7))
        ys = RNG.uniform(0, 5, size=11)
        xs = RNG.uniform(0, 6, size=11)
        got = bilinear_gather(m, ys, xs)
        for j in range(11):
            np.testing.assert_allclose(got[:, j], bilinear_sample(m, ys[j], xs[j]), atol=1e-13)

    def test_gather_gradients(self):
        m = RNG.normal(size=(2, 5, 5))
        ys = RNG.uniform(0.2, 3.7, size=6)  # interior, off the integer lattice
        xs = RNG.uniform(0.2, 3.7, size=6)
        ys += (np.abs(ys - np.round(ys)) < 0.05) * 0.1
        xs += (np.abs(xs - np.round(xs)) < 0.05) * 0.1
        probe = RNG.normal(size=(2, 6))
        gm, gys, gxs = bilinear_gather_backward(m, ys, xs, probe)
        ok, errs = check_gradient(
            lambda v: np.sum(bilinear_gather(v.reshape(m.shape), ys, xs) * probe),
            m.ravel().copy(), gm.ravel())
        assert ok, errs.max()
        ok, errs = check_gradient(
            lambda v: np.sum(bilinear_gather(m, v, xs) * probe), ys.copy(), gys)
        assert ok, errs.max()
        ok, errs = check_gradient(
            lambda v: np.sum(bilinear_gather(m, ys, v) * probe), xs.copy(), gxs)
        assert ok, errs.max()

    def test_sample_backward_shapes(self):
        m = np.zeros((3, 4, 4))
        gmap, gy, gx = bilinear_sample_backward(m, 1.3, 2.2, np.ones(3))
        assert gmap.shape == (3, 4, 4)
        assert isinstance(gy, float) and isinstance(gx, float)

    def test_resize_identity(self):
        m = RNG.normal(size=(2, 4, 4))
        np.testing.assert_allclose(bilinear_resize(m, 4, 4), m, atol=1e-12)

    def test_resize_constant_preserved(self):
        m = np.full((1, 3, 3), 7.25)
        np.testing.assert_allclose(bilinear_resize(m, 9, 5), 7.25)


class TestNearestResize:
    def test_upsample_by_two_repeats(self):
        m = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        out = nearest_resize(m, 4, 4)
        np.testing.assert_array_equal(out[0, :2, :2], [[1.0, 1.0], [1.0, 1.0]])
        np.testing.assert_array_equal(out[0, 2:, 2:], [[4.0, 4.0], [4.0, 4.0]])

    def test_adjoint_dot_product_identity(self):
        # <resize(x), y> == <x, adjoint(y)> for all x, y
        x = RNG.normal(size=(2, 3, 5))
        y = RNG.normal(size=(2, 6, 10))
        lhs = np.sum(nearest_resize(x, 6, 10) * y)
        rhs = np.sum(x * nearest_resize_adjoint(y, 3, 5))
        assert lhs == pytest.approx(rhs, rel=1e-12)


class TestColumnsAdjoint:
    def test_conv_input_grad_is_true_adjoint(self):
        # <conv(x), y> - bias term == <x, conv_backward_input(y)>
        x = RNG.normal(size=(1, 2, 7, 7))
        kern = ConvKernel(Tensor(RNG.normal(size=(3, 2, 3, 3))), Tensor(np.zeros(3)),
                          stride=2, padding=1)
        y = RNG.normal(size=conv2d(x, kern).shape)
        gx, _, _ = conv2d_backward(x, kern, y)
        lhs = np.sum(conv2d(x, kern) * y)
        rhs = np.sum(x * gx)
        assert lhs == pytest.approx(rhs, rel=1e-12)


class TestUtilities:
    def test_sgd_step_updates_in_place(self):
        t = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        t.ensure_grad()
        t.grad[:] = [0.5, -1.0]
        sgd_step([t], [t.grad], lr=0.1)
        np.testing.assert_allclose(t.data, [0.95, 2.1])

    def test_sgd_step_rejects_shape_mismatch(self):
        t = Tensor(np.zeros(3))
        with pytest.raises(ShapeMismatchError):
            sgd_step([t], [np.zeros(4)], lr=0.1)

    def test_assert_finite_raises_on_nan(self):
        with pytest.raises(FloatingPointError):
            assert_finite(np.array([1.0, np.nan]), "probe")

    def test_tensor_copy_detaches(self):
        t = Tensor(np.ones(3))
        c = t.copy()
        c.data[0] = 5.0
        assert t.data[0] == 1.0

    def test_finite_difference_on_quadratic(self):
        x = RNG.normal(size=8)
        g = finite_difference_gradient(lambda v: float(np.sum(v**2)), x.copy())
        errs = relative_errors(2 * x, g)
        assert errs.max() < 1e-7
