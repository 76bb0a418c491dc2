"""Tests for the dense-tensor substrate."""

import numpy as np
import pytest

from occgeom import tensor


class TestMatmul:
    def test_identity(self):
        a = np.arange(9.0).reshape(3, 3)
        assert np.array_equal(tensor.matmul(np.eye(3), a), a)

    def test_hand_product(self):
        out = tensor.matmul([[1, 2], [3, 4]], [[0, 1], [1, 0]])
        assert np.array_equal(out, [[2, 1], [4, 3]])

    def test_zero_annihilator(self):
        a = np.arange(6.0).reshape(2, 3)
        assert np.array_equal(tensor.matmul(a, np.zeros((3, 4))), np.zeros((2, 4)))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            tensor.matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(tensor.softmax(np.zeros(3)), np.full(3, 1 / 3))

    def test_masked_entry(self):
        out = tensor.softmax(np.array([-np.inf, 0.0]))
        assert out[0] == 0.0
        assert out[1] == 1.0

    def test_two_logits(self):
        out = tensor.softmax(np.array([1.0, 2.0]))
        np.testing.assert_allclose(out, [0.26894142, 0.73105858], atol=1e-8)

    def test_all_masked_row_is_zero(self):
        out = tensor.softmax(np.array([[-np.inf, -np.inf], [0.0, 0.0]]), axis=1)
        assert np.array_equal(out[0], [0.0, 0.0])
        np.testing.assert_allclose(out[1], [0.5, 0.5])

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = rng.normal(scale=50.0, size=(4, 7))
            for axis in (0, 1, -1):
                s = tensor.softmax(x, axis=axis).sum(axis=axis)
                np.testing.assert_allclose(s, 1.0, atol=1e-6)
                assert np.all(tensor.softmax(x, axis=axis) >= 0)

    def test_bad_axis(self):
        with pytest.raises(ValueError):
            tensor.softmax(np.zeros(3), axis=2)


class TestBilinearSample:
    def test_lattice_point_exact(self):
        rng = np.random.default_rng(1)
        img = rng.uniform(size=(7, 9, 2))
        vals, ok = tensor.bilinear_sample(img, np.array([[3.0, 5.0]]))
        assert ok[0]
        assert np.array_equal(vals[0], img[5, 3])

    def test_midpoint_of_four(self):
        img = np.zeros((2, 2, 1))
        img[1, :, 0] = 1.0
        vals, ok = tensor.bilinear_sample(img, np.array([[0.5, 0.5]]))
        assert ok[0]
        assert vals[0, 0] == pytest.approx(0.5)

    def test_out_of_bounds(self):
        img = np.ones((4, 4, 1))
        vals, ok = tensor.bilinear_sample(img, np.array([[-10.0, -10.0]]))
        assert not ok[0]
        assert vals[0, 0] == 0.0

    def test_linear_along_axis(self):
        rng = np.random.default_rng(2)
        img = rng.uniform(size=(5, 6, 3))
        u0, v = 2.0, 3.0
        f = rng.uniform(size=10)
        vals, _ = tensor.bilinear_sample(img, np.stack([u0 + f, np.full(10, v)], axis=1))
        expect = np.outer(1 - f, img[3, 2]) + np.outer(f, img[3, 3])
        np.testing.assert_allclose(vals, expect, atol=1e-12)

    def test_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(3)
        img = rng.uniform(size=(6, 7, 2))
        uv = rng.uniform([0.3, 0.3], [5.3, 4.3], size=(8, 2))
        du, dv = tensor.bilinear_sample_grad(img, uv)
        eps = 1e-7
        for k in range(8):
            for axis, grad in ((0, du), (1, dv)):
                hi = uv[k].copy()
                hi[axis] += eps
                lo = uv[k].copy()
                lo[axis] -= eps
                vh, _ = tensor.bilinear_sample(img, hi[None])
                vl, _ = tensor.bilinear_sample(img, lo[None])
                np.testing.assert_allclose(
                    (vh - vl)[0] / (2 * eps), grad[k], atol=1e-6
                )


class TestTrilinearSample:
    def test_center_exact(self):
        rng = np.random.default_rng(4)
        vol = rng.uniform(size=(3, 4, 5))
        vals, ok = tensor.trilinear_sample(vol, np.array([[1.0, 2.0, 3.0]]))
        assert ok[0] and vals[0] == vol[1, 2, 3]

    def test_midpoint(self):
        vol = np.zeros((2, 1, 1))
        vol[1] = 4.0
        vals, _ = tensor.trilinear_sample(vol, np.array([[0.5, 0.0, 0.0]]))
        assert vals[0] == pytest.approx(2.0)

    def test_outside_zero(self):
        vol = np.ones((2, 2, 2))
        vals, ok = tensor.trilinear_sample(vol, np.array([[5.0, 0.0, 0.0]]))
        assert not ok[0] and vals[0] == 0.0

    def test_channelled_matches_scalar(self):
        rng = np.random.default_rng(5)
        vol = rng.uniform(size=(3, 4, 4, 3))
        pts = rng.uniform(-1.0, 4.0, size=(20, 3))
        vals, ok = tensor.trilinear_sample(vol, pts)
        for c in range(3):
            single, ok2 = tensor.trilinear_sample(vol[c], pts)
            np.testing.assert_allclose(vals[:, c], single, atol=1e-14)
            assert np.array_equal(ok, ok2)


class TestConv3d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(6)
        x = rng.uniform(size=(2, 4, 5, 3))
        w = np.zeros((2, 2, 1, 1, 1))
        w[0, 0] = 1.0
        w[1, 1] = 1.0
        assert np.allclose(tensor.conv3d(x, w, 1), x)

    def test_full_scale_stride2_shape(self):
        x = np.zeros((1, 200, 200, 16))
        w = np.ones((1, 1, 3, 3, 3))
        assert tensor.conv3d(x, w, 2).shape == (1, 100, 100, 8)

    def test_zero_kernel(self):
        x = np.ones((1, 3, 3, 3))
        w = np.zeros((2, 1, 3, 3, 3))
        assert np.array_equal(tensor.conv3d(x, w, 1), np.zeros((2, 3, 3, 3)))

    def test_stride2_ceil_extents(self):
        w = np.ones((1, 1, 3, 3, 3))
        for n in range(1, 65):
            out = tensor.conv3d(np.ones((1, n, 1, 1)), w, 2)
            assert out.shape[1] == (n + 1) // 2, n

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            tensor.conv3d(np.ones((3, 2, 2, 2)), np.ones((1, 2, 3, 3, 3)), 1)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            tensor.conv3d(np.ones((1, 2, 2, 2)), np.ones((1, 1, 2, 2, 2)), 1)

    def test_against_loop_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 4, 3, 5))
        w = rng.normal(size=(3, 2, 3, 3, 3))
        for stride in (1, 2):
            got = tensor.conv3d(x, w, stride)
            k, p = 3, 1
            xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))
            expect = np.zeros_like(got)
            for o in range(3):
                for i in range(got.shape[1]):
                    for j in range(got.shape[2]):
                        for l in range(got.shape[3]):
                            patch = xp[:, i * stride : i * stride + k,
                                       j * stride : j * stride + k,
                                       l * stride : l * stride + k]
                            expect[o, i, j, l] = np.sum(patch * w[o])
            np.testing.assert_allclose(got, expect, atol=1e-12)


class TestGradCheck:
    def test_quadratic(self):
        x = np.array([1.0, -2.0, 3.0])
        err = tensor.grad_check(lambda v: float(np.sum(v**2)), x, 2 * x, eps=1e-4)
        assert err < 1e-6

    def test_constant(self):
        x = np.ones(4)
        err = tensor.grad_check(lambda v: 7.0, x, np.zeros(4), eps=1e-4)
        assert err == 0.0

    def test_eps_squared_scaling(self):
        # cubic has nonzero third derivative: halving eps quarters the error
        x = np.array([0.7, -1.3, 2.1])
        g = 3 * x**2
        f = lambda v: float(np.sum(v**3))
        e1 = tensor.grad_check(f, x, g, eps=1e-3)
        e2 = tensor.grad_check(f, x, g, eps=5e-4)
        assert e1 / e2 == pytest.approx(4.0, rel=1.0)
        assert e1 / e2 > 2.0

    def test_non_finite_objective(self):
        with pytest.raises(RuntimeError):
            tensor.grad_check(
                lambda v: float(np.log(v[0])), np.array([1e-9]), np.array([1e9]),
                eps=1e-4,
            )
