import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eatnet import tensor as T
from eatnet.tensor import Tensor
from eatnet.gradcheck import grad_check
from eatnet.verify import naive_conv2d


class TestConv2d:
    def test_scalar_scaling(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.full((1, 1, 1, 1), 2.0))
        b = Tensor([0.0])
        out = T.conv2d(x, w, b)
        assert out.shape == (1, 1, 3, 3)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))

    def test_output_size_formula(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 4, 4)))
        w = Tensor(rng.standard_normal((1, 1, 3, 3)))
        out = T.conv2d(x, w, stride=2, padding=1)
        assert out.shape == (1, 1, 2, 2)

    def test_depthwise_matches_naive_oracle(self, rng):
        x = rng.standard_normal((2, 4, 8, 8))
        w = rng.standard_normal((4, 1, 3, 3))
        b = rng.standard_normal(4)
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1, groups=4)
        ref = naive_conv2d(x, w, b, stride=1, padding=1, groups=4)
        assert np.abs(got.data - ref).max() <= 1e-12

    @pytest.mark.parametrize("k", [1, 2, 3])
    @pytest.mark.parametrize("stride", [1, 2, 3])
    @pytest.mark.parametrize("dilation", [1, 2, 3])
    @pytest.mark.parametrize("groups", [1, 2])
    def test_oracle_grid(self, rng, k, stride, dilation, groups):
        x = rng.standard_normal((2, 4, 8, 8))
        w = rng.standard_normal((6, 4 // groups, k, k))
        b = rng.standard_normal(6)
        pad = dilation * (k - 1) // 2
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride,
                       padding=pad, dilation=dilation, groups=groups)
        ref = naive_conv2d(x, w, b, stride, pad, dilation, groups)
        assert np.abs(got.data - ref).max() <= 1e-12

    def test_shape_mismatch_rejected(self, rng):
        x = Tensor(rng.standard_normal((1, 3, 4, 4)))
        w = Tensor(rng.standard_normal((2, 2, 3, 3)))
        with pytest.raises(ValueError):
            T.conv2d(x, w)

    def test_empty_output_rejected(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 2, 2)))
        w = Tensor(rng.standard_normal((1, 1, 5, 5)))
        with pytest.raises(ValueError):
            T.conv2d(x, w)

    def test_gradients(self, rng):
        x = Tensor(rng.standard_normal((2, 4, 6, 6)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal(4), requires_grad=True)
        rep = grad_check(
            lambda: (T.conv2d(x, w, b, stride=2, padding=1, dilation=2,
                              groups=2) ** 2).sum(),
            {"x": x, "w": w, "b": b})
        assert rep.passed(1e-6), rep.worst()


class TestLinear:
    def test_identity(self, rng):
        x = Tensor(rng.standard_normal((3, 4)))
        out = T.linear(x, Tensor(np.eye(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, x.data)

    def test_hand_matrix(self):
        out = T.linear(Tensor([1.0, 2.0]), Tensor([[1.0, 1.0], [1.0, -1.0]]),
                       Tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [3.0, -1.0])

    def test_extent_mismatch(self, rng):
        with pytest.raises(ValueError):
            T.linear(Tensor(rng.standard_normal((2, 3))),
                     Tensor(rng.standard_normal((4, 5))))

    def test_gradients(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 5)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
        b = Tensor(rng.standard_normal(4), requires_grad=True)
        rep = grad_check(lambda: (T.linear(x, w, b) ** 2).sum(),
                         {"x": x, "w": w, "b": b})
        assert rep.passed(1e-6), rep.worst()


class TestLayerNorm:
    def test_constant_row_maps_to_beta(self):
        x = Tensor(np.full((2, 5), 3.7))
        out = T.layer_norm(x, Tensor(np.ones(5)), Tensor(np.zeros(5)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-9)

    def test_two_point_row(self):
        out = T.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)),
                           Tensor(np.zeros(2)), eps=1e-12)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-5)

    def test_zero_gamma_gives_beta(self, rng):
        x = Tensor(rng.standard_normal((3, 4)))
        beta = Tensor(rng.standard_normal(4))
        out = T.layer_norm(x, Tensor(np.zeros(4)), beta)
        np.testing.assert_allclose(out.data, np.broadcast_to(beta.data, (3, 4)))

    def test_normalizes(self, rng):
        x = Tensor(rng.standard_normal((4, 8)) * 5 + 2)
        out = T.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)), eps=1e-12)
        np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.data.var(axis=-1), 1.0, atol=1e-6)

    def test_rejects_nonpositive_eps(self, rng):
        x = Tensor(rng.standard_normal((2, 3)))
        with pytest.raises(ValueError):
            T.layer_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=0.0)

    def test_gradients(self, rng):
        x = Tensor(rng.standard_normal((3, 6)), requires_grad=True)
        g = Tensor(rng.standard_normal(6), requires_grad=True)
        b = Tensor(rng.standard_normal(6), requires_grad=True)
        rep = grad_check(lambda: (T.layer_norm(x, g, b) ** 3).sum(),
                         {"x": x, "gamma": g, "beta": b})
        assert rep.passed(1e-6), rep.worst()


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data,
                                   [1 / 3] * 3)

    def test_ln2(self):
        out = T.softmax(Tensor([math.log(2.0), 0.0]))
        np.testing.assert_allclose(out.data, [2 / 3, 1 / 3], atol=1e-15)

    def test_extreme_magnitudes_no_overflow(self):
        out = T.softmax(Tensor([1000.0, 0.0]))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-300)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(min_value=-1e6, max_value=1e6), min_size=1,
                    max_size=8))
    def test_sums_to_one(self, values):
        out = T.softmax(Tensor(values)).data
        assert abs(out.sum() - 1.0) <= 1e-12
        assert np.all(out >= 0.0) and np.all(out <= 1.0)

    def test_gradients(self, rng):
        x = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
        c = Tensor(rng.standard_normal((4, 5)))
        rep = grad_check(lambda: (T.softmax(x) * c).sum(), {"x": x})
        assert rep.passed(1e-6), rep.worst()


class TestGelu:
    def test_zero(self):
        assert T.gelu(Tensor([0.0])).data[0] == 0.0

    def test_asymptotes(self):
        out = T.gelu(Tensor([20.0, -20.0]))
        np.testing.assert_allclose(out.data[0], 20.0, atol=1e-8)
        np.testing.assert_allclose(out.data[1], 0.0, atol=1e-8)

    def test_gradients_at_spec_points(self):
        x = Tensor([-2.0, -0.5, 0.5, 2.0], requires_grad=True)
        rep = grad_check(lambda: T.gelu(x).sum(), {"x": x})
        assert rep.passed(1e-6), rep.worst()


class TestBilinearSample:
    def test_exact_at_integer_coords(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 4, 5)))
        coords = Tensor(np.array([[[0.0, 0.0], [2.0, 3.0], [3.0, 4.0]]]))
        out = T.bilinear_sample(x, coords)
        np.testing.assert_array_equal(out.data[0, :, 0], x.data[0, :, 0, 0])
        np.testing.assert_array_equal(out.data[0, :, 1], x.data[0, :, 2, 3])
        np.testing.assert_array_equal(out.data[0, :, 2], x.data[0, :, 3, 4])

    def test_four_corner_average(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        out = T.bilinear_sample(x, Tensor([[[0.5, 0.5]]]))
        assert out.data[0, 0, 0] == pytest.approx(2.5)

    def test_clamps_out_of_range(self):
        x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
        out = T.bilinear_sample(x, Tensor([[[-5.0, -5.0], [100.0, 100.0]]]))
        assert out.data[0, 0, 0] == 0.0
        assert out.data[0, 0, 1] == 3.0

    def test_linear_along_each_axis(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 5, 5)))
        # sampling at base + t*delta is affine in t within one cell
        base = np.array([1.0, 2.0])
        delta = np.array([0.8, 0.6])
        ts = np.linspace(0.0, 1.0, 7)
        coords = Tensor((base[None] + ts[:, None] * delta[None])[None])
        vals = T.bilinear_sample(x, coords).data[0, 0]
        # affine in t => second differences vanish only if delta stays in one
        # cell AND the blend is bilinear; check against explicit interpolation
        expected = [
            (1 - tr % 1) * ((1 - tc % 1) * x.data[0, 0, int(tr), int(tc)]
                            + (tc % 1) * x.data[0, 0, int(tr), int(tc) + 1])
            + (tr % 1) * ((1 - tc % 1) * x.data[0, 0, int(tr) + 1, int(tc)]
                          + (tc % 1) * x.data[0, 0, int(tr) + 1, int(tc) + 1])
            for tr, tc in base[None] + ts[:, None] * delta[None]
        ]
        np.testing.assert_allclose(vals, expected, atol=1e-12)

    def test_coord_gradients(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 5, 5)), requires_grad=True)
        coords = Tensor(rng.uniform(0.6, 3.4, size=(1, 6, 2)),
                        requires_grad=True)
        rep = grad_check(lambda: (T.bilinear_sample(x, coords) ** 2).sum(),
                         {"x": x, "coords": coords}, h=1e-6)
        assert rep.passed(1e-5), rep.worst()


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_sum_of_squares_gives_2x(self, rng):
        x = Tensor(rng.standard_normal(5), requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-15)

    def test_fanout_accumulates(self, rng):
        # y = f(x) + g(x) => grad = f'(x) + g'(x)
        x = Tensor(rng.standard_normal(4), requires_grad=True)
        y = (x * x).sum() + (x * 3.0).sum()
        y.backward()
        np.testing.assert_allclose(x.grad, 2 * x.data + 3.0, atol=1e-15)

    def test_non_scalar_rejected(self, rng):
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        with pytest.raises(ValueError):
            (x * x).backward()

    def test_no_aliasing_between_tensors(self, rng):
        x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        y = x.reshape(3, 2)
        y.data[0, 0] = 99.0
        assert x.data[0, 0] != 99.0 or y.data.base is not x.data


class TestGradCheckReport:
    def test_polynomial_near_exact(self, rng):
        x = Tensor(rng.standard_normal(6), requires_grad=True)
        rep = grad_check(lambda: (x * x).sum(), {"x": x}, h=1e-5)
        assert rep.max_rel_err < 1e-9

    def test_softmax_layernorm_chain(self, rng):
        x = Tensor(rng.standard_normal((2, 5)), requires_grad=True)
        g = Tensor(rng.standard_normal(5), requires_grad=True)
        b = Tensor(rng.standard_normal(5), requires_grad=True)
        c = Tensor(rng.standard_normal((2, 5)))

        def f():
            return (T.softmax(T.layer_norm(x, g, b)) * c).sum()

        rep = grad_check(f, {"x": x, "g": g, "b": b})
        assert rep.passed(1e-6), rep.worst()

    def test_corrupted_rule_detected(self, rng):
        x = Tensor(rng.standard_normal(5), requires_grad=True)

        def corrupted():
            out = T.mul(x, x)

            def bad(g):
                x._accumulate(3.0 * g * x.data)

            out._backward = bad
            return out.sum()

        rep = grad_check(corrupted, {"x": x}, tol=1e-6)
        assert rep.max_rel_err > 1e-6

    def test_nonfinite_reported_not_raised(self):
        x = Tensor([0.5], requires_grad=True)

        def f():
            return T.log(x - 0.5).sum()  # central difference hits log(<=0)

        rep = grad_check(f, {"x": x}, h=1e-5)
        assert not rep.all_finite
