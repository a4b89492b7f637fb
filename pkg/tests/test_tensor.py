import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from da2net import (
    OracleError,
    Rng,
    ShapeError,
    Tensor,
    elementwise_scale_broadcast,
    finite_difference_gradient,
    tensor_create,
)

from oracles import scale_direct


class TestTensorCreate:
    def test_zero_fill(self):
        t = tensor_create([2, 2], 0.0)
        assert t.tolist() == [[0.0, 0.0], [0.0, 0.0]]

    def test_explicit_values(self):
        t = tensor_create([1, 3], [1, 2, 3])
        assert t.tolist() == [[1.0, 2.0, 3.0]]

    def test_value_length_mismatch(self):
        with pytest.raises(ShapeError, match="expected 2 values, got 3"):
            tensor_create([2], [1, 2, 3])

    def test_normal_fill_needs_rng(self):
        with pytest.raises(ShapeError, match="rng"):
            tensor_create([2, 2], "normal")

    def test_normal_fill(self):
        t = tensor_create([100], "normal", rng=Rng(1), mean=5.0, std=0.1)
        assert abs(float(t.data.mean()) - 5.0) < 0.1

    def test_bad_extent(self):
        with pytest.raises(ShapeError):
            tensor_create([2, 0])

    def test_dtypes(self):
        assert tensor_create([1], 0.0, dtype="f32").dtype == np.float32
        assert tensor_create([1], 0.0, dtype="f64").dtype == np.float64


class TestTensorInvariants:
    def test_immutable(self):
        t = tensor_create([2], [1, 2])
        with pytest.raises(ValueError):
            t.data[0] = 9.0
        with pytest.raises(AttributeError):
            t.data = np.zeros(2)

    @given(st.lists(st.integers(min_value=1, max_value=5), min_size=4, max_size=4),
           st.data())
    @settings(max_examples=50, deadline=None)
    def test_row_major_flat_index(self, shape, data):
        n, c, h, w = shape
        coords = tuple(data.draw(st.integers(0, extent - 1)) for extent in shape)
        t = tensor_create(shape, list(range(n * c * h * w)))
        ni, ci, hi, wi = coords
        flat = ((ni * c + ci) * h + hi) * w + wi
        assert t.data[coords] == t.data.reshape(-1)[flat]

    def test_item_and_reshape(self):
        t = tensor_create([1], [3.5])
        assert t.item() == 3.5
        assert tensor_create([6], list(range(6))).reshape(2, 3).shape == (2, 3)


class TestRng:
    def test_bit_for_bit_reproducible(self):
        a = Rng(42, 7).normal((100,))
        b = Rng(42, 7).normal((100,))
        assert np.array_equal(a, b)

    def test_streams_differ(self):
        a = Rng(42, 0).normal((100,))
        b = Rng(42, 1).normal((100,))
        assert not np.array_equal(a, b)

    def test_split_matches_direct_construction(self):
        assert np.array_equal(Rng(9).split(3).normal((8,)), Rng(9, 3).normal((8,)))

    def test_call_sequence_matters_not_order_of_objects(self):
        r = Rng(5)
        first = r.normal((4,))
        second = r.normal((4,))
        assert not np.array_equal(first, second)


class TestScaleBroadcast:
    def test_gate_on_off(self):
        x = tensor_create([1, 2, 2, 2], 2.0)
        w = tensor_create([1, 2, 1, 1], [1.0, 0.0])
        out = elementwise_scale_broadcast(x, w)
        assert np.array_equal(out.data[0, 0], np.full((2, 2), 2.0))
        assert np.array_equal(out.data[0, 1], np.zeros((2, 2)))

    def test_identity_gate(self):
        x = tensor_create([2, 3, 2, 2], "normal", rng=Rng(3))
        w = tensor_create([1, 3, 1, 1], 1.0)
        assert np.array_equal(elementwise_scale_broadcast(x, w).data, x.data)

    def test_matches_loop_oracle(self, rng):
        x = Tensor(rng.normal((2, 4, 3, 3), dtype="f64"))
        w = Tensor(rng.normal((2, 4, 1, 1), dtype="f64"))
        out = elementwise_scale_broadcast(x, w)
        assert np.allclose(out.data, scale_direct(x.data, w.data), atol=1e-12)

    def test_channel_mismatch_names_both(self):
        x = tensor_create([1, 3, 2, 2], 1.0)
        w = tensor_create([1, 4, 1, 1], 1.0)
        with pytest.raises(ShapeError, match="3.*4|4.*3"):
            elementwise_scale_broadcast(x, w)

    @given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4))
    @settings(max_examples=30, deadline=None)
    def test_unit_interval_gates_never_amplify(self, n, c, hw):
        r = Rng(n * 100 + c * 10 + hw)
        x = Tensor(r.normal((n, c, hw, hw)))
        w = Tensor(r.uniform((1, c, 1, 1), 0.001, 0.999))
        out = elementwise_scale_broadcast(x, w)
        assert np.all(np.abs(out.data) <= np.abs(x.data) + 1e-7)

    def test_purity(self):
        x = tensor_create([1, 2, 2, 2], [1, 2, 3, 4, 5, 6, 7, 8])
        w = tensor_create([1, 2, 1, 1], [0.5, 0.25])
        before = x.data.copy()
        a = elementwise_scale_broadcast(x, w)
        b = elementwise_scale_broadcast(x, w)
        assert np.array_equal(x.data, before)
        assert np.array_equal(a.data, b.data)


class TestFiniteDifference:
    def test_linear_function(self):
        x = tensor_create([2, 3], "normal", rng=Rng(4), dtype="f64")
        g = finite_difference_gradient(lambda t: float(t.data.sum()), x, 1e-5)
        assert np.allclose(g.data, 1.0, atol=1e-9)

    def test_quadratic(self):
        x = tensor_create([2], [3.0, -1.0], dtype="f64")
        g = finite_difference_gradient(lambda t: 0.5 * float((t.data ** 2).sum()), x, 1e-5)
        assert np.allclose(g.data, [3.0, -1.0], atol=1e-7)

    def test_sigmoid_sum_matches_analytic(self):
        x = tensor_create([2, 3], "normal", rng=Rng(5), dtype="f64")

        def f(t):
            return float((1.0 / (1.0 + np.exp(-t.data))).sum())

        g = finite_difference_gradient(f, x, 1e-5)
        s = 1.0 / (1.0 + np.exp(-x.data))
        assert np.allclose(g.data, s * (1 - s), atol=1e-7)

    def test_requires_f64(self):
        x = tensor_create([2], [1, 2], dtype="f32")
        with pytest.raises(ShapeError, match="f64|float64"):
            finite_difference_gradient(lambda t: 0.0, x)

    def test_nonfinite_reports_index(self):
        x = tensor_create([2, 2], [1, 2, 3, 4], dtype="f64")

        def f(t):
            return float("nan") if t.data[1, 0] != 3.0 else 1.0

        with pytest.raises(OracleError, match=r"\(1, 0\)"):
            finite_difference_gradient(f, x)
