import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from amoelora import diffcore as dc


def leaf(x):
    return dc.parameter(x)


def grads_of(loss_fn, *params):
    for p in params:
        p.zero_grad()
    with dc.Tape() as tape:
        loss = loss_fn()
    dc.backward(tape, loss)
    return [p.grad_or_zeros() for p in params]


def test_tensor2_rejects_nonfinite_leaf():
    with pytest.raises(dc.ContractError):
        dc.parameter([[1.0, np.nan]])
    with pytest.raises(dc.ContractError):
        dc.parameter([[np.inf]])


def test_tensor2_shapes():
    assert dc.tensor2(3.0).shape == (1, 1)
    assert dc.tensor2([1, 2, 3]).shape == (1, 3)
    with pytest.raises(dc.DimensionError):
        dc.tensor2(np.zeros((2, 2, 2)))


class TestMatmul:
    def test_identity(self):
        M = np.array([[1.5, -2.0], [0.25, 4.0]])
        out = dc.matmul(dc.constant(np.eye(2)), dc.constant(M))
        np.testing.assert_array_equal(out.value, M)

    def test_zero(self):
        out = dc.matmul(dc.constant([[1, 2], [3, 4]]), dc.constant(np.zeros((2, 2))))
        np.testing.assert_array_equal(out.value, np.zeros((2, 2)))

    def test_hand_product_and_gradient(self):
        a = leaf([[1.0, 2.0]])
        b = leaf([[3.0], [4.0]])
        with dc.Tape() as tape:
            out = dc.matmul(a, b)
        assert out.value.tolist() == [[11.0]]
        dc.backward(tape, out)
        # d(a·b)/da = b^T under seed [[1]]
        assert a.grad.tolist() == [[3.0, 4.0]]
        assert b.grad.tolist() == [[1.0], [2.0]]

    def test_shape_error_names_both(self):
        with pytest.raises(dc.DimensionError, match="2x3.*2x3"):
            dc.matmul(dc.constant(np.zeros((2, 3))), dc.constant(np.zeros((2, 3))))


class TestSoftmax:
    def test_uniform(self):
        out = dc.softmax_rows(dc.constant([[0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.value, [[1 / 3] * 3], rtol=0, atol=1e-15)

    def test_ln2(self):
        out = dc.softmax_rows(dc.constant([[math.log(2), 0.0]]))
        np.testing.assert_allclose(out.value, [[2 / 3, 1 / 3]], rtol=0, atol=1e-15)

    def test_large_logit_matches_arbitrary_precision(self):
        out = dc.softmax_rows(dc.constant([[1000.0, 0.0]]))
        mpmath.mp.dps = 50
        e = [mpmath.e ** mpmath.mpf(1000), mpmath.mpf(1)]
        oracle = [float(x / sum(e)) for x in e]
        assert np.all(np.isfinite(out.value))
        np.testing.assert_allclose(out.value[0], oracle, rtol=0, atol=1e-300)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 7)),
                  elements=st.floats(-1e3, 1e3)))
    def test_rows_sum_to_one(self, x):
        s = dc.softmax_rows(dc.constant(x)).value
        assert np.all(s >= 0)
        np.testing.assert_allclose(s.sum(axis=1), 1.0, rtol=0, atol=1e-12)


class TestElementwise:
    def test_add_zero(self):
        M = np.arange(6.0).reshape(2, 3)
        out = dc.elementwise("add", dc.constant(M), dc.constant(np.zeros((2, 3))))
        np.testing.assert_array_equal(out.value, M)

    def test_tanh_zero_passes_gradient(self):
        x = leaf(np.zeros((2, 3)))
        seed = np.array([[1.0, -2.0, 3.0], [0.5, 0.0, -1.5]])
        with dc.Tape() as tape:
            t = dc.elementwise("tanh", x)
            loss = dc.sum_all(dc.hadamard(t, dc.constant(seed)))
        np.testing.assert_array_equal(t.value, np.zeros((2, 3)))
        dc.backward(tape, loss)
        np.testing.assert_array_equal(x.grad, seed)

    def test_mean_rows(self):
        out = dc.elementwise("mean_rows", dc.constant([[1.0, 3.0], [3.0, 5.0]]))
        assert out.value.tolist() == [[2.0, 4.0]]

    def test_scale_and_sub(self):
        a = dc.constant([[1.0, 2.0]])
        assert dc.elementwise("scale", a, 3.0).value.tolist() == [[3.0, 6.0]]
        assert dc.elementwise("sub", a, a).value.tolist() == [[0.0, 0.0]]

    def test_hadamard_shape_error(self):
        with pytest.raises(dc.DimensionError):
            dc.elementwise("hadamard", dc.constant(np.zeros((2, 2))), dc.constant(np.zeros((2, 3))))

    def test_unknown_kind(self):
        with pytest.raises(dc.ContractError):
            dc.elementwise("cosh", dc.constant([[1.0]]))

    def test_row_vector_add_broadcasts(self):
        out = dc.add(dc.constant(np.zeros((3, 2))), dc.constant([[1.0, 2.0]]))
        assert out.value.tolist() == [[1.0, 2.0]] * 3


class TestBackward:
    def test_sum_gives_ones(self):
        M = leaf(np.random.default_rng(0).normal(size=(3, 4)))
        (g,) = grads_of(lambda: dc.sum_all(M), M)
        np.testing.assert_array_equal(g, np.ones((3, 4)))

    def test_fan_out_accumulates(self):
        M = leaf(np.random.default_rng(1).normal(size=(2, 2)))
        (g,) = grads_of(lambda: dc.sum_all(dc.add(M, M)), M)
        np.testing.assert_array_equal(g, 2 * np.ones((2, 2)))

    def test_softmax_sum_has_zero_gradient(self):
        x = leaf(np.random.default_rng(2).normal(size=(3, 5)))
        (g,) = grads_of(lambda: dc.sum_all(dc.softmax_rows(x)), x)
        np.testing.assert_allclose(g, 0.0, atol=1e-15)

    def test_non_scalar_root(self):
        x = leaf(np.ones((2, 2)))
        with dc.Tape() as tape:
            y = dc.scale(x, 2.0)
        with pytest.raises(dc.ContractError):
            dc.backward(tape, y)

    def test_constant_never_accumulates(self):
        c = dc.constant(np.ones((2, 2)))
        x = leaf(np.ones((2, 2)))
        grads_of(lambda: dc.sum_all(dc.hadamard(c, x)), x)
        assert c.grad is None and not c.requires_grad

    def test_no_recording_outside_tape(self):
        x = leaf(np.ones((2, 2)))
        y = dc.scale(x, 2.0)
        assert not y.requires_grad and y.parents == ()

    def test_tape_order_is_topological(self):
        x = leaf(np.ones((2, 2)))
        with dc.Tape() as tape:
            a = dc.scale(x, 2.0)
            b = dc.tanh(a)
            dc.sum_all(dc.add(a, b))
        seen = set()
        for n in tape.nodes:
            for p in n.parents:
                assert p is x or id(p) in seen
            seen.add(id(n))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5))
def test_output_shapes_depend_only_on_input_shapes(m, k, n):
    rng = np.random.default_rng(m * 100 + k * 10 + n)
    a = dc.constant(rng.normal(size=(m, k)))
    b = dc.constant(rng.normal(size=(k, n)))
    assert dc.matmul(a, b).shape == (m, n)
    assert dc.softmax_rows(a).shape == (m, k)
    assert dc.mean_rows(a).shape == (1, k)
    assert dc.rowsum(a).shape == (m, 1)
    assert dc.transpose(a).shape == (k, m)
    assert dc.tanh(a).shape == (m, k)
    assert dc.layernorm_rows(a).shape == (m, k)


class TestGradCheck:
    def test_linear_sum(self):
        M = leaf(np.random.default_rng(3).normal(size=(3, 3)))
        assert dc.grad_check(lambda: dc.sum_all(M), [M], eps=1e-6) < 1e-9

    def test_eps_must_be_positive(self):
        M = leaf(np.ones((1, 1)))
        with pytest.raises(dc.ContractError):
            dc.grad_check(lambda: dc.sum_all(M), [M], eps=0.0)

    def test_every_op(self):
        rng = np.random.default_rng(4)
        a = leaf(rng.normal(size=(4, 6)))
        b = leaf(rng.normal(size=(6, 4)))
        row = leaf(rng.normal(size=(1, 4)))
        s = leaf(rng.normal(size=(4, 1)))
        table = leaf(rng.normal(size=(5, 4)))
        ids = np.array([0, 3, 3, 1])
        targets = np.array([1, 0, 3, 2])
        mask = np.array([True, False, True, True])

        def loss():
            h = dc.add(dc.matmul(a, b), row)
            h = dc.layernorm_rows(dc.add(h, dc.gather_rows(table, ids)))
            h = dc.colscale(dc.tanh(h), s)
            att = dc.softmax_rows(dc.matmul(h, dc.transpose(h)))
            h = dc.concat_cols([dc.slice_cols(dc.matmul(att, h), 0, 2),
                                dc.relu(dc.slice_cols(h, 2, 4))])
            h = dc.sub(h, dc.scale(dc.hadamard(h, h), 0.3))
            extra = dc.sum_all(dc.add(dc.rowsum(h), dc.constant(np.zeros((4, 1)))))
            return dc.add(dc.cross_entropy_rows(h, targets, mask),
                          dc.scale(dc.add(extra, dc.sum_all(dc.mean_rows(h))), 0.1))

        assert dc.grad_check(loss, [a, b, row, s, table], eps=1e-6) < 1e-5


class TestCrossEntropy:
    def test_uniform_logits(self):
        V = 7
        out = dc.cross_entropy_rows(dc.constant(np.zeros((3, V))), [0, 1, 2], [True] * 3)
        assert out.value[0, 0] == pytest.approx(math.log(V), abs=1e-14)

    def test_empty_mask(self):
        with pytest.raises(dc.ContractError):
            dc.cross_entropy_rows(dc.constant(np.zeros((2, 3))), [0, 1], [False, False])
