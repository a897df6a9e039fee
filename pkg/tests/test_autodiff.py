import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ftrobust import autodiff as ad
from ftrobust.errors import ContractError, DimensionError, RankError
from ftrobust.gradcheck import check_gradients, numeric_grad, relative_error

from _cases import OP_CASES, op_instance, vit_instance


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_matches_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(5):
        build, arrays = op_instance(name, rng)
        assert check_gradients(build, arrays) < 1e-6, name


def test_tiny_vit_matches_finite_differences():
    build, arrays = vit_instance(np.random.default_rng(0))
    assert check_gradients(build, arrays) < 1e-6


def test_numeric_grad_restores_input():
    x = np.array([1.0, 2.0, 3.0])
    before = x.copy()
    g = numeric_grad(lambda: float((x ** 2).sum()), x)
    np.testing.assert_array_equal(x, before)
    np.testing.assert_allclose(g, 2 * before, rtol=1e-8)


def test_relative_error_floor():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)


def test_backward_needs_scalar():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        ad.backward(x * 2.0)


def test_backward_needs_grad_path():
    with pytest.raises(ContractError):
        ad.backward(ad.sum(ad.Tensor(np.ones(3))))


def test_gradients_accumulate_until_zeroed():
    x = ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    ad.backward(ad.sum(x * x))
    ad.backward(ad.sum(x * x))
    np.testing.assert_array_equal(x.grad, 4 * x.data)
    ad.zero_grad([x])
    ad.backward(ad.sum(x * 3.0))
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])


def test_shared_subexpression_gradient():
    x = ad.Tensor(np.array([0.5, 1.5]), requires_grad=True)
    y = x * x
    ad.backward(ad.sum(y * y + y))  # x^4 + x^2
    np.testing.assert_allclose(x.grad, 4 * x.data ** 3 + 2 * x.data)


def test_deep_chain_is_iterative():
    x = ad.Tensor(np.array(1.0), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0
    ad.backward(y)
    assert x.grad == 1.0


def test_shape_errors():
    a = ad.Tensor(np.ones((2, 3)))
    with pytest.raises(DimensionError):
        ad.add(a, ad.Tensor(np.ones((3, 2))))
    with pytest.raises(DimensionError):
        ad.matmul(a, ad.Tensor(np.ones((2, 3))))
    with pytest.raises(RankError):
        ad.kron(ad.Tensor(np.ones(3)), a)
    with pytest.raises(DimensionError):
        ad.add_trailing(a, ad.Tensor(np.ones(2)))
    with pytest.raises(DimensionError):
        ad.cross_entropy(a, np.array([0, 1, 2]))


def test_kron_forward_matches_numpy():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((4, 2))
    np.testing.assert_allclose(ad.kron(ad.Tensor(a), ad.Tensor(b)).data, np.kron(a, b))


def test_no_graph_without_grad():
    out = ad.add(ad.Tensor(np.ones(2)), ad.Tensor(np.ones(2)))
    assert out._parents == () and not out.requires_grad


def test_cross_entropy_sum_and_mean():
    logits = np.array([[2.0, 0.0], [0.0, 1.0]])
    labels = np.array([0, 1])
    m = ad.cross_entropy(ad.Tensor(logits), labels).item()
    s = ad.cross_entropy(ad.Tensor(logits), labels, reduction="sum").item()
    assert s == pytest.approx(2 * m)
    assert m == pytest.approx(np.mean([np.log1p(np.exp(-2.0)), np.log1p(np.exp(-1.0))]))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
def test_softmax_is_a_distribution(vals):
    p = ad.softmax(ad.Tensor(np.array(vals)), axis=0).data
    assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_layer_norm_output_is_standardised(seed):
    x = np.random.default_rng(seed).standard_normal((3, 16)) * 5 + 2
    y = ad.layer_norm(ad.Tensor(x)).data
    np.testing.assert_allclose(y.mean(axis=-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=-1), 1, rtol=1e-3)
