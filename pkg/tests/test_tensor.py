import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from starvqa import tensor as T
from starvqa.errors import ContractError, DimensionError
from starvqa.gradcheck import check_op, op_suite
from starvqa.tensor import SGD, Tensor


def test_matmul_oracle():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_sum_backward_is_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_gradients_accumulate_across_calls():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (x * x).sum().backward()
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, [4.0, 8.0])


def test_shared_subexpression_counts_twice():
    x = Tensor(np.array(3.0), requires_grad=True)
    y = x * x
    (y + y).backward()
    assert x.grad == pytest.approx(12.0)


def test_softmax_frozen():
    p = T.softmax(Tensor([1.0, 2.0, 3.0])).data
    np.testing.assert_allclose(p, [0.09003057317038046, 0.24472847105479767, 0.6652409557748219], atol=1e-15)


def test_softmax_stable_for_large_logits():
    p = T.softmax(Tensor([1000.0, 1000.0])).data
    np.testing.assert_array_equal(p, [0.5, 0.5])


def test_gelu_frozen():
    g = T.gelu(Tensor([-1.0, 0.0, 1.0])).data
    np.testing.assert_allclose(g, [-0.15880800939172324, 0.0, 0.8411919906082768], atol=1e-12)


def test_layernorm_zero_mean_unit_var():
    x = Tensor(np.array([[1.0, 2.0, 3.0, 4.0]]))
    y = T.layernorm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)), 1e-6).data
    assert abs(y.mean()) < 1e-12
    assert y.var() == pytest.approx(1.0, rel=1e-5)


def test_layernorm_constant_row_gives_beta():
    y = T.layernorm(Tensor(np.full((1, 4), 7.0)), Tensor(np.ones(4)), Tensor(np.arange(4.0)), 1e-6)
    np.testing.assert_allclose(y.data, [[0.0, 1.0, 2.0, 3.0]])


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.parents == ()


def test_count_macs():
    with T.count_macs() as c:
        T.matmul(Tensor(np.ones((5, 2, 3))), Tensor(np.ones((3, 4))))
    assert c.macs == 5 * 2 * 3 * 4


def test_slice_rows_out_of_range():
    with pytest.raises(IndexError):
        T.slice_rows(Tensor(np.ones((3, 2))), 2, 5)


def test_concat_mismatch():
    with pytest.raises(DimensionError):
        T.concat([Tensor(np.ones((1, 2))), Tensor(np.ones((1, 3)))], axis=0)


def test_getitem_backward_scatters():
    x = Tensor(np.zeros(4), requires_grad=True)
    (x[np.array([0, 0, 2])]).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0, 0.0])


def test_op_suite_passes():
    errs = op_suite()
    assert set(errs) >= {"matmul", "softmax", "layernorm", "gelu"}
    assert max(errs.values()) < 1e-6


def test_sgd_momentum_two_steps():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = SGD({"p": p}, lr=0.1, momentum=0.9)
    for _ in range(2):
        opt.zero_grad()
        p.grad = np.array([1.0])
        opt.step()
    # v1 = 1, p1 = 0.9; v2 = 1.9, p2 = 0.71
    np.testing.assert_allclose(p.data, [0.71])
    np.testing.assert_allclose(opt.velocity["p"], [1.9])


def test_sgd_missing_grad_treated_as_zero():
    p = Tensor(np.array([2.0]), requires_grad=True)
    opt = SGD({"p": p}, lr=0.5, momentum=0.9)
    opt.step()
    np.testing.assert_array_equal(p.data, [2.0])


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([(3,), (1, 3), (2, 1), (2, 3)]), st.integers(0, 1000))
def test_broadcast_add_mul_grad(shape_b, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=shape_b)
    assert check_op(lambda x, y: T.mul(T.add(x, y), x), a, b) < 1e-5
