import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from consist_diffuse import numerics as nx
from consist_diffuse.numerics import Rng, ShapeError, Tensor

from gradcheck import numeric_grad, rel_error


def test_mul_identity():
    out = nx.mul(nx.tensor([1.0, 2.0, 3.0]), nx.tensor([1.0, 1.0, 1.0]))
    np.testing.assert_array_equal(out.data, [1.0, 2.0, 3.0])


def test_matmul_identity_matrix():
    v = nx.tensor(np.random.default_rng(0).normal(size=3))
    np.testing.assert_array_equal(nx.matmul(nx.tensor(np.eye(3)), v).data, v.data)


def test_sum_of_product_gradient_is_other_operand():
    rng = np.random.default_rng(1)
    a = nx.parameter(rng.normal(size=(4, 4)))
    b = nx.constant(rng.normal(size=(4, 4)))
    nx.backward(nx.sum(nx.mul(a, b)))
    np.testing.assert_allclose(a.grad.data, b.data, rtol=1e-12)

    def f():
        return float(np.sum(a.data * b.data))

    assert rel_error(a.grad.data, numeric_grad(f, a)) < 1e-8


def test_mse_values():
    x = nx.tensor([0.3, -1.2, 4.0])
    assert nx.mse(x, x).item() == 0.0
    assert nx.mse(nx.tensor([0.0, 0.0]), nx.tensor([2.0, 0.0])).item() == 2.0


def test_mse_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    a = nx.parameter(rng.normal(size=8))
    b = nx.parameter(rng.normal(size=8))
    nx.backward(nx.mse(a, b))

    def f():
        return float(np.mean((a.data - b.data) ** 2))

    assert rel_error(a.grad.data, numeric_grad(f, a)) < 1e-5
    assert rel_error(b.grad.data, numeric_grad(f, b)) < 1e-5


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
        nx.add(nx.tensor(np.zeros((2, 3))), nx.tensor(np.zeros((3, 2))))
    with pytest.raises(ShapeError):
        nx.matmul(nx.tensor(np.zeros((2, 3))), nx.tensor(np.zeros((2, 3))))
    with pytest.raises(ShapeError):
        nx.mse(nx.tensor(np.zeros(3)), nx.tensor(np.zeros(4)))


def test_bias_broadcast_along_leading_axis():
    x = nx.parameter(np.ones((5, 3)))
    b = nx.parameter(np.array([1.0, 2.0, 3.0]))
    nx.backward(nx.sum(nx.add(x, b)))
    np.testing.assert_array_equal(b.grad.data, [5.0, 5.0, 5.0])


def test_backward_simple_square():
    w = nx.parameter([1.0, 2.0])
    nx.backward(nx.sum(nx.square(w)))
    np.testing.assert_array_equal(w.grad.data, [2.0, 4.0])


def test_backward_accumulates_on_repeat():
    w = nx.parameter([1.0, 2.0])
    loss = nx.sum(nx.square(w))
    nx.backward(loss)
    nx.backward(loss)
    np.testing.assert_array_equal(w.grad.data, [4.0, 8.0])


def test_frozen_leaf_gets_no_gradient():
    w = nx.parameter([1.0, 2.0])
    frozen = nx.tensor([3.0, 4.0])
    nx.backward(nx.sum(nx.mul(w, frozen)))
    assert frozen.grad is None
    assert w.grad is not None


def test_backward_rejects_non_scalar():
    w = nx.parameter([1.0, 2.0])
    with pytest.raises(ShapeError):
        nx.backward(nx.square(w))


def test_result_requires_grad_iff_an_input_does():
    a, b = nx.tensor([1.0]), nx.tensor([2.0])
    assert not nx.add(a, b).requires_grad
    assert nx.add(nx.parameter([1.0]), b).requires_grad
    with nx.no_grad():
        assert not nx.add(nx.parameter([1.0]), b).requires_grad


def _mlp_loss(params, x, y):
    h = x
    for i, (w, b) in enumerate(params):
        h = nx.add(nx.matmul(h, nx.transpose(w)), b)
        if i < len(params) - 1:
            h = nx.silu(h) if i % 2 == 0 else nx.tanh(h)
    return nx.mse(h, y)


def test_three_layer_network_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    sizes = [5, 7, 6, 3]
    params = [
        (nx.parameter(rng.normal(size=(o, i)) / np.sqrt(i)), nx.parameter(rng.normal(size=o) * 0.1))
        for i, o in zip(sizes[:-1], sizes[1:])
    ]
    x = nx.constant(rng.normal(size=(4, 5)))
    y = nx.constant(rng.normal(size=(4, 3)))
    nx.backward(_mlp_loss(params, x, y))

    def f():
        with nx.no_grad():
            return _mlp_loss(params, x, y).item()

    for w, b in params:
        assert rel_error(w.grad.data, numeric_grad(f, w)) < 1e-4
        assert rel_error(b.grad.data, numeric_grad(f, b)) < 1e-4


def _structural_loss(a, b):
    # exercises concat, reshape, index_select, scalar_mul, sub, neg, mean
    c = nx.concat([a, b], axis=1)
    r = nx.reshape(c, (c.shape[1], c.shape[0]))
    s = nx.index_select(r, [0, 2, 2, 1])
    return nx.mean(nx.square(nx.sub(nx.scalar_mul(s, 1.5), nx.neg(s))))


def test_structural_ops_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    a = nx.parameter(rng.normal(size=(3, 2)))
    b = nx.parameter(rng.normal(size=(3, 4)))
    nx.backward(_structural_loss(a, b))

    def f():
        with nx.no_grad():
            return _structural_loss(a, b).item()

    assert rel_error(a.grad.data, numeric_grad(f, a)) < 1e-4
    assert rel_error(b.grad.data, numeric_grad(f, b)) < 1e-4


def test_matrix_vector_gradient():
    rng = np.random.default_rng(5)
    m = nx.parameter(rng.normal(size=(3, 4)))
    v = nx.parameter(rng.normal(size=4))
    nx.backward(nx.sum(nx.square(nx.matmul(m, v))))

    def f():
        return float(np.sum((m.data @ v.data) ** 2))

    assert rel_error(m.grad.data, numeric_grad(f, m)) < 1e-4
    assert rel_error(v.grad.data, numeric_grad(f, v)) < 1e-4


def test_detached_tensor_acts_as_constant():
    w = nx.parameter([0.5, 0.25])
    c = nx.tensor([2.0, 3.0])
    before = nx.sum(nx.mul(w, c)).item()
    c.data = c.data + 1.0
    after = nx.sum(nx.mul(w, c))
    nx.backward(after)
    assert after.item() != before
    assert c.grad is None


# -- rng ------------------------------------------------------------------------

def test_sample_gaussian_zero_std_is_constant():
    out = nx.sample_gaussian(Rng(3), (4, 5), mean=1.0, std=0.0)
    np.testing.assert_array_equal(out.data, np.ones((4, 5)))
    assert not out.requires_grad


def test_sample_gaussian_rejects_negative_std():
    with pytest.raises(ValueError):
        nx.sample_gaussian(Rng(0), (3,), std=-1.0)


def test_sample_gaussian_mean_within_clt_bound():
    # 5-sigma bound for the mean of 1e6 standard normals is 5e-3
    draws = nx.sample_gaussian(Rng(11), (1_000_000,), 0.0, 1.0).data
    assert abs(draws.mean()) < 0.005


def test_same_seed_is_bit_identical():
    a = nx.sample_gaussian(Rng(42), (3, 3)).data
    b = nx.sample_gaussian(Rng(42), (3, 3)).data
    assert a.tobytes() == b.tobytes()
    assert Rng(42).child(1, 2).normal(5).tobytes() == Rng(42).child(1, 2).normal(5).tobytes()
    assert Rng(42).child(1).normal(5).tobytes() != Rng(42).child(2).normal(5).tobytes()


def test_tensor_rejects_empty_shapes():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))


@settings(max_examples=25, deadline=None)
@given(
    st.sampled_from(["add", "sub", "mul"]),
    st.sampled_from([(3,), (2, 3), (4, 2, 3)]),
    st.booleans(),
    st.integers(0, 2**32 - 1),
)
def test_elementwise_gradients_property(op, shape, broadcast, seed):
    rng = np.random.default_rng(seed)
    a = nx.parameter(rng.normal(size=shape))
    b_shape = shape[-1:] if broadcast else shape
    b = nx.parameter(rng.normal(size=b_shape))
    fn = getattr(nx, op)
    w = nx.constant(rng.normal(size=shape))

    def loss():
        return nx.sum(nx.mul(nx.tanh(fn(a, b)), w))

    nx.backward(loss())

    def f():
        with nx.no_grad():
            return loss().item()

    assert rel_error(a.grad.data, numeric_grad(f, a)) < 1e-4
    assert rel_error(b.grad.data, numeric_grad(f, b)) < 1e-4


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_graph_evaluation_is_deterministic(seed):
    def run():
        rng = Rng(seed)
        w = nx.parameter(rng.normal((4, 3)))
        x = nx.sample_gaussian(rng, (5, 3))
        loss = nx.mean(nx.silu(nx.matmul(x, nx.transpose(w))))
        nx.backward(loss)
        return loss.data.tobytes(), w.grad.data.tobytes()

    assert run() == run()
