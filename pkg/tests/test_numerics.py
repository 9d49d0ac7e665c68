import math

import numpy as np
import pytest

from splitpriv import numerics as nx
from splitpriv.numerics import Graph, Tensor, gradient_check


def T(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float32), requires_grad=grad)


class TestMatmul:
    def test_identity(self):
        out = nx.matmul(T([[1, 0], [0, 1]]), T([[2, 3], [4, 5]]))
        np.testing.assert_array_equal(out.data, [[2, 3], [4, 5]])

    def test_hand_product(self):
        assert nx.matmul(T([[1, 2]]), T([[3], [4]])).data.item() == 11

    def test_shape_mismatch(self):
        with pytest.raises(nx.DimensionError):
            nx.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))

    def test_backward_formula(self, rng):
        a, b = T(rng.normal(size=(4, 5)), True), T(rng.normal(size=(5, 3)), True)
        g = rng.normal(size=(4, 3)).astype(np.float32)
        with Graph() as graph:
            out = nx.matmul(a, b)
        graph.backward(out, g)
        np.testing.assert_allclose(a.grad, g @ b.data.T, rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(b.grad, a.data.T @ g, rtol=1e-5, atol=1e-6)

    @pytest.mark.parametrize("shape_a,shape_b", [((4, 5), (5, 3)), ((2, 4, 5), (5, 3)), ((2, 4, 5), (2, 5, 3))])
    def test_gradcheck(self, rng, shape_a, shape_b):
        rep = gradient_check(nx.matmul, [rng.normal(size=shape_a), rng.normal(size=shape_b)])
        assert rep.passed, rep


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(nx.softmax(T([0, 0, 0])).data, [1 / 3] * 3, rtol=1e-6)

    def test_saturation_is_stable(self):
        np.testing.assert_allclose(nx.softmax(T([1000, 0, 0])).data, [1, 0, 0], atol=1e-6)

    def test_direct_values(self):
        # exp(k) / (e + e^2 + e^3)
        e = np.exp([1.0, 2.0, 3.0])
        np.testing.assert_allclose(nx.softmax(T([1, 2, 3])).data, e / e.sum(), atol=1e-6)
        np.testing.assert_allclose(nx.softmax(T([1, 2, 3])).data, [0.09003, 0.24473, 0.66524], atol=1e-5)

    def test_rows_sum_to_one_for_large_inputs(self, rng):
        x = rng.uniform(-1e4, 1e4, size=(50, 7))
        y = nx.softmax(T(x)).data
        assert np.all(y >= 0)
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)

    def test_bad_axis(self):
        with pytest.raises(nx.DimensionError):
            nx.softmax(T([1.0, 2.0]), axis=3)

    def test_fully_masked_row_is_uniform(self):
        y = nx.softmax(T(np.zeros((1, 2, 3))), key_mask=np.zeros((1, 3), bool)).data
        np.testing.assert_allclose(y, 1 / 3, rtol=1e-6)


class TestLayerNorm:
    def test_constant_row(self):
        out = nx.layer_norm(T([[5, 5, 5, 5]]), T(np.ones(4)), T(np.zeros(4)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_two_values(self):
        # mean 2, population std 1
        out = nx.layer_norm(T([[1, 3]]), T(np.ones(2)), T(np.zeros(2)))
        np.testing.assert_allclose(out.data, [[-1, 1]], atol=1e-4)

    def test_affine_shape_check(self):
        with pytest.raises(nx.DimensionError):
            nx.layer_norm(T([[1, 3]]), T(np.ones(3)), T(np.zeros(3)))


class TestCrossEntropy:
    def test_uniform_prediction(self):
        loss = nx.cross_entropy(T(np.zeros((3, 2))), [0, 1, 1])
        assert math.isclose(loss.data.item(), math.log(2), rel_tol=1e-6)

    def test_saturated_correct(self):
        loss = nx.cross_entropy(T([[1000, 0], [0, 1000]]), [0, 1])
        assert loss.data.item() < 1e-6

    def test_gradient_is_softmax_minus_onehot(self, rng):
        z = rng.normal(size=(4, 3)).astype(np.float32)
        y = np.array([0, 2, 1, 2])
        logits = T(z, True)
        with Graph() as g:
            loss = nx.cross_entropy(logits, y)
        g.backward(loss)
        p = np.exp(z - z.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        p[np.arange(4), y] -= 1
        np.testing.assert_allclose(logits.grad, p / 4, atol=1e-6)

    def test_out_of_range_label(self):
        with pytest.raises(nx.LabelError):
            nx.cross_entropy(T(np.zeros((2, 2))), [0, 2])


class TestTensor:
    def test_rank_limit(self):
        with pytest.raises(nx.DimensionError):
            Tensor(np.zeros((1, 1, 1, 1)))

    def test_non_finite_rejected(self):
        with pytest.raises(nx.NumericError):
            Tensor([1.0, np.nan])

    def test_non_finite_from_op(self):
        with pytest.raises(nx.NumericError), np.errstate(over="ignore"):
            nx.scale(T([1e38]), 1e10)

    def test_backward_needs_scalar_or_seed(self, rng):
        x = T(rng.normal(size=(2, 2)), True)
        with Graph() as g:
            y = nx.tanh(x)
        with pytest.raises(nx.DimensionError):
            g.backward(y)

    def test_forward_is_deterministic(self, rng):
        a, b = rng.normal(size=(6, 8)), rng.normal(size=(8, 5))
        r1 = nx.gelu(nx.matmul(T(a), T(b))).data
        r2 = nx.gelu(nx.matmul(T(a), T(b))).data
        assert r1.tobytes() == r2.tobytes()


def _ce_chain(x, w):
    return nx.cross_entropy(nx.softmax(nx.matmul(x, w)), [0, 2, 1])


PRIMITIVES = {
    "add": (lambda a, b: nx.add(a, b), [(3, 4), (3, 4)]),
    "sub": (lambda a, b: nx.sub(a, b), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: nx.mul(a, b), [(3, 4), (3, 4)]),
    "scale": (lambda a: nx.scale(a, -1.7), [(3, 4)]),
    "add_bias": (lambda a, b: nx.add_bias(a, b), [(2, 3, 4), (4,)]),
    "gelu": (nx.gelu, [(3, 5)]),
    "tanh": (nx.tanh, [(3, 5)]),
    "softmax": (lambda a: nx.softmax(a), [(2, 3, 5)]),
    "softmax_masked": (lambda a: nx.softmax(a, key_mask=np.array([[1, 1, 0, 1]], bool), heads=2), [(2, 3, 4)]),
    "layer_norm": (lambda x, g, b: nx.layer_norm(x, g, b), [(3, 6), (6,), (6,)]),
    "cross_entropy": (lambda z: nx.cross_entropy(z, [1, 0, 2]), [(3, 3)]),
    "softmax_ce_chain": (_ce_chain, [(3, 4), (4, 3)]),
    "embedding": (lambda t, p: nx.embedding(t, p, np.array([[1, 2, 1], [0, 3, 3]])), [(5, 4), (6, 4)]),
    "split_heads": (lambda x: nx.split_heads(x, 2), [(2, 3, 4)]),
    "merge_heads": (lambda x: nx.merge_heads(x, 2), [(4, 3, 2)]),
    "transpose_last": (nx.transpose_last, [(2, 3, 4)]),
    "select_position": (lambda x: nx.select_position(x, 1), [(2, 3, 4)]),
    "gather_positions": (lambda x: nx.gather_positions(x, [0, 1, 1], [2, 0, 2]), [(2, 3, 4)]),
    "mean_pool": (lambda x: nx.mean_pool(x, np.array([[1, 1, 0], [1, 0, 0]])), [(2, 3, 4)]),
    "reduce_sum": (nx.reduce_sum, [(2, 3, 4)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("seed", range(10))
def test_primitive_gradients(name, seed):
    op, shapes = PRIMITIVES[name]
    r = np.random.default_rng(seed)
    inputs = [r.normal(size=s) for s in shapes]
    rep = gradient_check(op, inputs, tolerance=1e-4, seed=seed)
    assert rep.passed, f"{name}: {rep}"


def test_corrupted_gradient_fails():
    def doubled(x):
        return nx.custom_op("bad_square", x.data * x.data, (x,), lambda g: (2 * (2 * x.data * g),))

    rep = gradient_check(doubled, [np.array([0.3, -1.2, 2.0])])
    assert not rep.passed
    assert rep.max_rel_error > 0.5


def test_gradient_check_reports_nonfinite():
    def blowup(x):
        return nx.custom_op("blowup", x.data, (x,), lambda g: (g,)) if x.data.max() < 1.0005 else \
            nx.custom_op("inf", np.full(x.shape, np.inf), (x,), lambda g: (g,))

    with pytest.raises(nx.NumericError):
        gradient_check(blowup, [np.array([1.0])])
