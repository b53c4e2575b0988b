import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sf2former import tensor as T
from sf2former.nn import cross_entropy, gelu, layer_norm, mlp, softmax
from sf2former.optim import cosine_lr, sgd_momentum_step
from sf2former.tensor import Graph, GraphStateError, NonFiniteError, Parameter, Tensor, backward, linear, matmul

from helpers import gradcheck, leaf


def triple_loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        out = matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_hand_multiply(self):
        assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_against_triple_loop(self):
        rng = np.random.default_rng(3)
        a, b = rng.integers(-9, 9, (5, 7)).astype(np.float64), rng.integers(-9, 9, (7, 3)).astype(np.float64)
        np.testing.assert_array_equal(matmul(Tensor(a), Tensor(b)).data, triple_loop_matmul(a, b))
        a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, triple_loop_matmul(a, b), rtol=1e-14)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_batched_gradients(self):
        rng = np.random.default_rng(0)
        a, b = leaf(rng.standard_normal((2, 3, 4)), "a"), leaf(rng.standard_normal((4, 5)), "b")
        errs = gradcheck(lambda: (matmul(a, b) * matmul(a, b)).sum(), [a, b])
        assert max(errs.values()) < 1e-4


class TestLayerNorm:
    def test_constant_row_goes_to_zero(self):
        out = layer_norm(Tensor([1.0, 1.0, 1.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 0.0])

    def test_shift(self):
        out = layer_norm(Tensor([0.0, 2.0]), Tensor([1.0, 1.0]), Tensor([5.0, 5.0]), eps=1e-12)
        np.testing.assert_allclose(out.data, [4.0, 6.0], atol=1e-9)

    def test_moments(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((6, 10)) * 7 + 3
        out = layer_norm(Tensor(x), Tensor(np.ones(10)), Tensor(np.zeros(10))).data
        assert np.abs(out.mean(axis=-1)).max() < 1e-6
        assert np.abs(out.var(axis=-1) - 1).max() < 1e-4

    def test_feature_mismatch(self):
        with pytest.raises(ValueError):
            layer_norm(Tensor(np.zeros((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))

    @settings(max_examples=30, deadline=None)
    @given(a=st.floats(0.1, 50.0), b=st.floats(-20.0, 20.0), seed=st.integers(0, 2**16))
    def test_affine_invariance(self, a, b, seed):
        x = np.random.default_rng(seed).standard_normal((3, 8))
        g, z = Tensor(np.ones(8)), Tensor(np.zeros(8))
        np.testing.assert_allclose(layer_norm(Tensor(a * x + b), g, z, eps=1e-12).data,
                                   layer_norm(Tensor(x), g, z, eps=1e-12).data, atol=1e-6)


class TestGelu:
    def test_zero(self):
        assert gelu(Tensor([0.0])).data[0] == 0.0

    def test_asymptote(self):
        assert abs(gelu(Tensor([10.0])).data[0] - 10.0) < 1e-6

    def test_erf_oracle(self):
        expected = 1.0 * 0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))
        assert gelu(Tensor([1.0])).data[0] == pytest.approx(expected, abs=1e-12)
        assert gelu(Tensor([1.0])).data[0] == pytest.approx(0.8413447, abs=1e-7)


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_large_logits(self):
        out = softmax(Tensor([1000.0, 0.0])).data
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)

    def test_direct_oracle(self):
        e = np.exp([1.0, 2.0, 3.0])
        np.testing.assert_allclose(softmax(Tensor([1.0, 2.0, 3.0])).data, e / e.sum(), rtol=1e-12)
        np.testing.assert_allclose(softmax(Tensor([1.0, 2.0, 3.0])).data, [0.0900306, 0.2447285, 0.6652410], atol=1e-7)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**16), shift=st.floats(-100, 100))
    def test_shift_invariance(self, seed, shift):
        x = np.random.default_rng(seed).standard_normal((4, 5)) * 3
        p, q = softmax(Tensor(x)).data, softmax(Tensor(x + shift)).data
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)
        np.testing.assert_allclose(p, q, atol=1e-6)
        assert (p.argmax(-1) == q.argmax(-1)).all()


class TestCrossEntropy:
    def test_uniform(self):
        assert cross_entropy(Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_confident(self):
        assert cross_entropy(Tensor([[100.0, 0.0]]), [0]).item() == pytest.approx(0.0, abs=1e-12)

    def test_oracle(self):
        expected = -math.log(math.exp(3) / (math.exp(1) + math.exp(3)))
        assert cross_entropy(Tensor([[1.0, 3.0]]), [1]).item() == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.126928, abs=1e-6)

    def test_label_range(self):
        with pytest.raises(ValueError):
            cross_entropy(Tensor([[0.0, 0.0]]), [2])


class TestBackward:
    def test_quadratic(self):
        x = Parameter("x", np.array([3.0]))
        with Graph() as g:
            loss = (x * x).sum()
        backward(g, loss)
        np.testing.assert_array_equal(x.grad, [6.0])

    def test_unreachable_parameter_gets_zero(self):
        x, p = Parameter("x", np.array([3.0])), Parameter("p", np.array([1.0, 2.0]))
        with Graph() as g:
            loss = (x * x).sum()
        backward(g, loss, [x, p])
        np.testing.assert_array_equal(p.grad, [0.0, 0.0])

    def test_twice_is_an_error(self):
        x = Parameter("x", np.array([3.0]))
        with Graph() as g:
            loss = (x * x).sum()
        backward(g, loss)
        with pytest.raises(GraphStateError):
            backward(g, loss)

    def test_graph_is_topological(self):
        x = Parameter("x", np.array([1.0, 2.0]))
        with Graph() as g:
            y = x * x
            z = y + x
            z.sum()
        position = {}
        for i, node in enumerate(g.nodes):
            for t in node.inputs:
                if id(t) in position:
                    assert position[id(t)] < i
            position[id(node.output)] = i

    def test_no_recording_outside_graph(self):
        x = Parameter("x", np.array([1.0]))
        with Graph() as g:
            pass
        _ = x * x
        assert g.nodes == []

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_is_an_error(self):
        with pytest.raises(NonFiniteError):
            T.mul(Tensor([np.inf]), Tensor([0.0]))


def _sq(t):
    return (t * t).sum()


# every differentiable op against central differences, 20 seeds each
LAYER_CASES = {
    "layer_norm": lambda r: (lambda x, g, b: _sq(layer_norm(x, g, b)) + layer_norm(x, g, b).sum(),
                             [r.standard_normal((3, 5)), 1 + 0.3 * r.standard_normal(5), r.standard_normal(5)]),
    "gelu_mlp": lambda r: (lambda x, w1, b1, w2, b2: _sq(mlp(x, w1, b1, w2, b2)),
                           [r.standard_normal((2, 3, 4)), r.standard_normal((4, 6)), r.standard_normal(6),
                            r.standard_normal((6, 4)), r.standard_normal(4)]),
    "softmax": lambda r: (lambda x, w: (softmax(x) * w).sum(), [r.standard_normal((3, 4)), r.standard_normal((3, 4))]),
    "cross_entropy": lambda r: (lambda x: cross_entropy(x, np.array([0, 1, 1])), [r.standard_normal((3, 2)) * 2]),
    "linear": lambda r: (lambda x, w, b: _sq(linear(x, w, b)),
                         [r.standard_normal((2, 3, 4)), r.standard_normal((4, 2)), r.standard_normal(2)]),
    "reshape_transpose_concat": lambda r: (
        lambda a, b: _sq(T.concat([T.transpose(T.reshape(a, (3, 2)), (1, 0)), b], axis=1)),
        [r.standard_normal(6), r.standard_normal((2, 2))]),
    "mean_take_broadcast": lambda r: (
        lambda a: (T.mean(a, axis=(0, 1)) * T.take(T.broadcast_to(a, (2, 2, 3)), 1, axis=0).sum(axis=0)).sum(),
        [r.standard_normal((2, 3))]),
}


@pytest.mark.parametrize("case", sorted(LAYER_CASES))
@pytest.mark.parametrize("seed", range(20))
def test_layer_gradients_match_finite_differences(case, seed):
    fn, arrays = LAYER_CASES[case](np.random.default_rng(seed))
    tensors = [leaf(a, f"arg{i}") for i, a in enumerate(arrays)]
    errs = gradcheck(lambda: fn(*tensors), tensors)
    assert max(errs.values()) < 1e-4, errs


class TestSGD:
    def test_plain_sgd(self):
        p = Parameter("p", np.array([1.0]))
        p.grad = np.array([2.0])
        sgd_momentum_step([p], lr=0.1, momentum=0.0)
        assert p.data[0] == pytest.approx(0.8)

    def test_zero_gradient_keeps_parameter(self):
        p = Parameter("p", np.array([1.5]))
        for _ in range(5):
            p.grad = np.array([0.0])
            sgd_momentum_step([p], lr=0.1, momentum=0.9)
        assert p.data[0] == 1.5

    def test_two_momentum_steps(self):
        p = Parameter("p", np.array([0.0]))
        for _ in range(2):
            p.grad = np.array([1.0])
            sgd_momentum_step([p], lr=0.1, momentum=0.9)
        assert p.data[0] == pytest.approx(-0.29, abs=1e-12)

    def test_missing_gradient(self):
        with pytest.raises(ValueError, match="q"):
            sgd_momentum_step([Parameter("q", np.zeros(2))], lr=0.1)


class TestCosine:
    def test_endpoints(self):
        assert cosine_lr(0, 150, 1e-3, 1e-5) == pytest.approx(1e-3)
        assert cosine_lr(150, 150, 1e-3, 1e-5) == pytest.approx(1e-5)
        assert cosine_lr(75, 150, 1e-3, 1e-5) == pytest.approx(5.05e-4)

    def test_monotone(self):
        lrs = [cosine_lr(e, 150) for e in range(151)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))
