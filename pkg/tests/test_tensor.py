import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from earlyrobust.tensor import (
    GradTape,
    ShapeError,
    Tensor,
    backward,
    cross_entropy,
    format_tensor,
    gelu,
    grad_check,
    layer_norm,
    matmul,
    parse_tensor,
    softmax_rows,
    take_rows,
)


def triple_loop(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def phi_oracle(x):
    # Maclaurin series of erf; shares no code with scipy.special
    z = x / math.sqrt(2.0)
    term, total, n = z, z, 0
    while abs(term) > 1e-18:
        n += 1
        term *= -z * z / n
        total += term / (2 * n + 1)
    return 0.5 * (1.0 + 2.0 / math.sqrt(math.pi) * total)


class TestMatmul:
    def test_identity(self):
        out = matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_scalar_matrices(self):
        assert matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, triple_loop(a, b), atol=1e-12, rtol=0)

    def test_batched_times_matrix_matches_loop(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
        out = matmul(Tensor(a), Tensor(b)).data
        for i in range(2):
            np.testing.assert_allclose(out[i], triple_loop(a[i], b), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradients(self):
        rng = np.random.default_rng(2)
        b = rng.normal(size=(4, 3))
        assert grad_check(lambda x: matmul(x, Tensor(b)).sum(), rng.normal(size=(2, 4))) < 1e-7
        a = rng.normal(size=(2, 5, 4))
        assert grad_check(lambda w: (matmul(Tensor(a), w) * matmul(Tensor(a), w)).sum(),
                          rng.normal(size=(4, 3))) < 1e-6


class TestGelu:
    def test_zero(self):
        assert gelu(Tensor([0.0])).data[0] == 0.0

    def test_large(self):
        assert abs(gelu(Tensor([10.0])).data[0] - 10.0) < 1e-6

    def test_one_against_independent_erf(self):
        assert abs(gelu(Tensor([1.0])).data[0] - 1.0 * phi_oracle(1.0)) < 1e-10

    @pytest.mark.parametrize("x", [-3.0, -0.7, 0.3, 2.2])
    def test_values(self, x):
        assert abs(gelu(Tensor([x])).data[0] - x * phi_oracle(x)) < 1e-10

    def test_grad_check(self):
        x = np.random.default_rng(3).normal(size=(3, 4))
        assert grad_check(lambda t: gelu(t).sum(), x) < 1e-5


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], atol=1e-15)

    def test_stable(self):
        out = softmax_rows(Tensor([[1000.0, 0.0]])).data
        assert np.all(np.isfinite(out))
        assert out[0, 0] == pytest.approx(1.0)
        assert out[0, 1] < 1e-300 or out[0, 1] == 0.0

    def test_naive_oracle(self):
        x = np.random.default_rng(4).normal(size=(5, 6))
        naive = np.exp(x) / np.exp(x).sum(axis=1, keepdims=True)
        np.testing.assert_allclose(softmax_rows(Tensor(x)).data, naive, atol=1e-12, rtol=0)

    def test_rows_sum_to_one(self):
        x = np.random.default_rng(5).normal(scale=20, size=(4, 3, 7))
        np.testing.assert_allclose(softmax_rows(Tensor(x)).data.sum(axis=-1), 1.0, atol=1e-12)


class TestLayerNorm:
    ones, zeros = Tensor(np.ones(2)), Tensor(np.zeros(2))

    def test_constant_row(self):
        out = layer_norm(Tensor(np.full((1, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)), 1e-5)
        np.testing.assert_array_equal(out.data, np.zeros((1, 4)))

    def test_normalised_row(self):
        out = layer_norm(Tensor([[1.0, -1.0]]), self.ones, self.zeros, eps=0.0)
        np.testing.assert_array_equal(out.data, [[1.0, -1.0]])

    def test_direct_formula(self):
        rng = np.random.default_rng(6)
        x, g, b = rng.normal(size=(3, 8)), rng.normal(size=8), rng.normal(size=8)
        out = layer_norm(Tensor(x), Tensor(g), Tensor(b), 1e-5).data
        mu = x.mean(axis=1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
        np.testing.assert_allclose(out, (x - mu) / np.sqrt(var + 1e-5) * g + b, atol=1e-10)
        plain = layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8)), 1e-12).data
        np.testing.assert_allclose(plain.mean(axis=1), 0.0, atol=1e-10)
        np.testing.assert_allclose(plain.var(axis=1), 1.0, atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            layer_norm(Tensor(np.ones((2, 3))), self.ones, self.zeros)

    def test_grad_check_all_inputs(self):
        rng = np.random.default_rng(7)
        x, g, b = rng.normal(size=(2, 5)), rng.normal(size=5), rng.normal(size=5)
        w = rng.normal(size=(2, 5))
        assert grad_check(lambda t: (layer_norm(t, Tensor(g), Tensor(b)) * Tensor(w)).sum(), x) < 1e-6
        assert grad_check(lambda t: (layer_norm(Tensor(x), t, Tensor(b)) * Tensor(w)).sum(), g) < 1e-6
        assert grad_check(lambda t: (layer_norm(Tensor(x), Tensor(g), t) * Tensor(w)).sum(), b) < 1e-6


class TestCrossEntropy:
    def test_confident(self):
        assert cross_entropy(Tensor([[10.0, -10.0]]), [0]).item() < 1e-4

    @pytest.mark.parametrize("c", [2, 3, 7])
    def test_uniform(self, c):
        assert cross_entropy(Tensor(np.zeros((4, c))), [0, 1, 0, 1]).item() == pytest.approx(math.log(c), abs=1e-14)

    def test_naive_oracle(self):
        rng = np.random.default_rng(8)
        z, y = rng.normal(size=(6, 3)), rng.integers(0, 3, size=6)
        naive = np.mean([-math.log(math.exp(z[i, y[i]]) / sum(math.exp(v) for v in z[i])) for i in range(6)])
        assert abs(cross_entropy(Tensor(z), y).item() - naive) < 1e-10

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            cross_entropy(Tensor(np.zeros((1, 2))), [2])

    def test_grad_check(self):
        rng = np.random.default_rng(9)
        y = rng.integers(0, 4, size=5)
        assert grad_check(lambda t: cross_entropy(t, y), rng.normal(size=(5, 4))) < 1e-7


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)), requires_grad=True)
        backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_product(self):
        x, y = Tensor(3.0, True), Tensor(-2.0, True)
        backward(x * y)
        assert x.grad == -2.0 and y.grad == 3.0

    def test_accumulates_over_uses_and_calls(self):
        x = Tensor(2.0, True)
        backward(x * x + x)
        assert x.grad == 5.0
        backward(x * 3.0)
        assert x.grad == 8.0

    def test_non_scalar_rejected(self):
        with pytest.raises(ShapeError):
            backward(Tensor(np.ones(3), True) * 2.0)

    def test_wrt_restricts_accumulation(self):
        x, y = Tensor(1.5, True), Tensor(2.0, True)
        backward(x * y, wrt=[x])
        assert x.grad == 2.0 and y.grad is None

    def test_tape_is_topological_and_visits_once(self):
        x = Tensor(np.ones(3), True)
        h = x * 2.0
        loss = (h + h).sum()
        tape = GradTape.from_output(loss)
        ids = [n.id for n in tape.nodes]
        assert ids == sorted(ids) and len(set(ids)) == len(ids)
        for pos, node in enumerate(tape.nodes):
            for inp in node.inputs:
                if inp._node is not None:
                    assert inp._node in tape.nodes[:pos]

    def test_linearity(self):
        rng = np.random.default_rng(10)
        x0 = rng.normal(size=(3, 4))
        a, b = 0.7, -1.3

        def f(t):
            return gelu(t).sum()

        def g(t):
            return softmax_rows(t * t).sum() + (t * t).sum()

        def grad(fn):
            t = Tensor(x0, True)
            backward(fn(t))
            return t.grad

        combo = grad(lambda t: f(t) * a + g(t) * b)
        np.testing.assert_allclose(combo, a * grad(f) + b * grad(g), atol=1e-12)

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(11)
            w = Tensor(rng.normal(size=(4, 3)), True)
            x = Tensor(rng.normal(size=(5, 4)))
            loss = cross_entropy(gelu(matmul(x, w)), [0, 1, 2, 0, 1])
            backward(loss)
            return loss.data.copy(), w.grad.copy()

        (l1, g1), (l2, g2) = run(), run()
        assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()


class TestGradCheck:
    def test_quadratic(self):
        assert grad_check(lambda t: (t * t).sum(), np.array([1.0, 2.0, 3.0])) < 1e-7

    @pytest.mark.parametrize("seed", range(10))
    def test_every_op_at_random_points(self, seed):
        rng = np.random.default_rng(100 + seed)
        x = rng.normal(size=(2, 3, 4))
        w = rng.normal(size=(2, 3, 4))
        ops = {
            "gelu": lambda t: gelu(t),
            "softmax": lambda t: softmax_rows(t),
            "layer_norm": lambda t: layer_norm(t, Tensor(np.full(4, 1.3)), Tensor(np.full(4, 0.2))),
            "matmul": lambda t: matmul(t, Tensor(np.eye(4) + 0.1)),
            "abs": lambda t: t.abs(),
            "swap_reshape": lambda t: t.swapaxes(0, 1).reshape(3, 2, 4).swapaxes(0, 1),
        }
        for name, op in ops.items():
            err = grad_check(lambda t: (op(t) * Tensor(w)).sum(), x)
            assert err < 1e-3, name
        ids = rng.integers(0, 5, size=(2, 3))
        assert grad_check(lambda t: (take_rows(t, ids) * Tensor(w[:, :, :2])).sum(), rng.normal(size=(5, 2))) < 1e-3


class TestSerialisation:
    def test_round_trip_exact(self):
        a = np.random.default_rng(12).normal(size=(3, 2, 5)) * 1e-3
        text = format_tensor(a)
        assert text.startswith("shape: 3 2 5\n")
        np.testing.assert_array_equal(parse_tensor(text), a)

    def test_scalar_and_vector(self):
        np.testing.assert_array_equal(parse_tensor(format_tensor(np.array(math.pi))), np.array(math.pi))
        np.testing.assert_array_equal(parse_tensor(format_tensor(np.arange(4.0))), np.arange(4.0))

    def test_bad_count(self):
        with pytest.raises(ValueError):
            parse_tensor("shape: 2 2\n1 2 3\n")

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=20))
    def test_round_trip_property(self, values):
        a = np.array(values)
        assert parse_tensor(format_tensor(a)).tobytes() == a.tobytes()
