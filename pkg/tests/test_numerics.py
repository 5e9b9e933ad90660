import numpy as np
import pytest

import numerics as nx
from errors import ContractError, DegenerateVectorError, DimensionError, DomainError, NonFiniteError
from numerics import Tensor


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


class TestForward:
    def test_matmul_matches_triple_loop(self, rng):
        a = rng.standard_normal((5, 7))
        b = rng.standard_normal((7, 3))
        np.testing.assert_allclose(nx.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), atol=1e-12)

    def test_matrix_vector(self, rng):
        a = rng.standard_normal((4, 3))
        v = rng.standard_normal(3)
        np.testing.assert_allclose((Tensor(a) @ Tensor(v)).data, a @ v)

    def test_log_softmax_normalizes_rows(self, rng):
        x = rng.standard_normal((4, 6)) * 50
        out = nx.log_softmax(Tensor(x)).data
        np.testing.assert_allclose(np.exp(out).sum(axis=1), 1.0, atol=1e-12)

    def test_masked_log_softmax(self):
        x = Tensor(np.array([[1.0, 2.0, 3.0], [0.5, 0.5, 9.0]]))
        mask = np.array([[True, False, True], [True, True, False]])
        out = nx.log_softmax(x, mask).data
        assert out[0, 1] == 0.0 and out[1, 2] == 0.0
        np.testing.assert_allclose(np.exp(out[1, :2]), [0.5, 0.5])

    def test_fully_masked_row_rejected(self):
        with pytest.raises(ContractError):
            nx.log_softmax(Tensor(np.ones((2, 2))), np.array([[True, True], [False, False]]))

    def test_l2_normalize_rows(self, rng):
        x = rng.standard_normal((3, 5))
        out = nx.l2_normalize(Tensor(x)).data
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0)

    def test_elementwise_dispatch(self):
        np.testing.assert_allclose(nx.elementwise("mul", Tensor([2.0, 3.0]), 2.0).data, [4.0, 6.0])
        with pytest.raises(ContractError):
            nx.elementwise("sqrt", Tensor(1.0))


class TestErrors:
    def test_rank_four_rejected(self):
        with pytest.raises(DimensionError):
            Tensor(np.zeros((1, 1, 1, 1)))

    def test_only_scalar_broadcasting(self):
        nx.add(Tensor(np.ones((2, 3))), Tensor(1.0))
        with pytest.raises(DimensionError):
            nx.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))

    def test_matmul_inner_dims(self):
        with pytest.raises(DimensionError):
            nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_log_domain(self):
        with pytest.raises(DomainError):
            nx.log(Tensor([1.0, 0.0]))

    def test_degenerate_normalize(self):
        with pytest.raises(DegenerateVectorError):
            nx.l2_normalize(Tensor(np.zeros(4)))

    def test_overflow_is_non_finite(self):
        with np.errstate(over="ignore"):
            with pytest.raises(NonFiniteError):
                nx.exp(Tensor([1000.0]))

    def test_backward_needs_scalar_root(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            nx.backward(nx.scale(x, 2.0))


class TestBackward:
    def test_shared_subexpression(self):
        x = Tensor(3.0, requires_grad=True)
        grads = nx.backward(x * x)
        assert grads[x] == pytest.approx(6.0)

    def test_unreached_leaf_gets_zero(self):
        x = Tensor(np.ones(3), requires_grad=True)
        unused = Tensor(np.ones((2, 2)), requires_grad=True)
        grads = nx.backward(nx.sum(x), [x, unused])
        np.testing.assert_array_equal(grads[unused], np.zeros((2, 2)))
        np.testing.assert_array_equal(grads[x], np.ones(3))

    def test_deep_chain_has_no_recursion_limit(self):
        x = Tensor(1.0, requires_grad=True)
        y = x
        for _ in range(5000):
            y = y + 0.0
        assert nx.backward(y)[x] == pytest.approx(1.0)

    def test_no_graph_without_grad(self):
        out = nx.tanh(Tensor(np.ones(2)))
        assert not out.requires_grad and out._parents == ()

    def test_take_scatters(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        picked = nx.take(x, (np.array([0, 1, 1]), np.array([2, 0, 0])))
        grads = nx.backward(nx.sum(picked))
        np.testing.assert_array_equal(grads[x], [[0, 0, 1], [2, 0, 0]])

    @pytest.mark.parametrize("name", ["matmul", "tanh_exp", "log_softmax_masked", "normalize", "stack_concat"])
    def test_gradient_check(self, name, rng):
        mask = np.array([[True, True, False, True], [True, False, True, True], [True, True, True, True]])
        functions = {
            "matmul": (lambda a, b: nx.sum(nx.tanh(nx.matmul(a, b))),
                       [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))]),
            "tanh_exp": (lambda a: nx.mean(nx.exp(nx.tanh(a)) * 0.5), [rng.standard_normal((2, 3))]),
            "log_softmax_masked": (lambda a: nx.sum(nx.take(nx.log_softmax(a, mask), (np.array([0, 1, 2]),
                                                                                    np.array([1, 2, 0])))),
                                   [rng.standard_normal((3, 4))]),
            "normalize": (lambda a: nx.sum(nx.matmul(nx.l2_normalize(a), nx.transpose(nx.l2_normalize(a)))
                                           * nx.matmul(a, nx.transpose(a))),
                          [rng.standard_normal((3, 4))]),
            "stack_concat": (lambda a, b: nx.sum(nx.stack([nx.concat([nx.row(a, 0), b]),
                                                           nx.concat([nx.row(a, 1), b * b])]) * 1.5),
                             [rng.standard_normal((2, 2)), rng.standard_normal(3)]),
        }
        fn, arrays = functions[name]
        assert nx.gradient_check(fn, arrays) < 1e-6


def _op_cases(r):
    mask = r.random((3, 4)) < 0.7
    mask[:, 0] = True
    rows, cols = np.array([0, 2, 2, 1]), np.array([3, 0, 0, 1])
    return {
        "add": (lambda a, b: nx.sum(nx.tanh(a + b)), [r.standard_normal((3, 4)), r.standard_normal((3, 4))]),
        "sub": (lambda a, b: nx.sum(nx.tanh(a - b)), [r.standard_normal((3, 4)), r.standard_normal((3, 4))]),
        "mul": (lambda a, b: nx.sum(nx.tanh(a * b)), [r.standard_normal((3, 4)), r.standard_normal((3, 4))]),
        "scale": (lambda a: nx.sum(nx.tanh(nx.scale(a, 1.7))), [r.standard_normal((3, 4))]),
        "tanh": (lambda a: nx.sum(nx.tanh(a) * nx.tanh(a)), [r.standard_normal((3, 4))]),
        "exp": (lambda a: nx.sum(nx.exp(a)), [r.standard_normal((3, 4))]),
        "log": (lambda a: nx.sum(nx.log(a) * nx.log(a)), [r.uniform(0.5, 2.0, (3, 4))]),
        "matmul": (lambda a, b: nx.sum(nx.tanh(nx.matmul(a, b))), [r.standard_normal((3, 4)),
                                                                   r.standard_normal((4, 2))]),
        "matvec": (lambda a, v: nx.sum(nx.tanh(nx.matmul(a, v))), [r.standard_normal((3, 4)), r.standard_normal(4)]),
        "transpose": (lambda a, b: nx.sum(nx.tanh(nx.matmul(nx.transpose(a), b))), [r.standard_normal((4, 3)),
                                                                                   r.standard_normal((4, 2))]),
        "mean": (lambda a: nx.mean(nx.tanh(a)), [r.standard_normal((3, 4))]),
        "take": (lambda a: nx.sum(nx.tanh(nx.take(a, (rows, cols)))), [r.standard_normal((3, 4))]),
        "stack": (lambda a, b: nx.sum(nx.tanh(nx.stack([a, b]))), [r.standard_normal((3, 4)),
                                                                  r.standard_normal((3, 4))]),
        "concat": (lambda a, b: nx.sum(nx.tanh(nx.concat([a, b], axis=1))), [r.standard_normal((3, 4)),
                                                                            r.standard_normal((3, 2))]),
        "log_softmax": (lambda a: nx.sum(nx.take(nx.log_softmax(a, mask), (np.arange(3), np.zeros(3, dtype=int))))
                        + nx.sum(nx.log_softmax(a) * nx.log_softmax(a)), [r.standard_normal((3, 4))]),
        "l2_normalize": (lambda a, b: nx.sum(nx.l2_normalize(a) * b), [r.standard_normal((3, 4)),
                                                                       r.standard_normal((3, 4))]),
        "einsum": (lambda a, b: nx.sum(nx.tanh(nx.einsum("tbh,bh->bt", a, b))), [r.standard_normal((2, 3, 4)),
                                                                                r.standard_normal((3, 4))]),
        "add_bias": (lambda a, b: nx.sum(nx.tanh(nx.add_bias(a, b))), [r.standard_normal((2, 3, 4)),
                                                                        r.standard_normal(4)]),
    }


OP_NAMES = sorted(_op_cases(np.random.default_rng(0)))


class TestOpGradients:
    @pytest.mark.parametrize("name", OP_NAMES)
    def test_matches_finite_differences_on_seeded_instances(self, name):
        worst = 0.0
        for seed in range(100):
            fn, arrays = _op_cases(np.random.default_rng(seed))[name]
            worst = max(worst, nx.gradient_check(fn, arrays))
        assert worst < 1e-5

    def test_backward_is_bit_identical(self, rng):
        a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))

        def grads():
            x, y = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
            out = nx.backward(nx.sum(nx.log_softmax(nx.tanh(nx.matmul(x, y)))), [x, y])
            return out[x], out[y]

        first, second = grads(), grads()
        np.testing.assert_array_equal(first[0], second[0])
        np.testing.assert_array_equal(first[1], second[1])


class TestExamples:
    def test_uniform_log_softmax(self):
        np.testing.assert_allclose(nx.log_softmax(Tensor([0.0, 0.0, 0.0])).data, [-np.log(3.0)] * 3, atol=1e-15)

    def test_large_logits_do_not_overflow(self):
        out = nx.log_softmax(Tensor([1000.0, 0.0])).data
        assert out[0] == pytest.approx(0.0, abs=1e-12)
        assert out[1] == pytest.approx(-1000.0)

    def test_log_softmax_finite_up_to_a_million(self, rng):
        x = rng.uniform(-1e6, 1e6, size=(50, 12))
        x[0] = [1e6] * 6 + [-1e6] * 6
        assert np.all(np.isfinite(nx.log_softmax(Tensor(x)).data))

    def test_three_four_five(self):
        np.testing.assert_allclose(nx.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8], atol=1e-15)

    def test_normalize_scale_invariant(self, rng):
        v = rng.standard_normal(7)
        np.testing.assert_allclose(nx.l2_normalize(Tensor(7.3 * v)).data, nx.l2_normalize(Tensor(v)).data,
                                   atol=1e-12)

    def test_exp_inverts_log(self, rng):
        x = rng.uniform(0.01, 10.0, size=100)
        np.testing.assert_allclose(nx.exp(nx.log(Tensor(x))).data, x, atol=1e-12)


class TestBatchOps:
    def test_einsum_matches_numpy(self, rng):
        a, b = rng.standard_normal((4, 3, 5)), rng.standard_normal((3, 5))
        np.testing.assert_allclose(nx.einsum("tbh,bh->bt", Tensor(a), Tensor(b)).data,
                                   np.einsum("tbh,bh->bt", a, b), atol=1e-12)

    def test_einsum_contracts(self):
        with pytest.raises(ContractError):
            nx.einsum("ab->a", Tensor(np.ones((2, 2))), Tensor(np.ones(2)))
        with pytest.raises(ContractError):
            nx.einsum("ab,c->a", Tensor(np.ones((2, 2))), Tensor(np.ones(2)))
        with pytest.raises(DimensionError):
            nx.einsum("ab,b->a", Tensor(np.ones((2, 2))), Tensor(np.ones(3)))

    def test_add_bias(self):
        out = nx.add_bias(Tensor(np.zeros((2, 3))), Tensor([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(out.data, [[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])
        with pytest.raises(DimensionError):
            nx.add_bias(Tensor(np.zeros((2, 3))), Tensor([1.0, 2.0]))

    def test_concat_along_columns(self):
        out = nx.concat([Tensor(np.ones((2, 1))), Tensor(np.zeros((2, 2)))], axis=1)
        np.testing.assert_array_equal(out.data, [[1, 0, 0], [1, 0, 0]])
        with pytest.raises(DimensionError):
            nx.concat([Tensor(np.ones((2, 1))), Tensor(np.zeros((3, 2)))], axis=1)
