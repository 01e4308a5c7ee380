import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cgclora.autograd import (
    ComputationRecord,
    Tensor,
    backward,
    concat,
    gelu,
    grad_check,
    layer_norm,
    log_softmax,
    masked_fill,
    matmul,
    no_grad,
    parameter,
    softmax,
)
from cgclora.exceptions import DimensionError, NumericError, OracleError


def triple_loop(a, b):
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

    def test_hand_arithmetic(self):
        assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_against_triple_loop(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(5, 3)), rng.normal(size=(3, 4))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, triple_loop(a, b), atol=1e-12, rtol=0)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("c", [-1e6, -3.0, 0.0, 7.5, 1e6])
    def test_shift_invariance(self, c):
        assert softmax(Tensor([c, c])).data.tolist() == [0.5, 0.5]

    def test_hand_value(self):
        # e / (e + 2) and 1 / (e + 2)
        e = np.e
        expected = [e / (e + 2), 1 / (e + 2), 1 / (e + 2)]
        np.testing.assert_allclose(softmax(Tensor([1.0, 0.0, 0.0])).data, expected, rtol=0, atol=1e-15)
        np.testing.assert_allclose(expected, [0.57611688, 0.21194156, 0.21194156], atol=1e-8)

    def test_empty(self):
        with pytest.raises(ValueError):
            softmax(Tensor(np.zeros(0)))

    def test_nan(self):
        with pytest.raises(NumericError):
            softmax(Tensor([0.0, np.nan]))

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(-200, 200), min_size=1, max_size=10), st.integers(-100, 100))
    def test_sums_to_one_and_shift_invariant(self, xs, c):
        # quarter-integers keep v + c exact, so the shifted input is bit-comparable
        v = np.array(xs) / 4.0
        out = softmax(Tensor(v)).data
        assert abs(out.sum() - 1.0) <= 1e-12
        assert np.all(out > 0)
        np.testing.assert_array_equal(out, softmax(Tensor(v + c)).data)


class TestBackward:
    def test_sum_gives_ones(self):
        x = parameter(np.arange(6.0).reshape(2, 3))
        backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_sum_of_squares(self):
        x = parameter([1.0, 2.0, 3.0])
        backward((x * x).sum())
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_non_scalar_loss(self):
        x = parameter([1.0, 2.0])
        with pytest.raises(ValueError):
            backward(x * 2.0)

    def test_replay_doubles(self):
        rng = np.random.default_rng(0)
        x = parameter(rng.normal(size=(3, 4)))
        w = parameter(rng.normal(size=(4, 2)))
        loss = (matmul(x, w).tanh() * 1.5).sum()
        rec = ComputationRecord(loss)
        backward(loss, rec)
        g1x, g1w = x.grad.copy(), w.grad.copy()
        backward(loss, rec)
        np.testing.assert_array_equal(x.grad, 2 * g1x)
        np.testing.assert_array_equal(w.grad, 2 * g1w)

    def test_record_is_topological_and_unique(self):
        x = parameter([1.0, 2.0])
        y = x * x
        loss = (y + y * x).sum()
        rec = ComputationRecord(loss)
        pos = {id(t): i for i, t in enumerate(rec.ops)}
        assert len(pos) == len(rec.ops)
        for t in rec.ops:
            for p in t._parents:
                assert pos[id(p)] < pos[id(t)]
        assert rec.leaves() == [x]

    def test_reuse_accumulates(self):
        x = parameter([3.0])
        backward((x * 2.0 + x * 5.0).sum())
        assert x.grad.tolist() == [7.0]

    def test_no_grad_builds_no_graph(self):
        x = parameter([1.0])
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad and y._parents == ()


class TestGradCheck:
    def test_sum_of_squares(self):
        x = parameter([0.3, -1.2, 2.0])
        assert grad_check(lambda: (x * x).sum(), [x]) < 1e-8

    def test_constant(self):
        x = parameter([0.3, -1.2])
        assert grad_check(lambda: Tensor(4.0), [x]) == 0.0

    def test_nondeterministic_rejected(self):
        x = parameter([1.0])
        rng = np.random.default_rng(0)
        with pytest.raises(OracleError):
            grad_check(lambda: (x * float(rng.normal())).sum(), [x])

    def test_eps_positive(self):
        x = parameter([1.0])
        with pytest.raises(ValueError):
            grad_check(lambda: x.sum(), [x], eps=0.0)


def _primitive_cases(rng):
    def mk(*shape):
        return parameter(rng.normal(size=shape))

    a, b = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    k = int(rng.integers(1, 9))
    x, w = mk(a, k), mk(k, b)
    v = mk(a, b)
    pos = parameter(rng.uniform(0.5, 2.0, size=(a, b)))
    s = mk(b)
    bx = mk(2, a, k)
    wide = mk(a, b + 2)
    mask = rng.random((a, b)) < 0.3
    mask[:, 0] = False
    return {
        "add_broadcast": (lambda: ((v + s) * v).sum(), [v, s]),
        "sub": (lambda: ((v - s) ** 2).sum(), [v, s]),
        "mul": (lambda: (v * pos * s).sum(), [v, pos, s]),
        "div": (lambda: (v / pos).sum(), [v, pos]),
        "pow": (lambda: (pos**1.7).sum(), [pos]),
        "matmul": (lambda: (matmul(x, w) * matmul(x, w)).sum(), [x, w]),
        "batched_matmul": (lambda: (matmul(bx, w).tanh()).sum(), [bx, w]),
        "matvec": (lambda: (matmul(v, s) ** 2).sum(), [v, s]),
        "exp_log": (lambda: ((v * 0.3).exp() + pos.log()).sum(), [v, pos]),
        "sqrt": (lambda: (pos.sqrt() * v).sum(), [pos, v]),
        "tanh": (lambda: (v.tanh() * v).sum(), [v]),
        "reshape_transpose": (lambda: (v.reshape(b, a).transpose() * v).sum(), [v]),
        "getitem_fancy": (lambda: (v[np.array([0, 0, a - 1])] * 1.3).tanh().sum(), [v]),
        "sum_axis": (lambda: (v.sum(axis=1) ** 2).sum(), [v]),
        "mean_keepdims": (lambda: (v - v.mean(axis=-1, keepdims=True)).tanh().sum(), [v]),
        # single-coordinate readouts keep every gradient entry away from zero,
        # where central differences lose relative precision
        "softmax": (lambda: softmax(v, axis=-1)[:, 0].sum(), [v]),
        "log_softmax": (lambda: log_softmax(v, axis=-1)[:, 0].sum(), [v]),
        "concat": (lambda: (concat([v, pos], axis=1).tanh() * 2.0).sum(), [v, pos]),
        "masked_fill": (lambda: softmax(masked_fill(v, mask, -np.inf), axis=-1)[:, 0].sum(), [v]),
        "gelu": (lambda: gelu(v).sum(), [v]),
        "layer_norm": (lambda: layer_norm(wide)[:, 0].sum(), [wide]),
    }


@pytest.mark.parametrize("seed", range(20))
def test_every_primitive_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    for name, (f, params) in _primitive_cases(rng).items():
        err = grad_check(f, params)
        assert err < 1e-6, f"{name}: relative error {err:.2e}"
