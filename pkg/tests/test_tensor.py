import numpy as np
import pytest

from vlpt import tensor as T
from vlpt.errors import ContractError, NumericError, ShapeError
from vlpt.tensor import Parameter, Tensor

from conftest import finite_difference_grad, rel_err

# softmax([1,2,3]) evaluated by an independent high-precision oracle (50 digits)
SOFTMAX_123 = np.array([0.09003057317038045799, 0.24472847105479765247, 0.66524095577482188952])
# -sum(t * log softmax([1,0])) with t=(0.7,0.3), same oracle
CE_10_73 = 0.6132616875182228340489


class TestSoftmax:
    def test_uniform_on_equal_inputs(self):
        y = T.softmax(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(y.data, np.full(3, 1 / 3), atol=1e-15)

    @pytest.mark.parametrize("c", [-1e4, -3.7, 0.5, 1e4])
    def test_shift_invariance(self, c):
        x = np.array([0.3, -1.2, 4.0, 2.2])
        a = T.softmax(Tensor(x)).data
        b = T.softmax(Tensor(x + c)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_against_high_precision_oracle(self):
        y = T.softmax(Tensor([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(y.data, SOFTMAX_123, rtol=1e-14)

    def test_sums_to_one_at_large_magnitude(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            x = rng.uniform(-1e4, 1e4, size=rng.integers(1, 40))
            y = T.softmax(Tensor(x)).data
            assert abs(y.sum() - 1.0) < 1e-6
            assert (y >= 0).all()

    def test_nonfinite_input_rejected(self):
        with pytest.raises(NumericError):
            T.softmax(Tensor([1.0, np.inf]))
        with pytest.raises(NumericError):
            T.softmax(Tensor([np.nan, 0.0]))

    def test_empty_rejected(self):
        with pytest.raises(ShapeError):
            T.softmax(Tensor(np.zeros(0)))


class TestCrossEntropySoft:
    def test_uniform_uniform_is_log_k(self):
        for k in (2, 5, 17):
            loss = T.cross_entropy_soft(Tensor(np.zeros(k)), Tensor(np.full(k, 1 / k)))
            assert abs(loss.item() - np.log(k)) < 1e-12

    def test_one_hot_limit(self):
        # large margin at the target index drives the loss to 0
        logits = Tensor(np.array([50.0, 0.0, 0.0]))
        target = Tensor(np.array([1.0, 0.0, 0.0]))
        assert T.cross_entropy_soft(logits, target).item() < 1e-12

    def test_frozen_oracle_value(self):
        loss = T.cross_entropy_soft(Tensor([1.0, 0.0]), Tensor([0.7, 0.3]))
        assert abs(loss.item() - CE_10_73) < 1e-14

    def test_entropy_floor(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            k = rng.integers(2, 10)
            t = rng.dirichlet(np.ones(k))
            logits = rng.normal(size=k)
            loss = T.cross_entropy_soft(Tensor(logits), Tensor(t)).item()
            entropy = -(t * np.log(t)).sum()
            assert loss >= entropy - 1e-9

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            T.cross_entropy_soft(Tensor([1.0, 2.0]), Tensor([1.0, 0.0, 0.0]))

    def test_unnormalized_target(self):
        with pytest.raises(NumericError):
            T.cross_entropy_soft(Tensor([1.0, 2.0]), Tensor([0.9, 0.3]))


class TestBackward:
    def test_sum_gradient_is_ones(self):
        p = Parameter(np.arange(6.0).reshape(2, 3))
        T.tsum(p).backward()
        np.testing.assert_array_equal(p.grad, np.ones((2, 3)))

    def test_square_gradient(self):
        p = Parameter(np.array([1.0, -2.0, 3.0]))
        T.tsum(p * p).backward()
        np.testing.assert_allclose(p.grad, 2 * p.data)

    def test_non_scalar_output_rejected(self):
        p = Parameter(np.ones(3))
        with pytest.raises(ContractError):
            (p * 2).backward()

    def test_grad_accumulates_across_reuse(self):
        p = Parameter(np.array([2.0]))
        y = p * p + p * 3.0
        T.tsum(y).backward()
        np.testing.assert_allclose(p.grad, [2 * 2.0 + 3.0])

    def test_no_grad_disables_recording(self):
        p = Parameter(np.ones(3))
        with T.no_grad():
            y = T.tsum(p * p)
        assert y._backward is None and y._parents == ()


def _gradcheck(build, shapes, seed, tol):
    """Compare autodiff gradients of a scalar-valued composite against
    central finite differences, for every input."""
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=s) * 0.8 + 0.1 for s in shapes]
    for i in range(len(arrays)):
        def f(x):
            vals = [a.copy() for a in arrays]
            vals[i] = x
            with T.no_grad():
                return build(*[Tensor(v) for v in vals]).item()

        params = [Parameter(a.copy()) for a in arrays]
        out = build(*params)
        out.backward()
        fd = finite_difference_grad(f, arrays[i])
        assert rel_err(params[i].grad, fd) < tol, f"input {i}"


PRIMITIVE_CASES = {
    "add": (lambda a, b: T.tsum(a + b), [(3, 4), (3, 4)]),
    "add_broadcast": (lambda a, b: T.tsum(a + b), [(3, 4), (4,)]),
    "mul": (lambda a, b: T.tsum(a * b * a), [(2, 5), (2, 5)]),
    "div": (lambda a, b: T.tsum(a / (b * b + 1.0)), [(4,), (4,)]),
    "pow": (lambda a: T.tsum((a * a + 0.5) ** 1.5), [(6,)]),
    "exp": (lambda a: T.tsum(T.exp(a)), [(5,)]),
    "log": (lambda a: T.tsum(T.log(a * a + 0.2)), [(5,)]),
    "sqrt": (lambda a: T.tsum(T.sqrt(a * a + 0.3)), [(5,)]),
    "tanh": (lambda a: T.tsum(T.tanh(a)), [(7,)]),
    "gelu": (lambda a: T.tsum(T.gelu(a)), [(9,)]),
    "softplus": (lambda a: T.tsum(T.softplus(a * 3.0)), [(9,)]),
    "matmul": (lambda a, b: T.tsum(T.matmul(a, b)), [(3, 4), (4, 5)]),
    "matmul_batched": (lambda a, b: T.tsum(T.matmul(a, b)), [(2, 3, 4), (2, 4, 5)]),
    "matmul_broadcast": (lambda a, b: T.tsum(T.matmul(a, b)), [(2, 3, 4), (4, 5)]),
    "sum_axis": (lambda a: T.tsum(T.tsum(a, axis=1) ** 2.0), [(3, 4)]),
    "mean": (lambda a: T.tmean(a, axis=0).sum() * 2.0, [(4, 3)]),
    "reshape": (lambda a: T.tsum(T.reshape(a, (6,)) ** 2.0), [(2, 3)]),
    "transpose": (lambda a: T.tsum(T.transpose(a, (1, 0)) * 1.5), [(2, 3)]),
    "take_rows": (lambda a: T.tsum(a[np.array([0, 2, 0])] ** 2.0), [(4, 3)]),
    "concat": (lambda a, b: T.tsum(T.concat([a, b], axis=0) ** 2.0), [(2, 3), (4, 3)]),
    "stack": (lambda a, b: T.tsum(T.stack([a, b]) ** 2.0), [(2, 3), (2, 3)]),
    "softmax": (lambda a: T.tsum(T.softmax_masked(a) ** 2.0), [(3, 5)]),
    "log_softmax": (lambda a: T.tsum(T.log_softmax(a) * 0.3), [(3, 5)]),
    "logsumexp": (lambda a: T.logsumexp(a), [(7,)]),
    "layer_norm": (
        lambda x, g, b: T.tsum(T.layer_norm(x, g, b) ** 2.0),
        [(4, 6), (6,), (6,)],
    ),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_double(name):
    build, shapes = PRIMITIVE_CASES[name]
    _gradcheck(build, shapes, seed=42, tol=1e-5)


@pytest.mark.parametrize("name", ["matmul", "softmax", "layer_norm", "gelu"])
def test_primitive_gradients_single(name):
    """Single precision loosens the bound to 1e-3."""
    build, shapes = PRIMITIVE_CASES[name]
    T.set_default_dtype("single")
    rng = np.random.default_rng(11)
    arrays = [rng.normal(size=s).astype(np.float32) * 0.5 + 0.1 for s in shapes]
    params = [Parameter(a, dtype=np.float32) for a in arrays]
    build(*params).backward()
    T.set_default_dtype("double")
    for i, a in enumerate(arrays):
        def f(x):
            vals = [v.astype(np.float64) for v in arrays]
            vals[i] = x
            with T.no_grad():
                return build(*[Tensor(v) for v in vals]).item()

        fd = finite_difference_grad(f, a.astype(np.float64))
        assert rel_err(params[i].grad, fd) < 1e-3


def test_masked_softmax_fully_masked_row_is_zero():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    mask = np.ones((3, 4), dtype=bool)
    mask[1] = False
    y = T.softmax_masked(x, mask)
    assert (y.data[1] == 0.0).all()
    np.testing.assert_allclose(y.data[[0, 2]].sum(axis=1), 1.0, atol=1e-12)


def test_masked_softmax_masked_entries_get_zero_grad():
    p = Parameter(np.random.default_rng(1).normal(size=(2, 5)))
    mask = np.array([[True, True, False, True, False]] * 2)
    y = T.softmax_masked(p, mask)
    T.tsum(y * y).backward()
    assert (p.grad[:, 2] == 0.0).all() and (p.grad[:, 4] == 0.0).all()


def test_finite_checks_flag():
    T.set_finite_checks(True)
    try:
        with np.errstate(invalid="ignore"), pytest.raises(NumericError):
            T.log(Tensor([-1.0]))
    finally:
        T.set_finite_checks(False)


def test_dropout_scaling_and_identity():
    g = np.random.default_rng(5)
    x = Tensor(np.ones((1000,)))
    y = T.dropout(x, 0.25, g)
    kept = y.data != 0
    np.testing.assert_allclose(y.data[kept], 1 / 0.75)
    z = T.dropout(x, 0.0, g)
    np.testing.assert_array_equal(z.data, x.data)
