import numpy as np
import pytest

from msar.errors import ConfigError, ContractError, ShapeError, SingularMatrixError
from msar.numerics import (
    DiffGraph,
    Tensor,
    absolute,
    backward,
    conj,
    conv2d,
    diagonal_last2,
    einsum,
    hermitian_solve,
    layer_norm,
    log,
    matmul,
    real,
    relu,
    sigmoid,
    softmax,
    log_softmax,
    solve_hermitian,
    take_rows,
    tmean,
    trace_last2,
    tsum,
    where,
)

from helpers import check_gradient, finite_difference, matmul_loops


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = matmul(Tensor(np.eye(2)), a)
        np.testing.assert_array_equal(out.data, a.data)

    def test_orthogonal_supports(self):
        a = Tensor([[1.0, 0.0], [0.0, 0.0]])
        b = Tensor([[0.0, 0.0], [0.0, 1.0]])
        assert np.all(matmul(a, b).data == 0.0)

    def test_random_vs_loop_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        got = matmul(Tensor(a), Tensor(b)).data
        assert np.abs(got - matmul_loops(a, b)).max() < 1e-14

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"3, 4.*5, 2"):
            matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 2))))


class TestSoftmax:
    def test_symmetry(self):
        out = softmax(Tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal(7)
        a = softmax(Tensor(x)).data
        b = softmax(Tensor(x + 123.456)).data
        assert np.abs(a - b).max() < 1e-14

    def test_extended_precision_oracle(self):
        x = np.array([1.0, 2.0, 3.0])
        xl = x.astype(np.longdouble)
        el = np.exp(xl - xl.max())
        want = (el / el.sum()).astype(np.float64)
        got = softmax(Tensor(x)).data
        assert np.abs((got - want) / want).max() < 1e-13

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        y = softmax(Tensor(rng.standard_normal((5, 9))), axis=-1).data
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(y >= 0)


class TestLayerNorm:
    def test_constant_vector_zeros(self):
        out = layer_norm(Tensor(np.full(6, 3.25)), Tensor(np.ones(6)), Tensor(np.zeros(6)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_gain_annihilation(self):
        rng = np.random.default_rng(3)
        b = rng.standard_normal(5)
        out = layer_norm(Tensor(rng.standard_normal(5)), Tensor(np.zeros(5)), Tensor(b))
        np.testing.assert_allclose(out.data, b)

    def test_two_pass_oracle(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal(64)
        eps = 1e-5
        out = layer_norm(Tensor(x), Tensor(np.ones(64)), Tensor(np.zeros(64)), eps=eps).data
        mu = sum(x) / 64
        var = sum((v - mu) ** 2 for v in x) / 64
        want = (x - mu) / np.sqrt(var + eps)
        assert np.abs(out - want).max() < 1e-12
        assert abs(out.mean()) < 1e-12
        assert abs(out.var() - 1.0) < 2 * eps


class TestConv2d:
    def test_delta_kernel_identity(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((1, 5, 7))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        out = conv2d(Tensor(x), Tensor(k), stride=1)
        np.testing.assert_allclose(out.data, x)

    def test_zero_kernels(self):
        x = Tensor(np.ones((2, 4, 4)))
        out = conv2d(x, Tensor(np.zeros((3, 2, 3, 3))), stride=2)
        assert out.shape == (3, 2, 2)
        assert np.all(out.data == 0)

    def test_stride2_vs_loop_oracle(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((1, 6, 6))
        k = rng.standard_normal((2, 1, 3, 3))
        got = conv2d(Tensor(x), Tensor(k), stride=2).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        want = np.zeros((2, 3, 3))
        for o in range(2):
            for i in range(3):
                for j in range(3):
                    for c in range(1):
                        for p in range(3):
                            for q in range(3):
                                want[o, i, j] += xp[c, 2 * i + p, 2 * j + q] * k[o, c, p, q]
        assert np.abs(got - want).max() < 1e-13

    def test_output_height_is_ceil(self):
        x = Tensor(np.zeros((1, 5, 9)))
        k = Tensor(np.zeros((1, 1, 3, 3)))
        assert conv2d(x, k, stride=2).shape == (1, 3, 5)

    def test_non_3x3_rejected(self):
        with pytest.raises(ConfigError):
            conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 5, 5))))


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with DiffGraph() as g:
            loss = tsum(x)
        backward(loss, g)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_gives_2x(self):
        data = np.array([1.0, -2.0, 0.5])
        x = Tensor(data, requires_grad=True)
        with DiffGraph() as g:
            loss = tsum(x * x)
        backward(loss, g)
        np.testing.assert_allclose(x.grad, 2 * data)

    def test_accumulation_two_uses(self):
        x = Tensor(np.ones(4), requires_grad=True)
        with DiffGraph() as g:
            loss = tsum(x) + tsum(x)
        backward(loss, g)
        np.testing.assert_array_equal(x.grad, 2 * np.ones(4))

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with DiffGraph() as g:
            y = x * x
        with pytest.raises(ContractError):
            backward(y, g)

    def test_composite_pipeline_finite_difference(self):
        rng = np.random.default_rng(7)
        w = rng.standard_normal((4, 3))

        def loss(t):
            h = relu(matmul(t, Tensor(w)))
            y = softmax(h, axis=-1)
            return tsum(log(y + 1e-3) * y)

        check_gradient(loss, rng.standard_normal((2, 4)))

    def test_primitive_gradients_20_seeds(self):
        gain = Tensor(np.linspace(0.5, 1.5, 5))
        bias = Tensor(np.zeros(5))
        for seed in range(20):
            rng = np.random.default_rng(seed)
            x = rng.standard_normal((3, 5))
            check_gradient(lambda t: tsum(sigmoid(t) * 1.7), x.copy())
            check_gradient(lambda t: tsum(log_softmax(t, axis=-1) * rng_const(seed)), x.copy())
            check_gradient(lambda t: tsum(layer_norm(t, gain, bias) * rng_const(seed)), x.copy())

    def test_conv2d_gradient(self):
        rng = np.random.default_rng(8)
        k = rng.standard_normal((2, 1, 3, 3))
        weight = rng.standard_normal((2, 3, 2))
        check_gradient(
            lambda t: tsum(conv2d(t, Tensor(k), stride=2) * Tensor(weight)),
            rng.standard_normal((1, 5, 4)),
        )
        x = rng.standard_normal((1, 5, 4))
        check_gradient(
            lambda kt: tsum(conv2d(Tensor(x), kt, stride=1) * 0.3),
            k.copy(),
        )

    def test_gather_and_where_gradients(self):
        rng = np.random.default_rng(9)
        idx = np.array([0, 2, 2, 1])
        cond = np.array([True, False, True])
        check_gradient(lambda t: tsum(take_rows(t, idx) * 2.0), rng.standard_normal((3, 4)))
        check_gradient(
            lambda t: tsum(where(cond, t * 3.0, t * t)),
            rng.standard_normal(3),
        )

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(123)
            x = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
            with DiffGraph() as g:
                loss = tsum(softmax(matmul(x, x), axis=-1))
            backward(loss, g)
            return loss.data.copy(), x.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert np.array_equal(l1, l2) and np.array_equal(g1, g2)


def rng_const(seed):
    return Tensor(np.random.default_rng(seed + 1000).standard_normal((3, 5)))


class TestEinsum:
    def test_matches_numpy(self):
        rng = np.random.default_rng(10)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 5))
        got = einsum("ij,jk->ik", Tensor(a), Tensor(b)).data
        np.testing.assert_allclose(got, np.einsum("ij,jk->ik", a, b))

    def test_three_operand_gradient(self):
        rng = np.random.default_rng(11)
        m = rng.standard_normal((6, 3))
        x = rng.standard_normal((6, 3, 2))
        check_gradient(
            lambda t: tsum(einsum("tf,tfc,tfd->fcd", t, Tensor(x), Tensor(x + 1.0))),
            m.copy(),
        )

    def test_rejects_inner_trace(self):
        with pytest.raises(ContractError):
            einsum("ii->", Tensor(np.eye(3)))

    def test_complex_chain_finite_difference(self):
        # gradient through complex arithmetic, checked on the real carrier
        rng = np.random.default_rng(12)
        z = rng.standard_normal((4, 2)) + 1j * rng.standard_normal((4, 2))

        def loss(t):
            w = einsum("tc,td->cd", t * (1 + 0j), conj(Tensor(z)))
            return tsum(absolute(w))

        check_gradient(loss, rng.standard_normal((4, 2)))


class TestComplexOps:
    def test_real_and_conj(self):
        z = Tensor(np.array([1 + 2j, 3 - 4j]))
        np.testing.assert_array_equal(real(z).data, [1.0, 3.0])
        np.testing.assert_array_equal(conj(z).data, [1 - 2j, 3 + 4j])

    def test_abs_complex_gradient(self):
        rng = np.random.default_rng(13)
        base = rng.standard_normal(5) + 1j * rng.standard_normal(5)

        def loss(t):
            z = Tensor(base) * t
            return tsum(absolute(z))

        check_gradient(loss, rng.standard_normal(5) + 2.0)

    def test_trace_and_diagonal(self):
        rng = np.random.default_rng(14)
        a = rng.standard_normal((3, 4, 4))
        np.testing.assert_allclose(trace_last2(Tensor(a)).data, np.trace(a, axis1=1, axis2=2))
        np.testing.assert_allclose(
            diagonal_last2(Tensor(a)).data, np.diagonal(a, axis1=1, axis2=2))
        check_gradient(lambda t: tsum(trace_last2(t) * 2.0), a.copy())
        w = rng.standard_normal((3, 4))
        check_gradient(lambda t: tsum(diagonal_last2(t) * Tensor(w)), a.copy())


class TestDropout:
    def test_zero_probability_is_identity(self):
        from msar.numerics import dropout
        x = Tensor(np.ones(5), requires_grad=True)
        assert dropout(x, 0.0, np.random.default_rng(0)) is x

    def test_scaling_and_gradient(self):
        from msar.numerics import dropout
        rng = np.random.default_rng(1)
        x = rng.standard_normal(1000) + 3.0
        out = dropout(Tensor(x), 0.25, np.random.default_rng(2)).data
        kept = out != 0
        np.testing.assert_allclose(out[kept], x[kept] / 0.75)
        assert abs(kept.mean() - 0.75) < 0.05
        # same rng seed, same mask: the op is a fixed linear map, so the
        # finite-difference oracle applies
        check_gradient(
            lambda t: tsum(dropout(t, 0.25, np.random.default_rng(7)) * 1.3),
            rng.standard_normal(20),
        )

    def test_invalid_probability(self):
        from msar.numerics import dropout
        with pytest.raises(ContractError):
            dropout(Tensor(np.ones(3)), 1.0, np.random.default_rng(0))


def random_hpd(rng, c):
    a = rng.standard_normal((c, c)) + 1j * rng.standard_normal((c, c))
    return a @ a.conj().T + np.eye(c)


class TestHermitianSolve:
    def test_identity(self):
        rng = np.random.default_rng(15)
        b = rng.standard_normal((3, 2)) + 1j * rng.standard_normal((3, 2))
        x = hermitian_solve(np.eye(3, dtype=complex), b)
        np.testing.assert_allclose(x, b, atol=1e-14)

    def test_scaling(self):
        v = np.array([1.0, 2.0, 3.0], dtype=complex)
        x = hermitian_solve(2 * np.eye(3, dtype=complex), v)
        np.testing.assert_allclose(x, v / 2, atol=1e-14)

    def test_residual_oracle(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            m = random_hpd(rng, 5)
            b = rng.standard_normal((5, 3)) + 1j * rng.standard_normal((5, 3))
            x = hermitian_solve(m, b)
            resid = np.abs(m @ x - b).max()
            assert resid < 1e-10 * max(1.0, np.abs(b).max())

    def test_matches_numpy_solve(self):
        rng = np.random.default_rng(16)
        m = random_hpd(rng, 4)
        b = rng.standard_normal(4) + 1j * rng.standard_normal(4)
        np.testing.assert_allclose(hermitian_solve(m, b), np.linalg.solve(m, b), atol=1e-11)

    def test_all_zero_matrix_rejected(self):
        with pytest.raises(SingularMatrixError):
            hermitian_solve(np.zeros((3, 3), dtype=complex), np.ones(3, dtype=complex))

    def test_diagonal_loading_rescues_near_singular(self):
        d = np.diag([1.0, 1e-30]).astype(complex)
        x = hermitian_solve(d, np.array([1.0, 0.0], dtype=complex))
        assert np.all(np.isfinite(x))

    def test_non_hermitian_rejected(self):
        m = np.array([[1.0, 2.0], [0.0, 1.0]], dtype=complex)
        with pytest.raises(ContractError):
            hermitian_solve(m, np.ones(2, dtype=complex))

    def test_too_large_rejected(self):
        with pytest.raises(ContractError):
            hermitian_solve(np.eye(17, dtype=complex), np.ones(17, dtype=complex))

    def test_batched_tensor_solve_gradient(self):
        rng = np.random.default_rng(17)
        n = np.stack([random_hpd(rng, 2) for _ in range(3)])
        b = rng.standard_normal((3, 2, 1)) + 1j * rng.standard_normal((3, 2, 1))

        def loss(t):
            scaled = Tensor(n) * reshape_t(t)
            x = solve_hermitian(scaled, Tensor(b))
            return tsum(absolute(x))

        check_gradient(loss, np.ones((3, 1, 1)) * 1.5)

    def test_batched_rhs_gradient(self):
        rng = np.random.default_rng(18)
        n = np.stack([random_hpd(rng, 3) for _ in range(2)])

        def loss(t):
            x = solve_hermitian(Tensor(n), t * (1 + 0j))
            return tsum(absolute(x))

        check_gradient(loss, rng.standard_normal((2, 3, 2)))


def reshape_t(t):
    return t  # broadcasting (3,1,1) against (3,2,2) happens inside mul
