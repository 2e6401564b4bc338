import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uwmmse import linalg
from conftest import crandn, random_hpd


def loop_gemm(A, B):
    out = np.zeros((A.shape[0], B.shape[1]), dtype=complex)
    for i in range(A.shape[0]):
        for j in range(B.shape[1]):
            for k in range(A.shape[1]):
                out[i, j] += A[i, k] * B[k, j]
    return out


def adjugate_inverse_3x3(A):
    """Inverse of a 3x3 matrix from cofactors."""
    C = np.empty((3, 3), dtype=complex)
    for i in range(3):
        for j in range(3):
            minor = np.delete(np.delete(A, i, 0), j, 1)
            C[i, j] = (-1) ** (i + j) * (minor[0, 0] * minor[1, 1] - minor[0, 1] * minor[1, 0])
    det = sum(A[0, j] * C[0, j] for j in range(3))
    return C.T / det


def ldl_pivot_logdet(A):
    """log2 det from the pivots of an unpivoted LDL^H elimination."""
    A = A.astype(complex).copy()
    n = A.shape[0]
    total = 0.0
    for k in range(n):
        d = A[k, k].real
        total += np.log2(d)
        A[k + 1 :, k + 1 :] -= np.outer(A[k + 1 :, k], A[k, k + 1 :]) / d
    return total


class TestGemm:
    def test_identity(self, rng):
        X = crandn(rng, 3, 4)
        assert np.array_equal(linalg.gemm(np.eye(3), X), X)

    def test_i_squared(self):
        assert linalg.gemm(np.array([[1j]]), np.array([[1j]]))[0, 0] == -1

    def test_loop_oracle(self, rng):
        A, B = crandn(rng, 3, 5), crandn(rng, 5, 1)
        assert np.max(np.abs(linalg.gemm(A, B) - loop_gemm(A, B))) <= 1e-14 * 10

    def test_shape_mismatch(self, rng):
        with pytest.raises(linalg.ShapeError):
            linalg.gemm(crandn(rng, 2, 3), crandn(rng, 2, 3))

    def test_associative(self, rng):
        A, B, C = crandn(rng, 4, 3), crandn(rng, 3, 5), crandn(rng, 5, 2)
        left = linalg.gemm(linalg.gemm(A, B), C)
        right = linalg.gemm(A, linalg.gemm(B, C))
        assert np.linalg.norm(left - right) <= 1e-12 * np.linalg.norm(left)

    def test_adjoint_of_product(self, rng):
        A, B = crandn(rng, 4, 3), crandn(rng, 3, 5)
        lhs = linalg.adjoint(linalg.gemm(A, B))
        rhs = linalg.gemm(linalg.adjoint(B), linalg.adjoint(A))
        assert np.max(np.abs(lhs - rhs)) <= 1e-13


class TestAdjoint:
    def test_scalar(self):
        assert linalg.adjoint(np.array([[1 + 2j]]))[0, 0] == 1 - 2j

    def test_involution(self, rng):
        A = crandn(rng, 3, 4)
        assert np.array_equal(linalg.adjoint(linalg.adjoint(A)), A)

    def test_hermitian_fixed(self, rng):
        A = random_hpd(rng, 4)
        assert np.allclose(linalg.adjoint(A), A, atol=0)


class TestFrobNorm:
    def test_zero(self):
        assert linalg.frob_norm(np.zeros((3, 3))) == 0

    def test_three_four(self):
        assert linalg.frob_norm(np.array([[3, 4j]])) == pytest.approx(5.0, abs=1e-15)

    def test_unitary_invariance(self, rng):
        Q, _ = np.linalg.qr(crandn(rng, 5, 5))
        A = crandn(rng, 5, 3)
        assert abs(linalg.frob_norm(Q @ A) - linalg.frob_norm(A)) <= 1e-12 * linalg.frob_norm(A)

    def test_batched(self, rng):
        A = crandn(rng, 4, 2, 3)
        assert np.allclose(linalg.frob_norm(A), [np.linalg.norm(a) for a in A], rtol=1e-14)


class TestHermitianSolve:
    def test_identity(self, rng, backend):
        B = crandn(rng, 3, 2)
        assert np.allclose(linalg.hermitian_solve(np.eye(3), B), B, atol=1e-15)

    def test_scaled_identity(self, backend):
        X = linalg.hermitian_solve(2 * np.eye(2), np.eye(2))
        assert np.allclose(X, 0.5 * np.eye(2), atol=1e-15)

    def test_adjugate_oracle(self, rng, backend):
        A = random_hpd(rng, 3)
        B = crandn(rng, 3, 2)
        X = linalg.hermitian_solve(A, B)
        assert np.max(np.abs(X - adjugate_inverse_3x3(A) @ B)) <= 1e-10

    def test_residual_bound_batched(self, rng, backend):
        A = random_hpd(rng, 6, batch=(4, 3))
        B = crandn(rng, 4, 3, 6, 2)
        X = linalg.hermitian_solve(A, B)
        res = np.linalg.norm(A @ X - B, axis=(-2, -1))
        assert np.all(res <= 1e-10 * (1 + np.linalg.norm(B, axis=(-2, -1))))

    def test_singular_names_index(self, rng, backend):
        A = random_hpd(rng, 3, batch=(5,))
        A[3] = np.diag([1.0, 1.0, 0.0])
        with pytest.raises(linalg.SingularMatrixError) as info:
            linalg.hermitian_solve(A, np.ones((5, 3, 1)))
        assert info.value.index == 3

    def test_not_positive_definite(self, backend):
        with pytest.raises(linalg.SingularMatrixError):
            linalg.hermitian_solve(np.diag([1.0, -1.0]), np.eye(2))

    def test_shape_error(self, rng):
        with pytest.raises(linalg.ShapeError):
            linalg.hermitian_solve(random_hpd(rng, 3), np.ones((2, 1)))

    def test_backends_agree(self, rng):
        from uwmmse import _backend

        A = random_hpd(rng, 5, batch=(7,))
        B = crandn(rng, 7, 5, 2)
        with _backend.backend("numpy"):
            x_np = linalg.hermitian_solve(A, B)
        with _backend.backend("numba" if _backend.HAVE_NUMBA else "numpy"):
            x_nb = linalg.hermitian_solve(A, B)
        assert np.max(np.abs(x_np - x_nb)) <= 1e-12


class TestSolve:
    def test_general(self, rng):
        A = crandn(rng, 4, 4)
        B = crandn(rng, 4, 2)
        assert np.allclose(A @ linalg.solve(A, B), B, atol=1e-12)

    def test_singular_index(self):
        A = np.stack([np.eye(2), np.zeros((2, 2))])
        with pytest.raises(linalg.SingularMatrixError) as info:
            linalg.solve(A, np.ones((2, 2, 1)))
        assert info.value.index == 1

    def test_extended_matches_double(self, rng):
        A = crandn(rng, 3, 4, 4)
        B = crandn(rng, 3, 4, 1)
        x = linalg.solve(A.astype(np.clongdouble), B.astype(np.clongdouble))
        assert x.dtype == np.clongdouble
        assert np.max(np.abs(x.astype(complex) - np.linalg.solve(A, B))) <= 1e-12


class TestLogdet:
    def test_identity(self, backend):
        assert linalg.logdet_cap(np.eye(4)) == 0.0

    def test_two_identity(self, backend):
        assert linalg.logdet_cap(2 * np.eye(3)) == pytest.approx(3.0, abs=1e-14)

    def test_pivot_oracle(self, rng, backend):
        A = random_hpd(rng, 3)
        assert abs(linalg.logdet_cap(A) - ldl_pivot_logdet(A)) <= 1e-10

    def test_domain_error(self, backend):
        with pytest.raises(linalg.DomainError):
            linalg.logdet_cap(np.diag([1.0, -2.0]))

    def test_commuting_product(self, rng, backend):
        A = random_hpd(rng, 4)
        B = A @ A + 2 * A + np.eye(4)  # a polynomial in A, commutes with it
        assert abs(linalg.logdet_cap(A @ B) - linalg.logdet_cap(A) - linalg.logdet_cap(B)) <= 1e-9

    def test_gram_matches_explicit(self, rng):
        X = crandn(rng, 2, 3, 7)
        sigma = 0.3
        G = X @ linalg.adjoint(X) + sigma ** 2 * np.eye(3)
        L = linalg.gram_factor(X, sigma)
        assert np.allclose(L @ linalg.adjoint(L), G, atol=1e-12)
        assert np.allclose(np.triu(L, 1), 0)
        assert np.all(np.diagonal(L, axis1=-2, axis2=-1).real > 0)
        assert np.allclose(linalg.logdet_gram(X, sigma), np.linalg.slogdet(G)[1] / np.log(2), atol=1e-12)

    def test_gram_extended(self, rng):
        X = crandn(rng, 3, 5)
        ref = linalg.logdet_gram(X, 1e-3)
        ext = linalg.logdet_gram(X.astype(np.clongdouble), 1e-3)
        assert abs(float(ext) - ref) <= 1e-11

    def test_gram_resolves_noise_floor(self):
        # rank-one X: one eigenvalue of X X^H + s^2 I equals s^2 exactly
        x = np.array([[1.0], [1.0]], dtype=complex)
        s = 1e-5
        exact = np.log2(s ** 2) + np.log2(2 + s ** 2)
        assert abs(linalg.logdet_gram(x, s) - exact) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2 ** 32 - 1))
def test_solve_then_multiply_recovers_rhs(n, seed):
    rng = np.random.default_rng(seed)
    A = random_hpd(rng, n, shift=1.0)
    B = crandn(rng, n, 2)
    X = linalg.hermitian_solve(A, B)
    assert np.linalg.norm(A @ X - B) <= 1e-10 * (1 + np.linalg.norm(B))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2 ** 32 - 1))
def test_cholesky_reconstructs(n, seed):
    rng = np.random.default_rng(seed)
    A = random_hpd(rng, n, shift=1.0)
    L = linalg.cholesky(A)
    assert np.allclose(L @ linalg.adjoint(L), A, rtol=1e-12, atol=1e-12)
