"""Small dense complex matrix kernels.

All functions accept stacks of matrices: the last two axes are the matrix
axes and any leading axes are batch axes (typically the node axis, possibly
preceded by a sample axis).  Everything is complex128 / float64, except
that long-double input stays in extended precision (used by the
finite-difference gradient oracle), and object arrays of ``mpmath``
numbers run through the same generic kernels at arbitrary precision.

Hermitian positive definite systems go through an unpivoted Cholesky
factorization.  A pivot ``L[j, j]**2`` below ``PIVOT_RTOL`` times the largest
diagonal entry of the input is treated as singular, and the error carries
the batch index of the offending matrix.
"""

import math

import numpy as np

from ._backend import njit, use_numba

PIVOT_RTOL = 1e-12
LN2 = math.log(2.0)

__all__ = [
    "ShapeError",
    "SingularMatrixError",
    "DomainError",
    "gemm",
    "adjoint",
    "frob_norm",
    "cholesky",
    "cho_solve",
    "hermitian_solve",
    "solve",
    "logdet_cap",
    "logdet_from_cholesky",
    "gram_factor",
    "logdet_gram",
]


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class SingularMatrixError(np.linalg.LinAlgError):
    """A matrix in the batch is singular (or not positive definite) within tolerance.

    ``index`` is the batch index of the first offending matrix: an int for a
    one-dimensional batch (the node index), a tuple for deeper batches, and
    ``None`` when unknown.
    """

    def __init__(self, message, index=None):
        if index is not None:
            message = f"{message} (matrix index {index})"
        super().__init__(message)
        self.index = index


class DomainError(ValueError):
    """Input outside the domain of the function (e.g. logdet of a non-HPD matrix)."""


def is_extended(a):
    """True for long-double or object (``mpmath``) input, which skips LAPACK and numba."""
    return np.asarray(a).dtype in (np.longdouble, np.clongdouble, np.dtype(object))


def _as_complex(a):
    a = np.asarray(a)
    if a.dtype == object:
        return a
    if is_extended(a):
        return a.astype(np.clongdouble, copy=False)
    return a.astype(np.complex128, copy=False)


# Elementwise helpers that also accept object arrays of mpmath numbers
# (numpy's ufuncs treat ``.real`` of an object array as the array itself).


def _mp_map(func, a):
    import mpmath

    return np.vectorize(getattr(mpmath, func), otypes=[object])(a)


def re(a):
    a = np.asarray(a)
    return _mp_map("re", a) if a.dtype == object else np.real(a)


def im(a):
    a = np.asarray(a)
    return _mp_map("im", a) if a.dtype == object else np.imag(a)


def abs2(a):
    a = np.asarray(a)
    if a.dtype == object:
        return re(a) ** 2 + im(a) ** 2
    return a.real ** 2 + a.imag ** 2


def esqrt(a):
    a = np.asarray(a)
    return _mp_map("sqrt", a) if a.dtype == object else np.sqrt(a)


def elog(a):
    a = np.asarray(a)
    return _mp_map("log", a) if a.dtype == object else np.log(a)


# Generic kernels for extended precision (LAPACK has no long-double path).
# Loops run over the matrix order only; the batch axis is vectorised.


def _cholesky_generic(A, rtol):
    N, n, _ = A.shape
    L = np.zeros_like(A)
    maxdiag = np.max(re(np.diagonal(A, axis1=-2, axis2=-1)), axis=-1)
    thresh = rtol * maxdiag
    for j in range(n):
        s = re(A[:, j, j]) - np.sum(abs2(L[:, j, :j]), axis=-1)
        bad = ~(s > thresh).astype(bool)
        if np.any(bad):
            return None, int(np.argmax(bad))
        d = esqrt(s)
        L[:, j, j] = d
        if j + 1 < n:
            t = A[:, j + 1 :, j] - np.einsum("bik,bk->bi", L[:, j + 1 :, :j], np.conj(L[:, j, :j]))
            L[:, j + 1 :, j] = t / d[:, None]
    return L, -1


def _cho_solve_generic(L, B):
    n = L.shape[-1]
    Y = np.zeros(B.shape, dtype=np.result_type(L, B))
    for i in range(n):
        t = B[:, i, :] - np.einsum("bk,bkc->bc", L[:, i, :i], Y[:, :i, :])
        Y[:, i, :] = t / re(L[:, i, i])[:, None]
    X = np.zeros_like(Y)
    for i in range(n - 1, -1, -1):
        t = Y[:, i, :] - np.einsum("bk,bkc->bc", np.conj(L[:, i + 1 :, i]), X[:, i + 1 :, :])
        X[:, i, :] = t / re(L[:, i, i])[:, None]
    return X


def _qr_r_generic(Y):
    """Triangular factor of batched Householder QR of tall ``Y`` (``N x m x n``)."""
    Y = Y.copy()
    n = Y.shape[-1]
    for k in range(n):
        x = Y[:, k:, k]
        norm = esqrt(np.sum(abs2(x), axis=-1))
        x0 = x[:, 0]
        mag = np.abs(x0)
        phase = np.where(mag > 0, x0 / np.where(mag > 0, mag, 1), 1)
        v = x.copy()
        v[:, 0] = x0 + phase * norm
        vnorm = esqrt(np.sum(abs2(v), axis=-1))
        live = (vnorm > 0).astype(bool)
        v = v / np.where(live, vnorm, 1)[:, None]
        proj = np.einsum("bi,bij->bj", np.conj(v), Y[:, k:, k:])
        Y[:, k:, k:] -= 2 * v[:, :, None] * proj[:, None, :]
    return np.triu(Y[:, :n, :])


def _solve_generic(A, B):
    """Batched Gaussian elimination with partial pivoting; returns ``(X, bad_index)``."""
    A = A.copy()
    B = B.copy()
    N, n, _ = A.shape
    rows = np.arange(N)
    scale = np.max(np.abs(A), axis=(-2, -1))
    for k in range(n):
        piv = k + np.argmax(np.abs(A[:, k:, k]).astype(float), axis=-1)
        small = ~(np.abs(A[rows, piv, k]) > 1e-30 * scale).astype(bool)
        if np.any(small):
            return None, int(np.argmax(small))
        for M in (A, B):
            tmp = M[rows, k].copy()
            M[rows, k] = M[rows, piv]
            M[rows, piv] = tmp
        f = A[:, k + 1 :, k] / A[:, k, k][:, None]
        A[:, k + 1 :, :] -= f[:, :, None] * A[:, k, None, :]
        B[:, k + 1 :, :] -= f[:, :, None] * B[:, k, None, :]
    X = np.zeros_like(B)
    for i in range(n - 1, -1, -1):
        t = B[:, i, :] - np.einsum("bk,bkc->bc", A[:, i, i + 1 :], X[:, i + 1 :, :])
        X[:, i, :] = t / A[:, i, i][:, None]
    return X, -1


def _batch_index(flat, batch_shape):
    if flat is None or flat < 0:
        return None
    if len(batch_shape) == 0:
        return None
    if len(batch_shape) == 1:
        return int(flat)
    return tuple(int(i) for i in np.unravel_index(flat, batch_shape))


def _check_square(A, name="A"):
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise ShapeError(f"{name} must be square in its last two axes, got shape {A.shape}")


def gemm(A, B):
    """Matrix product with a shape check on the contracted dimension."""
    A = np.asarray(A)
    B = np.asarray(B)
    if A.ndim < 2 or B.ndim < 2 or A.shape[-1] != B.shape[-2]:
        raise ShapeError(f"cannot multiply shapes {A.shape} and {B.shape}")
    try:
        return np.matmul(A, B)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None


def adjoint(A):
    """Conjugate transpose over the last two axes."""
    A = np.asarray(A)
    return np.conj(np.swapaxes(A, -1, -2))


def frob_norm(A):
    """Frobenius norm over the last two axes (over all entries for 0-d/1-d input)."""
    A = np.asarray(A)
    if A.ndim < 2:
        return float(np.sqrt(np.sum(np.abs(A) ** 2)))
    return esqrt(np.sum(abs2(A), axis=(-2, -1)))


# ---------------------------------------------------------------------------
# Cholesky kernels
# ---------------------------------------------------------------------------


@njit
def _cholesky_nb(A, rtol):
    N = A.shape[0]
    n = A.shape[1]
    L = np.zeros_like(A)
    for b in range(N):
        maxdiag = 0.0
        for k in range(n):
            if A[b, k, k].real > maxdiag:
                maxdiag = A[b, k, k].real
        thresh = rtol * maxdiag
        for j in range(n):
            s = A[b, j, j].real
            for k in range(j):
                s -= L[b, j, k].real ** 2 + L[b, j, k].imag ** 2
            if not (s > thresh):
                return L, b
            d = math.sqrt(s)
            L[b, j, j] = d
            for i in range(j + 1, n):
                t = A[b, i, j]
                for k in range(j):
                    t -= L[b, i, k] * np.conj(L[b, j, k])
                L[b, i, j] = t / d
    return L, -1


@njit
def _cho_solve_nb(L, B):
    N = L.shape[0]
    n = L.shape[1]
    m = B.shape[2]
    X = np.empty((N, n, m), dtype=np.complex128)
    y = np.empty(n, dtype=np.complex128)
    for b in range(N):
        for c in range(m):
            for i in range(n):
                t = B[b, i, c]
                for k in range(i):
                    t -= L[b, i, k] * y[k]
                y[i] = t / L[b, i, i].real
            for i in range(n - 1, -1, -1):
                t = y[i]
                for k in range(i + 1, n):
                    t -= np.conj(L[b, k, i]) * X[b, k, c]
                X[b, i, c] = t / L[b, i, i].real
    return X


def _cholesky_np(A, rtol):
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        for b in range(A.shape[0]):
            try:
                np.linalg.cholesky(A[b])
            except np.linalg.LinAlgError:
                return None, b
        return None, 0  # pragma: no cover - batched and looped disagree
    maxdiag = np.maximum(np.max(np.real(np.diagonal(A, axis1=-2, axis2=-1)), axis=-1), 0.0)
    piv = np.real(np.diagonal(L, axis1=-2, axis2=-1)) ** 2
    bad = ~np.all(piv > (rtol * maxdiag)[:, None], axis=-1)
    if np.any(bad):
        return None, int(np.argmax(bad))
    return L, -1


def cholesky(A):
    """Lower Cholesky factor of a (stack of) Hermitian positive definite matrices.

    Only the lower triangle of ``A`` is read.
    """
    A = _as_complex(A)
    _check_square(A)
    batch_shape = A.shape[:-2]
    n = A.shape[-1]
    flat = np.ascontiguousarray(A.reshape((-1, n, n)))
    if flat.shape[0] == 0:
        return np.zeros_like(A)
    if is_extended(flat):
        L, bad = _cholesky_generic(flat, PIVOT_RTOL)
    elif use_numba():
        L, bad = _cholesky_nb(flat, PIVOT_RTOL)
    else:
        L, bad = _cholesky_np(flat, PIVOT_RTOL)
    if bad >= 0:
        raise SingularMatrixError(
            "matrix is not Hermitian positive definite within tolerance",
            _batch_index(bad, batch_shape),
        )
    return L.reshape(A.shape)


def cho_solve(L, B):
    """Solve ``(L L^H) X = B`` given the Cholesky factor ``L``."""
    L = _as_complex(L)
    B = _as_complex(B)
    batch = np.broadcast_shapes(L.shape[:-2], B.shape[:-2])
    n = L.shape[-1]
    m = B.shape[-1]
    Lb = np.ascontiguousarray(np.broadcast_to(L, batch + (n, n)).reshape((-1, n, n)))
    Bb = np.ascontiguousarray(np.broadcast_to(B, batch + (n, m)).reshape((-1, n, m)))
    if is_extended(Lb) or is_extended(Bb):
        X = _cho_solve_generic(Lb, Bb)
    elif use_numba():
        X = _cho_solve_nb(Lb, Bb)
    else:
        # triangular systems through the general solver are exact enough here
        Y = np.linalg.solve(Lb, Bb)
        X = np.linalg.solve(np.conj(np.swapaxes(Lb, -1, -2)), Y)
    return X.reshape(batch + (n, m))


def hermitian_solve(A, B):
    """Solve ``A X = B`` for Hermitian positive definite ``A``.

    Raises
    ------
    SingularMatrixError
        If a pivot falls below ``PIVOT_RTOL`` times the largest diagonal entry.
    """
    A = _as_complex(A)
    B = _as_complex(B)
    _check_square(A)
    if B.ndim < 2 or B.shape[-2] != A.shape[-1]:
        raise ShapeError(f"right-hand side shape {B.shape} does not match {A.shape}")
    L = cholesky(A)
    return cho_solve(L, B)


def solve(A, B):
    """General (LU) complex solve, batched over leading axes."""
    A = _as_complex(A)
    B = _as_complex(B)
    _check_square(A)
    if B.ndim < 2 or B.shape[-2] != A.shape[-1]:
        raise ShapeError(f"right-hand side shape {B.shape} does not match {A.shape}")
    batch = np.broadcast_shapes(A.shape[:-2], B.shape[:-2])
    if is_extended(A) or is_extended(B):
        n, m = A.shape[-1], B.shape[-1]
        dtype = object if object in (A.dtype, B.dtype) else np.clongdouble
        Ab = np.broadcast_to(A, batch + (n, n)).reshape((-1, n, n)).astype(dtype)
        Bb = np.broadcast_to(B, batch + (n, m)).reshape((-1, n, m)).astype(dtype)
        X, bad = _solve_generic(Ab, Bb)
        if bad >= 0:
            raise SingularMatrixError("singular matrix", _batch_index(bad, batch))
        return X.reshape(batch + (n, m))
    try:
        X = np.linalg.solve(A, B)
    except np.linalg.LinAlgError:
        n = A.shape[-1]
        flat = np.broadcast_to(A, batch + (n, n)).reshape((-1, n, n))
        for b in range(flat.shape[0]):
            try:
                np.linalg.solve(flat[b], np.eye(n))
            except np.linalg.LinAlgError:
                raise SingularMatrixError("singular matrix", _batch_index(b, batch)) from None
        raise SingularMatrixError("singular matrix") from None  # pragma: no cover
    if not np.all(np.isfinite(X)):
        bad = ~np.all(np.isfinite(X), axis=(-2, -1))
        raise SingularMatrixError("solve produced non-finite values", _batch_index(int(np.argmax(bad.reshape(-1))), batch))
    return X


def logdet_from_cholesky(L):
    diag = re(np.diagonal(L, axis1=-2, axis2=-1))
    return 2.0 * np.sum(elog(diag), axis=-1) / LN2


def logdet_cap(A):
    """Base-2 log-determinant of a (stack of) Hermitian positive definite matrices."""
    try:
        L = cholesky(A)
    except SingularMatrixError as exc:
        raise DomainError(f"logdet of a non-HPD matrix: {exc}") from None
    return logdet_from_cholesky(L)


def gram_factor(X, sigma):
    """Lower factor ``L`` with ``L L^H = X X^H + sigma^2 I``, without forming ``X X^H``.

    Takes the QR factorization of ``[X, sigma I]^H``.  Eigenvalues near
    ``sigma^2`` (e.g. aligned interference at low noise) keep full relative
    accuracy, which the explicit Gram matrix loses to round-off.
    """
    X = _as_complex(X)
    n = X.shape[-2]
    eye = np.broadcast_to(sigma * np.eye(n, dtype=X.dtype), X.shape[:-2] + (n, n))
    stacked = adjoint(np.concatenate([X, eye], axis=-1))
    if is_extended(X):
        flat = np.ascontiguousarray(stacked).reshape((-1,) + stacked.shape[-2:])
        r = _qr_r_generic(flat).reshape(stacked.shape[:-2] + (n, n))
    else:
        r = np.linalg.qr(stacked, mode="r")
    # make the diagonal real positive so L is the Cholesky factor
    diag = np.diagonal(r, axis1=-2, axis2=-1)
    mag = np.abs(diag)
    phase = np.where((mag == 0).astype(bool), 1.0, diag / np.where((mag == 0).astype(bool), 1.0, mag))
    r = np.conj(phase)[..., :, None] * r
    return adjoint(r)


def logdet_gram(X, sigma):
    """Base-2 log-determinant of ``X X^H + sigma^2 I`` (``sigma > 0``)."""
    L = gram_factor(X, sigma)
    return logdet_from_cholesky(L)
