"""Classical WMMSE beamforming (full and truncated).

Shapes: ``H`` is ``(..., M, M, R, T)``, beamformers ``V`` are
``(..., M, T, d)``, receivers ``U`` are ``(..., M, R, d)`` and weights are
``(..., M, d, d)``.  The per-node updates are written with the ``autodiff``
operation functions, so they evaluate directly on arrays and also record on
a tape when handed tape variables (the unfolded network reuses them).

The beamformer update sums over the receivers a transmitter interferes
with.  ``convention="transposed"`` (default) uses
``sum_j H_ji^H U_j W_j U_j^H H_ji``, the exact block minimiser of the MSE
surrogate under the ``H[i, j] = channel from j to i`` convention;
``convention="paper"`` uses ``sum_j H_ij^H U_j W_j U_j^H H_ij`` literally.
"""

from dataclasses import dataclass, field, replace
import math

import numpy as np

from . import autodiff as ad
from . import linalg
from ._backend import njit, use_numba
from .channel import DEFAULT_PMAX, DEFAULT_SIGMA

TRANSPOSED = "transposed"
PAPER = "paper"
CONVENTIONS = (TRANSPOSED, PAPER)

__all__ = [
    "SolverOptions",
    "WmmseResult",
    "SolverError",
    "v_init",
    "initial_beamformers",
    "update_u",
    "update_w_hat",
    "mse_matrix",
    "mse_matrices",
    "surrogate_objective",
    "v_system",
    "update_v_fixed_mu",
    "update_v_classical",
    "saturate",
    "rates",
    "sum_rate",
    "run_wmmse",
    "run_truncated",
]


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverOptions:
    max_iters: int = 100
    bisection_tol: float = 1e-8
    bisection_max_steps: int = 200
    objective_trace: bool = False
    early_exit: bool = True
    convention: str = TRANSPOSED

    def __post_init__(self):
        if self.max_iters < 1 or self.bisection_max_steps < 1:
            raise ValueError("iteration counts must be positive")
        if not self.bisection_tol > 0:
            raise ValueError("bisection_tol must be positive")
        if self.convention not in CONVENTIONS:
            raise ValueError(f"convention must be one of {CONVENTIONS}")


@dataclass
class WmmseResult:
    V: np.ndarray
    iterations: int
    objective: list = field(default_factory=list)
    mu: np.ndarray = None
    # per sweep: dicts with U, W_hat, V, mu (only when trace=True)
    states: list = field(default_factory=list)


def v_init(T, d, pmax=DEFAULT_PMAX):
    return math.sqrt(pmax / (2.0 * T * d)) * (1.0 + 1.0j)


def initial_beamformers(M, T, d, pmax=DEFAULT_PMAX, batch=()):
    """All-equal start ``v_init * 1_{T x d}``; each node has power exactly ``pmax``."""
    return np.full(tuple(batch) + (M, T, d), v_init(T, d, pmax), dtype=np.complex128)


# ---------------------------------------------------------------------------
# Tensor plumbing (array or tape variable)
# ---------------------------------------------------------------------------


def _shape(x):
    return np.shape(ad.value(x))


def _insert_axis(x, pos):
    """Insert a singleton axis in front of the last ``pos`` axes."""
    s = _shape(x)
    k = len(s) - pos
    return ad.reshape(x, s[:k] + (1,) + s[k:])


def _stack_pairs(X):
    """``(..., Mi, Mj, r, c)`` -> ``(..., Mi, r, Mj*c)``.

    Concatenating the pair blocks along columns turns a sum over the partner
    index of ``X X^H`` into one matrix product.
    """
    s = _shape(X)
    nd = len(s)
    axes = list(range(nd - 4)) + [nd - 4, nd - 2, nd - 3, nd - 1]
    return ad.reshape(ad.transpose(X, axes), s[:-4] + (s[-4], s[-2], s[-3] * s[-1]))


def _eye(n):
    return np.eye(n, dtype=np.complex128)


def pair_products(H, V):
    """``HV[..., i, j] = H_ij V_j``."""
    return ad.matmul(H, _insert_axis(V, 3))


# ---------------------------------------------------------------------------
# Block updates
# ---------------------------------------------------------------------------


def update_u(H, V, sigma):
    """Receive filters ``U_i = (sum_j H_ij V_j V_j^H H_ij^H + sigma^2 I)^{-1} H_ii V_i``."""
    HV = pair_products(H, V)
    R = _shape(H)[-2]
    # per-pair terms reduced in value order: relabelled networks give bit-identical sums
    J = ad.add(ad.node_sum(ad.matmul(HV, ad.adjoint(HV)), -3), (sigma ** 2) * _eye(R))
    return ad.hermitian_solve(J, ad.node_diag(HV))


def update_w_hat(H, U, V):
    """MMSE weights ``(I - U_i^H H_ii V_i)^{-1}``."""
    d = _shape(V)[-1]
    E0 = ad.sub(_eye(d), ad.matmul(ad.adjoint(U), ad.matmul(ad.node_diag(H), V)))
    W = ad.solve(E0, np.broadcast_to(_eye(d), _shape(E0)))
    # Hermitian in exact arithmetic; at high SINR cancellation in E0 leaves a
    # spurious skew part that would bias the beamformer system
    return ad.scale(ad.add(W, ad.adjoint(W)), 0.5)


def mse_matrices(H, U, V, sigma):
    """MSE matrices ``E_i`` for every node, shape ``(..., M, d, d)``."""
    H, U, V = (np.asarray(a, dtype=np.complex128) for a in (H, U, V))
    HV = np.matmul(H, V[..., None, :, :, :])
    Y = np.matmul(linalg.adjoint(U)[..., :, None, :, :], HV)  # U_i^H H_ij V_j
    M = H.shape[-3]
    d = V.shape[-1]
    idx = np.arange(M)
    # (I - Y_ii) is formed first: at high SINR it is tiny and expanding the
    # square would cancel away its leading digits
    D = np.eye(d) - Y[..., idx, idx, :, :]
    Y = Y.copy()
    Y[..., idx, idx, :, :] = 0.0
    E = D @ linalg.adjoint(D) + np.sum(Y @ linalg.adjoint(Y), axis=-3)
    return E + sigma ** 2 * (linalg.adjoint(U) @ U)


def mse_matrix(H, U, V, sigma, i):
    """``E_i`` for a single node, from the defining formula."""
    H, U, V = (np.asarray(a, dtype=np.complex128) for a in (H, U, V))
    d = V.shape[-1]
    Ui = U[i]
    D = np.eye(d) - linalg.adjoint(Ui) @ H[i, i] @ V[i]
    E = D @ linalg.adjoint(D) + sigma ** 2 * linalg.adjoint(Ui) @ Ui
    for j in range(H.shape[0]):
        if j != i:
            T = linalg.adjoint(Ui) @ H[i, j] @ V[j]
            E = E + T @ linalg.adjoint(T)
    return E


def surrogate_objective(H, U, W_hat, V, sigma):
    """``sum_i Tr(W_i E_i) - ln det W_i`` (natural log)."""
    W_hat = np.asarray(W_hat, dtype=np.complex128)
    E = mse_matrices(H, U, V, sigma)
    herm = 0.5 * (W_hat + linalg.adjoint(W_hat))
    tr = np.real(np.trace(herm @ E, axis1=-2, axis2=-1))
    try:
        ld = linalg.logdet_cap(herm) * linalg.LN2
    except linalg.DomainError as exc:
        raise linalg.DomainError(f"weight matrix is not positive definite: {exc}") from None
    return np.sum(tr - ld, axis=-1)


def v_system(H, U, W, convention=TRANSPOSED):
    """Matrix ``A_i`` and right-hand side ``H_ii^H U_i W_i`` of the beamformer update."""
    UH = ad.adjoint(U)
    if convention == TRANSPOSED:
        C = ad.matmul(_insert_axis(UH, 2), H)  # [j, i] = U_j^H H_ji
        WC = ad.matmul(_insert_axis(W, 2), C)
        partner = -4
    elif convention == PAPER:
        C = ad.matmul(_insert_axis(UH, 3), H)  # [i, j] = U_j^H H_ij
        WC = ad.matmul(_insert_axis(W, 3), C)
        partner = -3
    else:
        raise ValueError(f"unknown convention {convention!r}")
    A = ad.node_sum(ad.matmul(ad.adjoint(C), WC), partner)
    rhs = ad.matmul(ad.matmul(ad.adjoint(ad.node_diag(H)), U), W)
    return A, rhs


def update_v_fixed_mu(H, U, W, mu, convention=TRANSPOSED):
    """Raw beamformers ``(A_i + mu I)^{-1} H_ii^H U_i W_i`` with a given multiplier.

    ``mu`` is a scalar (possibly complex, possibly a tape variable) shared
    by all nodes, or an array of per-node values.  No power projection.
    """
    A, rhs = v_system(H, U, W, convention)
    T = _shape(A)[-1]
    if isinstance(mu, ad.Var) or np.ndim(mu) == 0:
        shift = ad.mul(mu, _eye(T))
    else:
        shift = np.asarray(mu)[..., None, None] * _eye(T)
    return ad.solve(ad.add(A, shift), rhs)


def saturate(V, pmax):
    """Rescale nodes above the power budget back onto ``||V_i||_F^2 = pmax``."""
    return ad.saturate(V, pmax)


# ---------------------------------------------------------------------------
# Power-constrained beamformer update (bisection on the multiplier)
# ---------------------------------------------------------------------------


@njit
def _chol1(A, L, rtol):
    n = A.shape[0]
    maxdiag = 0.0
    for k in range(n):
        if A[k, k].real > maxdiag:
            maxdiag = A[k, k].real
    thresh = rtol * maxdiag
    for j in range(n):
        s = A[j, j].real
        for k in range(j):
            s -= L[j, k].real ** 2 + L[j, k].imag ** 2
        if not (s > thresh):
            return False
        dj = math.sqrt(s)
        L[j, j] = dj
        for i in range(j + 1, n):
            t = A[i, j]
            for k in range(j):
                t -= L[i, k] * np.conj(L[j, k])
            L[i, j] = t / dj
    return True


@njit
def _cho_solve1(L, B, X, y):
    n = L.shape[0]
    for c in range(B.shape[1]):
        for i in range(n):
            t = B[i, c]
            for k in range(i):
                t -= L[i, k] * y[k]
            y[i] = t / L[i, i].real
        for i in range(n - 1, -1, -1):
            t = y[i]
            for k in range(i + 1, n):
                t -= np.conj(L[k, i]) * X[k, c]
            X[i, c] = t / L[i, i].real


@njit
def _power_at(A, b, mu, work, L, X, y, rtol):
    n = A.shape[0]
    for r in range(n):
        for c in range(n):
            work[r, c] = A[r, c]
        work[r, r] += mu
    if not _chol1(work, L, rtol):
        return -1.0
    _cho_solve1(L, b, X, y)
    p = 0.0
    for r in range(n):
        for c in range(X.shape[1]):
            p += X[r, c].real ** 2 + X[r, c].imag ** 2
    return p


@njit
def _bisect_node_nb(A, b, pmax, tol, max_steps, rtol, Vout):
    """Returns (mu, status); status 0 ok, 1 bracketing failed."""
    n = A.shape[0]
    m = b.shape[1]
    work = np.empty((n, n), dtype=np.complex128)
    L = np.zeros((n, n), dtype=np.complex128)
    X = np.empty((n, m), dtype=np.complex128)
    y = np.empty(n, dtype=np.complex128)
    nonzero = False
    for r in range(n):
        for c in range(m):
            if b[r, c] != 0:
                nonzero = True
    if not nonzero:
        for r in range(n):
            for c in range(m):
                Vout[r, c] = 0.0
        return 0.0, 0
    p0 = _power_at(A, b, 0.0, work, L, X, y, rtol)
    if p0 >= 0.0 and p0 <= pmax:
        for r in range(n):
            for c in range(m):
                Vout[r, c] = X[r, c]
        return 0.0, 0
    lo = 0.0
    hi = 1.0
    p_hi = _power_at(A, b, hi, work, L, X, y, rtol)
    steps = 0
    while p_hi < 0.0 or p_hi > pmax:
        lo = hi
        hi *= 2.0
        p_hi = _power_at(A, b, hi, work, L, X, y, rtol)
        steps += 1
        if steps > max_steps:
            return hi, 1
    steps = 0
    while pmax - p_hi > tol * pmax and steps < max_steps and hi - lo > 1e-15 * hi:
        mid = 0.5 * (lo + hi)
        p_mid = _power_at(A, b, mid, work, L, X, y, rtol)
        if p_mid < 0.0 or p_mid > pmax:
            lo = mid
        else:
            hi = mid
            p_hi = p_mid
        steps += 1
    _power_at(A, b, hi, work, L, X, y, rtol)
    for r in range(n):
        for c in range(m):
            Vout[r, c] = X[r, c]
    return hi, 0


@njit
def _update_v_nb(A, b, pmax, tol, max_steps, rtol):
    M = A.shape[0]
    V = np.zeros((M, A.shape[1], b.shape[2]), dtype=np.complex128)
    mu = np.zeros(M)
    for i in range(M):
        m_i, status = _bisect_node_nb(A[i], b[i], pmax, tol, max_steps, rtol, V[i])
        if status != 0:
            return V, mu, i
        mu[i] = m_i
    return V, mu, -1


def _powers(X):
    return np.sum(X.real ** 2 + X.imag ** 2, axis=(-2, -1))


def _try_solve(A, b):
    """Per-node Hermitian solve; failed nodes get NaN power instead of raising."""
    try:
        X = linalg.hermitian_solve(A, b)
        return X, np.ones(A.shape[0], dtype=bool)
    except linalg.SingularMatrixError:
        X = np.zeros(b.shape, dtype=np.complex128)
        ok = np.zeros(A.shape[0], dtype=bool)
        for i in range(A.shape[0]):
            try:
                X[i] = linalg.hermitian_solve(A[i], b[i])
                ok[i] = True
            except linalg.SingularMatrixError:
                pass
        return X, ok


def _update_v_np(A, b, pmax, tol, max_steps):
    M, T, _ = A.shape
    eye = np.eye(T)
    V = np.zeros(b.shape, dtype=np.complex128)
    mu = np.zeros(M)

    def solve_at(nodes, m):
        X, ok = _try_solve(A[nodes] + m[:, None, None] * eye, b[nodes])
        p = np.where(ok, _powers(X), np.inf)
        return X, p

    nonzero = np.any(b != 0, axis=(-2, -1))
    nodes = np.flatnonzero(nonzero)
    X0, p0 = solve_at(nodes, np.zeros(len(nodes)))
    feas = p0 <= pmax
    V[nodes[feas]] = X0[feas]
    nodes = nodes[~feas]
    if len(nodes) == 0:
        return V, mu
    lo = np.zeros(len(nodes))
    hi = np.ones(len(nodes))
    X_hi, p_hi = solve_at(nodes, hi)
    steps = 0
    while np.any(p_hi > pmax):
        grow = p_hi > pmax
        lo[grow] = hi[grow]
        hi[grow] *= 2.0
        Xg, pg = solve_at(nodes[grow], hi[grow])
        X_hi[grow] = Xg
        p_hi[grow] = pg
        steps += 1
        if steps > max_steps:
            bad = nodes[np.argmax(grow)]
            raise SolverError(f"bisection failed to bracket the multiplier for node {bad}")
    steps = np.zeros(len(nodes), dtype=int)
    while True:
        act = (pmax - p_hi > tol * pmax) & (steps < max_steps) & (hi - lo > 1e-15 * hi)
        if not np.any(act):
            break
        mid = 0.5 * (lo[act] + hi[act])
        Xm, pm = solve_at(nodes[act], mid)
        above = pm > pmax
        ia = np.flatnonzero(act)
        lo[ia[above]] = mid[above]
        hi[ia[~above]] = mid[~above]
        p_hi[ia[~above]] = pm[~above]
        X_hi[ia[~above]] = Xm[~above]
        steps[ia] += 1
    V[nodes] = X_hi
    mu[nodes] = hi
    return V, mu


def update_v_classical(H, U, W_hat, pmax=DEFAULT_PMAX, opts=None):
    """Power-constrained beamformer update for one CSI sample.

    Per node, ``mu_i = 0`` when the unconstrained solution meets the budget,
    otherwise the multiplier is bracketed from ``[0, 1]`` by doubling and
    bisected until the power is within ``bisection_tol * pmax`` below the
    budget (the feasible end of the bracket is returned).

    Returns ``(V, mu)``.
    """
    opts = opts or SolverOptions()
    A, b = v_system(H, U, W_hat, opts.convention)
    A = np.ascontiguousarray(0.5 * (A + linalg.adjoint(A)))
    b = np.ascontiguousarray(b)
    if use_numba():
        V, mu, bad = _update_v_nb(A, b, float(pmax), opts.bisection_tol, opts.bisection_max_steps, linalg.PIVOT_RTOL)
        if bad >= 0:
            raise SolverError(f"bisection failed to bracket the multiplier for node {bad}")
        return V, mu
    return _update_v_np(A, b, float(pmax), opts.bisection_tol, opts.bisection_max_steps)


# ---------------------------------------------------------------------------
# Rates
# ---------------------------------------------------------------------------


def rates(H, V, sigma):
    """Per-node achievable rates in bits, shape ``(..., M)``.

    ``log2 det(I + S J^{-1})`` is evaluated as ``log2 det(J + S) - log2 det J``
    with ``J`` the interference-plus-noise covariance.  Both determinants
    come from QR factors of the stacked link blocks, so eigenvalues near the
    noise floor are resolved accurately.  With ``sigma = 0`` the explicit
    covariances must be positive definite.
    """
    HV = pair_products(H, V)
    M = _shape(H)[-3]
    mask = (1.0 - np.eye(M))[:, :, None, None]
    X_all = _stack_pairs(HV)
    X_int = _stack_pairs(ad.mul(HV, mask))
    if sigma > 0:
        return ad.sub(ad.logdet_gram(X_all, sigma), ad.logdet_gram(X_int, sigma))
    total = ad.matmul(X_all, ad.adjoint(X_all))
    interf = ad.matmul(X_int, ad.adjoint(X_int))
    return ad.sub(ad.logdet_cap(total), ad.logdet_cap(interf))


def sum_rate(H, V, sigma, alpha=None):
    """Weighted sum-rate ``sum_i alpha_i c_i`` (bits/s/Hz), one value per sample."""
    r = rates(H, V, sigma)
    if alpha is not None:
        r = ad.mul(r, np.asarray(alpha, dtype=float))
    return ad.sum(r, axis=-1)


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------


def run_wmmse(H, sigma=DEFAULT_SIGMA, pmax=DEFAULT_PMAX, opts=None, trace=False):
    """Block-coordinate descent from the all-equal start for one CSI sample.

    Each sweep updates receivers, MMSE weights and then beamformers.  Stops
    after ``opts.max_iters`` sweeps, or earlier when ``early_exit`` is set and
    the beamformers move by less than ``1e-8 * sqrt(M * pmax)``.
    """
    opts = opts or SolverOptions()
    H = np.asarray(H, dtype=np.complex128)
    if H.ndim != 4:
        raise ValueError("run_wmmse expects a single (M, M, R, T) CSI tensor")
    M, _, R, T = H.shape
    d = 1
    V = initial_beamformers(M, T, d, pmax)
    result = WmmseResult(V=V, iterations=0)
    stop = 1e-8 * math.sqrt(M * pmax)
    for it in range(opts.max_iters):
        U = update_u(H, V, sigma)
        W = update_w_hat(H, U, V)
        V_new, mu = update_v_classical(H, U, W, pmax, opts)
        result.iterations = it + 1
        if opts.objective_trace:
            result.objective.append(float(surrogate_objective(H, U, W, V_new, sigma)))
        if trace:
            result.states.append({"U": U, "W_hat": W, "V": V_new, "mu": mu})
        delta = linalg.frob_norm(V_new - V)
        V = V_new
        result.mu = mu
        if opts.early_exit and float(np.sqrt(np.sum(delta ** 2))) < stop:
            break
    result.V = V
    return result


def run_truncated(H, k, sigma=DEFAULT_SIGMA, pmax=DEFAULT_PMAX, opts=None, mu=None, trace=False):
    """WMMSE stopped after ``k`` sweeps.

    With ``mu`` given, the bisection is replaced by the fixed multiplier and
    the saturation map (the unfolded layer with a zero learned transform).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    opts = replace(opts or SolverOptions(), max_iters=int(k))
    if mu is None:
        return run_wmmse(H, sigma, pmax, opts, trace)
    H = np.asarray(H, dtype=np.complex128)
    M, _, R, T = H.shape[-4:]
    V = initial_beamformers(M, T, 1, pmax, H.shape[:-4])
    result = WmmseResult(V=V, iterations=0)
    for it in range(int(k)):
        U = update_u(H, V, sigma)
        W = update_w_hat(H, U, V)
        V_bar = update_v_fixed_mu(H, U, W, mu, opts.convention)
        V = saturate(V_bar, pmax)
        result.iterations = it + 1
        if trace:
            result.states.append({"U": U, "W_hat": W, "V_bar": V_bar, "V": V, "mu": mu})
    result.V = V
    result.mu = mu
    return result
