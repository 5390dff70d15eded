"""Koopman mode decomposition on learned states, with DMD-family baselines."""
import logging
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from elto.exceptions import ArgumentError
from elto.models import KernelSpec, ModeDecomposition, ModeMethod
from elto.services.kernels import kernel_matrix
from elto.services.operators import default_epsilon, ridge_solve

logger = logging.getLogger(__name__)

DEFECTIVE_CONDITION = 1e12
RANK_TOLERANCE = 1e-10
DEDUP_TOLERANCE = 1e-6
EDMD_RIDGE = 1e-12

Dictionary = Callable[[np.ndarray], np.ndarray]


class KoopmanMatrix(NamedTuple):
    """Finite coordinate form (G1 + eps I)^{-1} G12 and the basis it lives on."""

    k_coord: np.ndarray
    basis: np.ndarray  # r x P states x_a spanning the eigenfunctions
    kernel: KernelSpec
    gram_pre: np.ndarray
    eps: float


# ============ Helpers ============


def _sort_order(eigvals: np.ndarray) -> np.ndarray:
    """Descending magnitude, then descending imaginary part."""
    mag = np.round(np.abs(eigvals), 10)
    return np.lexsort((-eigvals.imag, -mag))


def _truncate(eigvals_sorted: np.ndarray, n_modes: Optional[int]) -> int:
    """Number of leading eigenvalues to keep without splitting a conjugate pair."""
    n = eigvals_sorted.size
    if n_modes is None or n_modes >= n:
        return n
    k = n_modes
    last = eigvals_sorted[k - 1]
    if last.imag > 0 and abs(eigvals_sorted[k] - np.conj(last)) <= 1e-8 * max(1.0, abs(last)):
        k += 1
    return k


def continuous_eigenvalues(eigvals, dt: float) -> np.ndarray:
    """log(lambda)/dt on the principal branch; -inf for lambda = 0."""
    eigvals = np.asarray(eigvals, dtype=complex)
    out = np.full(eigvals.shape, complex(-np.inf, 0.0))
    nz = np.abs(eigvals) > 0
    out[nz] = np.log(eigvals[nz]) / dt
    return out


def _fit_modes(phi: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Least-squares modes v (q x k) with Y ~ phi v^T."""
    V, *_ = linalg.lstsq(phi, Y.astype(complex))
    return V.T


def _build(
    eigvals, coeffs, values, modes, dt, method, flags=()
) -> ModeDecomposition:
    return ModeDecomposition(
        eigvals_discrete=eigvals,
        eigvals_continuous=continuous_eigenvalues(eigvals, dt),
        eigfun_coeffs=coeffs,
        eigfun_values=values,
        modes=modes,
        dt=dt,
        method=method,
        flags=tuple(flags),
    )


def _defective(vectors: np.ndarray) -> bool:
    return bool(np.linalg.cond(vectors) > DEFECTIVE_CONDITION)


def _as_rows(Y) -> np.ndarray:
    Y = np.asarray(Y)
    if Y.ndim == 1:
        Y = Y.reshape(-1, 1)
    return Y


# ============ Kernel Koopman ============


def kernel_koopman(
    X,
    kernel_x: KernelSpec,
    eps: Optional[float] = None,
    pre_index=None,
    post_index=None,
) -> KoopmanMatrix:
    """Kernel Koopman matrix on the state samples (columns of ``X``)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if not np.all(np.isfinite(X)):
        raise ArgumentError("states must be finite")
    n = X.shape[1]
    if n < 3:
        raise ArgumentError(f"need N >= 3 state samples, got {n}")
    if pre_index is None:
        pre_index, post_index = np.arange(n - 1), np.arange(1, n)
    pre = np.asarray(pre_index, dtype=int)
    post = np.asarray(post_index, dtype=int)
    X_pre, X_post = X[:, pre], X[:, post]
    G1 = kernel_matrix(kernel_x, X_pre.T, X_pre.T)
    G1 = 0.5 * (G1 + G1.T)
    G12 = kernel_matrix(kernel_x, X_pre.T, X_post.T)
    eps = eps if eps is not None else default_epsilon(G1)
    if eps <= 0:
        raise ArgumentError(f"eps must be > 0, got {eps}")
    K = ridge_solve(G1, eps, G12)
    return KoopmanMatrix(k_coord=K, basis=X_pre, kernel=kernel_x, gram_pre=G1, eps=eps)


def decompose(
    koopman: KoopmanMatrix,
    X,
    Y,
    dt: float,
    n_modes: Optional[int] = None,
) -> ModeDecomposition:
    """Eigenvalues, eigenfunctions on the states ``X`` and least-squares modes of ``Y``.

    ``Y`` holds one observation row per column of ``X``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = _as_rows(Y)
    if Y.shape[0] != X.shape[1]:
        raise ArgumentError(f"Y has {Y.shape[0]} rows for {X.shape[1]} states")
    K = koopman.k_coord
    eigvals, vl, vr = linalg.eig(K, left=True, right=True)
    order = _sort_order(eigvals)
    eigvals, vl, vr = eigvals[order], vl[:, order], vr[:, order]
    flags = []
    if _defective(vr):
        flags.append("defective")
        logger.warning("[modes.decompose] eigenvector matrix is ill-conditioned")

    keep = _truncate(eigvals, n_modes)
    eigvals, vl = eigvals[:keep], vl[:, :keep]
    # left eigenvectors of K give eigenfunctions sum_i alpha_i k(., x_i)
    alpha = ridge_solve(koopman.gram_pre, koopman.eps, np.conj(vl))
    sections = kernel_matrix(koopman.kernel, X.T, koopman.basis.T)
    phi = sections @ alpha
    modes = _fit_modes(phi, Y)
    return _build(eigvals, alpha, phi, modes, dt, ModeMethod.ELTO, flags)


# ============ DMD ============


def _numerical_rank(s: np.ndarray, rank: Optional[int]) -> Tuple[int, List[str]]:
    flags = []
    available = int(np.sum(s > RANK_TOLERANCE * s[0])) if s.size and s[0] > 0 else 0
    if rank is None:
        return available, flags
    if rank > available:
        flags.append("rank_truncated")
        logger.warning(f"[modes] requested rank {rank}, numerical rank {available}")
        return available, flags
    return rank, flags


def dmd_exact(
    Y1,
    Y2,
    dt: float = 1.0,
    rank: Optional[int] = None,
    method: ModeMethod = ModeMethod.DMD,
) -> ModeDecomposition:
    """Exact DMD of snapshot pairs; columns of ``Y1`` map to columns of ``Y2``."""
    Y1 = np.atleast_2d(np.asarray(Y1))
    Y2 = np.atleast_2d(np.asarray(Y2))
    if Y1.shape != Y2.shape:
        raise ArgumentError(f"snapshot shapes differ: {Y1.shape} vs {Y2.shape}")
    if Y1.shape[1] < 2:
        raise ArgumentError("dmd_exact needs at least 2 snapshot pairs")
    U, s, Vh = linalg.svd(Y1, full_matrices=False)
    r, flags = _numerical_rank(s, rank)
    if r == 0:
        raise ArgumentError("snapshot matrix has numerical rank 0")
    U, s, V = U[:, :r], s[:r], Vh[:r].conj().T
    Y2V = Y2 @ V / s
    A_tilde = U.conj().T @ Y2V
    eigvals, W = linalg.eig(A_tilde)
    order = _sort_order(eigvals)
    eigvals, W = eigvals[order], W[:, order]
    if _defective(W):
        flags.append("defective")
    modes = Y2V @ W
    coeffs = linalg.pinv(modes)
    values = (coeffs @ Y1).T
    return _build(eigvals, coeffs.T, values, modes, dt, method, flags)


def snapshot_pairs(Y) -> Tuple[np.ndarray, np.ndarray]:
    """(Y1, Y2) column snapshots from a series with one sample per row."""
    Y = _as_rows(Y)
    return Y[:-1].T, Y[1:].T


def delay_embed(Y, delay: int) -> np.ndarray:
    """Columns stack ``delay`` consecutive samples (oldest first)."""
    Y = _as_rows(Y)
    n = Y.shape[0] - delay + 1
    if delay < 1 or n < 1:
        raise ArgumentError(f"delay {delay} does not fit a series of length {Y.shape[0]}")
    return np.vstack([Y[k : k + n].T for k in range(delay)])


def _deduplicate(dec: ModeDecomposition, tol: float = DEDUP_TOLERANCE) -> ModeDecomposition:
    kept: List[int] = []
    for i, lam in enumerate(dec.eigvals_discrete):
        if all(abs(lam - dec.eigvals_discrete[j]) > tol for j in kept):
            kept.append(i)
    if len(kept) == dec.eigvals_discrete.size:
        return dec
    idx = np.array(kept)
    return dec.model_copy(
        update={
            "eigvals_discrete": dec.eigvals_discrete[idx],
            "eigvals_continuous": dec.eigvals_continuous[idx],
            "eigfun_coeffs": dec.eigfun_coeffs[:, idx],
            "eigfun_values": dec.eigfun_values[:, idx],
            "modes": dec.modes[:, idx],
        }
    )


def hankel_dmd(Y, delay_d: int, dt: float = 1.0, rank: Optional[int] = None) -> ModeDecomposition:
    """Exact DMD on delay-stacked snapshots; modes restricted to the oldest block."""
    Y = _as_rows(Y)
    if Y.shape[0] <= delay_d + 1:
        raise ArgumentError(
            f"series of length {Y.shape[0]} too short for delay {delay_d}"
        )
    H = delay_embed(Y, delay_d)
    dec = dmd_exact(H[:, :-1], H[:, 1:], dt, rank, method=ModeMethod.HANKEL_DMD)
    q = Y.shape[1]
    dec = dec.model_copy(update={"modes": dec.modes[:q]})
    return _deduplicate(dec)


def identity_dictionary(Y) -> np.ndarray:
    return _as_rows(Y)


def edmd(Y, dictionary: Dictionary = identity_dictionary, dt: float = 1.0) -> ModeDecomposition:
    """Extended DMD: K = G^+ A on dictionary features of consecutive samples."""
    Y = _as_rows(Y)
    if Y.shape[0] < 3:
        raise ArgumentError("edmd needs at least 2 snapshot pairs")
    Psi = np.asarray(dictionary(Y))
    Px, Py = Psi[:-1], Psi[1:]
    n = Px.shape[0]
    G = Px.conj().T @ Px / n
    A = Px.conj().T @ Py / n
    flags = []
    if np.linalg.matrix_rank(G) < G.shape[0]:
        flags.append("ridge")
        logger.warning(f"[modes.edmd] singular feature covariance, ridge {EDMD_RIDGE:g}")
        G = G + EDMD_RIDGE * np.eye(G.shape[0])
    K = linalg.solve(G, A)
    eigvals, xi = linalg.eig(K)
    order = _sort_order(eigvals)
    eigvals, xi = eigvals[order], xi[:, order]
    if _defective(xi):
        flags.append("defective")
    phi = Psi @ xi
    modes = _fit_modes(phi, Y)
    return _build(eigvals, xi, phi, modes, dt, ModeMethod.EDMD, flags)


def subspace_dmd(
    Y,
    rank: Optional[int] = None,
    delay: int = 1,
    dictionary: Optional[Dictionary] = None,
    dt: float = 1.0,
) -> ModeDecomposition:
    """Subspace DMD from two past and two future snapshots per column.

    Snapshots are dictionary features and/or ``delay``-stacked samples. The
    future block is projected onto the row space of the past block, its
    left singular vectors split as [U1; U2], and A = U1^+ U2.
    """
    Y = _as_rows(Y)
    Z = np.asarray(dictionary(Y)) if dictionary is not None else Y
    Z = delay_embed(Z, delay) if delay > 1 else Z.T
    p, n = Z.shape
    if n < 4:
        raise ArgumentError(f"subspace_dmd needs at least 4 snapshots, got {n}")
    m = n - 3
    Yp = np.vstack([Z[:, 0:m], Z[:, 1 : m + 1]])
    Yf = np.vstack([Z[:, 2 : m + 2], Z[:, 3 : m + 3]])
    Q, _ = linalg.qr(Yp.conj().T, mode="economic")
    U, s, _ = linalg.svd(Yf @ Q, full_matrices=False)
    r, flags = _numerical_rank(s, rank)
    if rank is None and r > p:
        r = p
    if r == 0:
        raise ArgumentError("projected future has numerical rank 0")
    U1, U2 = U[:p, :r], U[p:, :r]
    A = linalg.pinv(U1) @ U2
    eigvals, W = linalg.eig(A)
    order = _sort_order(eigvals)
    eigvals, W = eigvals[order], W[:, order]
    if _defective(W):
        flags.append("defective")
    lifted = U1 @ W
    coeffs = linalg.pinv(lifted)
    phi = (coeffs @ Z).T
    modes = _fit_modes(phi, Y[:n])
    return _build(eigvals, coeffs.T, phi, modes, dt, ModeMethod.SUBSPACE_DMD, flags)


# ============ Scoring ============


def _domain_values(estimated, domain: str) -> np.ndarray:
    if isinstance(estimated, ModeDecomposition):
        values = estimated.eigvals_continuous if domain == "continuous" else estimated.eigvals_discrete
    else:
        values = np.asarray(estimated, dtype=complex).ravel()
    if domain not in ("discrete", "continuous"):
        raise ArgumentError(f"domain must be 'discrete' or 'continuous', got {domain!r}")
    return values[np.isfinite(values)]


def eigen_error_detail(estimated, truth: Sequence[complex], domain: str = "discrete") -> np.ndarray:
    """Per-true-eigenvalue absolute error after greedy nearest matching.

    Unmatched true eigenvalues are penalized by their distance to 0.
    """
    truth = np.asarray(truth, dtype=complex).ravel()
    if truth.size == 0:
        raise ArgumentError("truth must be non-empty")
    est = _domain_values(estimated, domain)
    used = np.zeros(est.size, dtype=bool)
    errors = np.empty(truth.size)
    unmatched = 0
    for i, t in enumerate(truth):
        dist = np.where(used, np.inf, np.abs(est - t))
        if dist.size == 0 or not np.isfinite(dist.min()):
            errors[i] = abs(t)
            unmatched += 1
            continue
        j = int(np.argmin(dist))
        used[j] = True
        errors[i] = dist[j]
    if unmatched:
        logger.warning(
            f"[modes.eigen_error] {unmatched} true eigenvalue(s) without estimate, "
            f"penalized by their modulus"
        )
    return errors


def eigen_error(estimated, truth: Sequence[complex], domain: str = "discrete") -> float:
    """Mean absolute error between true eigenvalues and their greedy matches."""
    return float(eigen_error_detail(estimated, truth, domain).mean())


def retain(dec: ModeDecomposition, lo: float = 0.2, hi: float = 1.1) -> ModeDecomposition:
    """Keep eigenvalues with |lambda| in [lo, hi]."""
    mag = np.abs(dec.eigvals_discrete)
    idx = np.flatnonzero((mag >= lo) & (mag <= hi))
    return dec.model_copy(
        update={
            "eigvals_discrete": dec.eigvals_discrete[idx],
            "eigvals_continuous": dec.eigvals_continuous[idx],
            "eigfun_coeffs": dec.eigfun_coeffs[:, idx],
            "eigfun_values": dec.eigfun_values[:, idx],
            "modes": dec.modes[:, idx],
        }
    )


def reconstruct(dec: ModeDecomposition, n_steps: int, start: int = 0) -> np.ndarray:
    """Mode sum y_t = sum_j lambda_j^t phi_j(x_start) v_j for t = 0..n_steps-1 (real part)."""
    t = np.arange(n_steps)[:, None]
    powers = dec.eigvals_discrete[None, :] ** t
    amplitudes = dec.eigfun_values[start]
    return np.real((powers * amplitudes) @ dec.modes.T)
