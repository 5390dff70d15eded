import logging
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from elto.exceptions import ArgumentError, ConsistencyError
from elto.models import EltoFilterModel, KernelKind, KernelSpec
from elto.services.kernels import eval_kernel, kernel_matrix

logger = logging.getLogger(__name__)

# Default ridge is this fraction of the mean Gram diagonal
DEFAULT_EPS_SCALE = 1e-3
SPOT_CHECKS = 5
SPOT_TOLERANCE = 1e-10


def default_epsilon(G: np.ndarray) -> float:
    """1e-3 * tr(G) / N, or 1e-3 when the Gram is zero."""
    n = G.shape[0]
    value = DEFAULT_EPS_SCALE * float(np.trace(G)) / n
    return value if value > 0 else DEFAULT_EPS_SCALE


def ridge_solve(G: np.ndarray, eps: float, rhs: np.ndarray) -> np.ndarray:
    """(G + eps I)^{-1} rhs for a PSD Gram, Cholesky first."""
    A = G + eps * np.eye(G.shape[0])
    try:
        return linalg.solve(A, rhs, assume_a="pos")
    except linalg.LinAlgError:
        logger.warning(
            f"[operators.ridge_solve] Cholesky failed (eps={eps:.3g}), using LDL"
        )
        return linalg.solve(A, rhs, assume_a="sym")


def transition_pairs(segments: Sequence[Tuple[int, int]]) -> Tuple[np.ndarray, np.ndarray]:
    """(pre, post) column pairs (n, n+1) inside each ``(first_column, count)`` segment."""
    pre, post = [], []
    for first, count in segments:
        idx = np.arange(first, first + count)
        pre.append(idx[:-1])
        post.append(idx[1:])
    return np.concatenate(pre).astype(int), np.concatenate(post).astype(int)


def _self_gram(spec: KernelSpec, samples: np.ndarray) -> np.ndarray:
    G = kernel_matrix(spec, samples, samples)
    return 0.5 * (G + G.T)


def fit_operators(
    X,
    Y_train,
    kernel_x: KernelSpec,
    kernel_y: KernelSpec,
    eps_t: Optional[float] = None,
    eps_o: Optional[float] = None,
    eps_q: Optional[float] = None,
    pre_index=None,
    post_index=None,
) -> EltoFilterModel:
    """Empirical ELTO and EOO in finite coordinates.

    ``X`` is r x N, ``Y_train`` q x N with column n observed from state n.
    Transition pairs default to (n, n+1) over the single chain. Missing
    epsilons default to 1e-3 * tr(G) / N of the Gram they regularize.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y_train = np.atleast_2d(np.asarray(Y_train, dtype=float))
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y_train))):
        raise ArgumentError("states and observations must be finite")
    n = X.shape[1]
    if n < 3:
        raise ArgumentError(f"need N >= 3 state samples, got {n}")
    if Y_train.shape[1] != n:
        raise ArgumentError(
            f"X has {n} columns but Y_train has {Y_train.shape[1]}"
        )
    if pre_index is None:
        pre_index, post_index = np.arange(n - 1), np.arange(1, n)
    pre = np.asarray(pre_index, dtype=int)
    post = np.asarray(post_index, dtype=int)
    if pre.shape != post.shape or pre.size == 0:
        raise ArgumentError("pre_index and post_index must be non-empty and aligned")
    if min(pre.min(), post.min()) < 0 or max(pre.max(), post.max()) >= n:
        raise ConsistencyError(f"transition index outside 0..{n - 1}")

    G_x = _self_gram(kernel_x, X.T)
    G_y = _self_gram(kernel_y, Y_train.T)
    G1 = G_x[np.ix_(pre, pre)]
    G12 = G_x[np.ix_(pre, post)]
    eps_t = eps_t if eps_t is not None else default_epsilon(G1)
    eps_o = eps_o if eps_o is not None else default_epsilon(G_x)
    eps_q = eps_q if eps_q is not None else default_epsilon(G_y)

    T_coord = ridge_solve(G1, eps_t, G12)
    O_coord = ridge_solve(G_x, eps_o, G_x)

    # weights over all N states -> weights over the successor states, re-indexed onto N
    lift = ridge_solve(G1, eps_t, G_x[pre, :])
    transition = np.zeros((n, n))
    np.add.at(transition, post, lift)

    P = ridge_solve(G1, eps_t, G1)
    R = P - np.eye(pre.size)
    noise_pre = R @ R.T / n
    process_noise = np.zeros((n, n))
    process_noise[np.ix_(post, post)] = noise_pre
    process_noise = 0.5 * (process_noise + process_noise.T)

    _check_reconstruction(G1, G12, eps_t, T_coord)
    logger.info(
        f"[operators.fit_operators] N={n}, pairs={pre.size}, "
        f"eps_t={eps_t:.3g}, eps_o={eps_o:.3g}, eps_q={eps_q:.3g}"
    )
    return EltoFilterModel(
        X=X,
        Y_train=Y_train,
        kernel_x=kernel_x,
        kernel_y=kernel_y,
        G_x=G_x,
        G1=G1,
        G12=G12,
        G_y=G_y,
        T_coord=T_coord,
        O_coord=O_coord,
        eps_t=eps_t,
        eps_o=eps_o,
        eps_q=eps_q,
        pre_index=pre,
        post_index=post,
        transition=transition,
        process_noise=process_noise,
        decoder=Y_train @ O_coord,
    )


def _check_reconstruction(G1, G12, eps, T_coord):
    A = G1 + eps * np.eye(G1.shape[0])
    residual = A @ T_coord - G12
    # backward-error scale of a stable solve
    scale = max(np.abs(G12).max(), 1.0) + 1e-3 * np.abs(A).max() * np.abs(T_coord).max()
    if np.abs(residual).max() > 1e-6 * scale:
        raise ConsistencyError(
            f"T_coord does not reproduce G12 (max residual {np.abs(residual).max():.3g})"
        )


def propagate_embedding(model: EltoFilterModel, m) -> np.ndarray:
    """T_coord m for weights over the successor states."""
    m = np.asarray(m, dtype=float)
    expected = model.T_coord.shape[1]
    if m.shape[0] != expected:
        raise ArgumentError(f"weight vector has length {m.shape[0]}, expected {expected}")
    return model.T_coord @ m


def observe_embedding(model: EltoFilterModel, m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.shape[0] != model.N:
        raise ArgumentError(f"weight vector has length {m.shape[0]}, expected {model.N}")
    return model.O_coord @ m


def decode_state(model: EltoFilterModel, m) -> np.ndarray:
    """Regression preimage of a state embedding onto the state samples."""
    return model.X @ observe_embedding(model, m)


def embedding_weights(model: EltoFilterModel, x) -> np.ndarray:
    """Weights over the N state samples approximating phi_x(x)."""
    k = kernel_matrix(model.kernel_x, model.X.T, np.atleast_2d(x))[:, 0]
    return ridge_solve(model.G_x, model.eps_o, k)


def linear_state_operator(model: EltoFilterModel) -> np.ndarray:
    """r x r matrix X_post (G1 + eps_t I)^{-1} X_pre^T of a Linear-kernel model."""
    if model.kernel_x.kind != KernelKind.LINEAR:
        raise ArgumentError("the state-span operator needs a Linear state kernel")
    X_pre = model.X[:, model.pre_index]
    X_post = model.X[:, model.post_index]
    return X_post @ ridge_solve(model.G1, model.eps_t, X_pre.T)


def verify_model(model: EltoFilterModel, seed: int = 0, checks: int = SPOT_CHECKS) -> None:
    """Re-evaluate random Gram entries and raise ConsistencyError on mismatch."""
    rng = np.random.default_rng(seed)
    n = model.N
    for _ in range(checks):
        i, j = rng.integers(0, n, size=2)
        for name, spec, samples, G in (
            ("G_x", model.kernel_x, model.X, model.G_x),
            ("G_y", model.kernel_y, model.Y_train, model.G_y),
        ):
            expected = eval_kernel(spec, samples[:, i], samples[:, j])
            if abs(G[i, j] - expected) > SPOT_TOLERANCE * max(1.0, abs(expected)):
                raise ConsistencyError(
                    f"{name}[{i},{j}]={G[i, j]!r} but the kernel gives {expected!r}"
                )
