"""Spectral learning of the latent state process.

Past/future windows of the scalar feature ``u_t = sum_e w_e k_y(y_t, y_e)``
give past, future and cross covariances. Their whitened SVD yields the
canonical correlations and the state-construction matrix ``B``. The
weights ``w`` are trained with Adam on minus the sum of the top-r
correlations, with the gradient taken analytically through the whitening
and the SVD.
"""
import logging
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg

from elto.exceptions import ArgumentError, ConsistencyError
from elto.models import KernelSpec, RealizationModel, TimeSeries, WindowedData
from elto.services.kernels import kernel_matrix

logger = logging.getLogger(__name__)

# Eigenvalues below this fraction of the largest are dropped when whitening
WHITEN_TOLERANCE = 1e-10
# Default rank keeps correlations above this fraction of the largest
RANK_FRACTION = 0.05
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

SeriesInput = Union[TimeSeries, Sequence[TimeSeries]]


class Covariances(NamedTuple):
    Cpp: np.ndarray
    Cff: np.ndarray
    Cfp: np.ndarray


class Whitened(NamedTuple):
    U: np.ndarray
    s: np.ndarray
    V: np.ndarray
    B: np.ndarray
    flags: Tuple[str, ...] = ()


class _Features(NamedTuple):
    Fpc: np.ndarray
    Ffc: np.ndarray
    cov: Covariances


def _as_list(series: SeriesInput) -> List[TimeSeries]:
    if isinstance(series, TimeSeries):
        return [series]
    series = list(series)
    if not series:
        raise ArgumentError("at least one time series is required")
    return series


# ============ Windows ============


def _windows(lengths: Sequence[int], h: int) -> WindowedData:
    segments = []
    start = 0
    for n_rows in lengths:
        segments.append((start, n_rows - 1))
        start += n_rows
    n_total = sum(t_s + 2 - 2 * h for _, t_s in segments)
    return WindowedData(
        T=start - 1,
        h=h,
        N=n_total,
        past_offsets=tuple(h - i - 1 for i in range(1, h + 1)),
        future_offsets=tuple(h + j - 2 for j in range(1, h + 1)),
        segments=tuple(segments),
    )


def build_windows(series: SeriesInput, h: int) -> WindowedData:
    """Past/future window tables; several series are pooled without crossing boundaries."""
    items = _as_list(series)
    for s in items:
        if not (2 < h < (s.T + 1) / 2):
            raise ArgumentError(
                f"window size h={h} outside the admissible interval "
                f"2 < h < {(s.T + 1) / 2:g} for T={s.T}"
            )
    return _windows([s.data.shape[0] for s in items], h)


def pooled_samples(series: SeriesInput) -> np.ndarray:
    items = _as_list(series)
    q = {s.q for s in items}
    if len(q) != 1:
        raise ArgumentError(f"series have different dimensions: {sorted(q)}")
    return np.vstack([s.data for s in items])


def select_reference(n_samples: int, policy: str = "all") -> np.ndarray:
    """Reference index set S from a policy: all, last:<k> or stride:<k>."""
    if policy == "all":
        return np.arange(n_samples)
    kind, _, value = policy.partition(":")
    k = int(value)
    if k < 1:
        raise ArgumentError(f"reference policy needs k >= 1, got {policy!r}")
    if kind == "last":
        return np.arange(max(0, n_samples - k), n_samples)
    if kind == "stride":
        return np.arange(0, n_samples, k)
    raise ArgumentError(f"unknown reference policy {policy!r}")


# ============ Covariances ============


def _reference_block(G, S: np.ndarray) -> np.ndarray:
    values = getattr(G, "values", G)
    values = np.asarray(values, dtype=float)
    n_rows, n_cols = values.shape
    if n_cols == n_rows:
        if S.size and (S.min() < 0 or S.max() >= n_cols):
            raise ConsistencyError(f"reference index out of Gram range 0..{n_cols - 1}")
        return values[:, S]
    if n_cols == S.size:
        return values
    raise ConsistencyError(
        f"Gram has {n_cols} columns, expected {n_rows} or |S|={S.size}"
    )


def _centred(F: np.ndarray) -> np.ndarray:
    # subtract the first column before the mean so constant rows become exactly 0
    F0 = F - F[:, :1]
    return F0 - F0.mean(axis=1, keepdims=True)


def _features(u: np.ndarray, win: WindowedData) -> _Features:
    past = win.past_indices()
    future = win.future_indices()
    if max(past.max(), future.max()) >= u.shape[0]:
        raise ConsistencyError(
            f"window index {max(past.max(), future.max())} outside 0..{u.shape[0] - 1}"
        )
    Fpc = _centred(u[past])
    Ffc = _centred(u[future])
    n = win.N
    cov = Covariances(
        Cpp=Fpc @ Fpc.T / n,
        Cff=Ffc @ Ffc.T / n,
        Cfp=Ffc @ Fpc.T / n,
    )
    return _Features(Fpc, Ffc, cov)


def empirical_covariances(G, w, S, win: WindowedData) -> Covariances:
    """(Cpp, Cff, Cfp) of the centred past/future features, with the 1/N factor.

    ``G`` is either the Gram over all samples or its columns at ``S``.
    """
    w = np.asarray(w, dtype=float)
    S = np.asarray(S, dtype=int)
    if w.shape[0] != S.shape[0]:
        raise ArgumentError(f"|w|={w.shape[0]} does not match |S|={S.shape[0]}")
    u = _reference_block(G, S) @ w
    return _features(u, win).cov


# ============ Whitening / SVD ============


def _whitening(C: np.ndarray):
    """Eigen data for C^{1/2} and its pseudo-inverse, small eigenvalues dropped."""
    lam, E = np.linalg.eigh(0.5 * (C + C.T))
    top = max(lam.max(), 0.0)
    keep = lam > WHITEN_TOLERANCE * top if top > 0 else np.zeros_like(lam, dtype=bool)
    inv_sqrt = np.zeros_like(lam)
    inv_sqrt[keep] = 1.0 / np.sqrt(lam[keep])
    return lam, E, keep, inv_sqrt


def whiten_and_svd(Cpp, Cff, Cfp, r: int) -> Whitened:
    """SVD of Cff^{-1/2} Cfp Cpp^{-1/2} truncated to the top ``r`` factors.

    When fewer than ``r`` directions survive the whitening, the achievable
    rank is returned and ``rank_truncated`` is flagged.
    """
    h = Cpp.shape[0]
    if not 1 <= r <= h:
        raise ArgumentError(f"rank r={r} outside 1..{h}")
    _, Ep, keep_p, isp = _whitening(Cpp)
    _, Ef, keep_f, isf = _whitening(Cff)
    Pinv = (Ep * isp) @ Ep.T
    Finv = (Ef * isf) @ Ef.T
    U, s, Vt = np.linalg.svd(Finv @ Cfp @ Pinv)

    flags = []
    achievable = int(min(keep_p.sum(), keep_f.sum()))
    r_eff = min(r, achievable)
    if r_eff < r:
        flags.append("rank_truncated")
        logger.warning(
            f"[realization.whiten_and_svd] requested r={r}, numerical rank {achievable}"
        )
    s_r = s[:r_eff]
    B = (np.sqrt(s_r)[:, None] * Vt[:r_eff]) @ Pinv
    return Whitened(U=U[:, :r_eff], s=s_r, V=Vt[:r_eff].T, B=B, flags=tuple(flags))


# ============ Loss and gradient ============


def _sqrt_inverse_adjoint(C: np.ndarray, H: np.ndarray) -> np.ndarray:
    """Gradient wrt C of <H, f(C)> for f(C) = pinv(C)^{1/2}."""
    lam, E, keep, f = _whitening(C)
    fprime = np.where(keep, -0.5 * np.where(keep, lam, 1.0) ** -1.5, 0.0)
    dl = lam[:, None] - lam[None, :]
    df = f[:, None] - f[None, :]
    close = np.abs(dl) <= 1e-12 * max(np.abs(lam).max(), 1e-300)
    with np.errstate(divide="ignore", invalid="ignore"):
        D = np.where(close, 0.0, df / np.where(close, 1.0, dl))
    D = np.where(close, 0.5 * (fprime[:, None] + fprime[None, :]), D)
    Hs = 0.5 * (H + H.T)
    return E @ ((E.T @ Hs @ E) * D) @ E.T


def _loss_and_grad_u(u: np.ndarray, win: WindowedData, r: int):
    with np.errstate(over="ignore", invalid="ignore"):
        feats = _features(u, win)
    Cpp, Cff, Cfp = feats.cov
    if not all(np.all(np.isfinite(C)) for C in feats.cov):
        return float("nan"), np.zeros_like(u), np.array([]), ("non_finite_loss",)
    tiny = np.finfo(float).tiny
    if not (np.trace(Cpp) > tiny and np.trace(Cff) > tiny):
        return 0.0, np.zeros_like(u), np.array([]), ("degenerate_covariance",)

    _, Ep, _, isp = _whitening(Cpp)
    _, Ef, _, isf = _whitening(Cff)
    P = (Ep * isp) @ Ep.T
    F = (Ef * isf) @ Ef.T
    A = F @ Cfp @ P
    U, s, Vt = np.linalg.svd(A)
    r = min(r, s.size)
    loss = -float(s[:r].sum())

    GA = -U[:, :r] @ Vt[:r]
    G_cfp = F @ GA @ P
    G_cff = _sqrt_inverse_adjoint(Cff, GA @ P @ Cfp.T)
    G_cpp = _sqrt_inverse_adjoint(Cpp, Cfp.T @ F @ GA)

    n = win.N
    g_fpc = 2.0 * G_cpp @ feats.Fpc / n + G_cfp.T @ feats.Ffc / n
    g_ffc = 2.0 * G_cff @ feats.Ffc / n + G_cfp @ feats.Fpc / n
    # centering is a projection, so its adjoint is itself
    g_fp = g_fpc - g_fpc.mean(axis=1, keepdims=True)
    g_ff = g_ffc - g_ffc.mean(axis=1, keepdims=True)

    grad_u = np.zeros_like(u)
    np.add.at(grad_u, win.past_indices(), g_fp)
    np.add.at(grad_u, win.future_indices(), g_ff)
    return loss, grad_u, s, ()


def _guarded_loss(GS: np.ndarray, w: np.ndarray, win: WindowedData, r: int):
    """Loss and feature gradient; overflow or a failed decomposition gives a NaN loss."""
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            u = GS @ w
        loss, grad_u, _, flags = _loss_and_grad_u(u, win, r)
    except np.linalg.LinAlgError:
        return float("nan"), None, ("non_finite_loss",)
    return loss, grad_u, flags


def cca_loss_and_gradient(G, w, S, win: WindowedData, r: int):
    """Loss -sum(top-r canonical correlations) and its gradient in ``w``.

    Returns ``(loss, grad, flags)``; degenerate covariances give a zero loss
    and gradient flagged ``degenerate_covariance``.
    """
    w = np.asarray(w, dtype=float)
    S = np.asarray(S, dtype=int)
    if w.shape[0] != S.shape[0]:
        raise ArgumentError(f"|w|={w.shape[0]} does not match |S|={S.shape[0]}")
    GS = _reference_block(G, S)
    loss, grad_u, _, flags = _loss_and_grad_u(GS @ w, win, r)
    if flags:
        logger.warning(f"[realization.cca_loss_and_gradient] {', '.join(flags)}")
    return loss, GS.T @ grad_u, flags


# ============ Training ============


def init_weights(n: int, seed: int) -> np.ndarray:
    """Seeded standard normal vector scaled to unit norm."""
    w = np.random.default_rng(seed).standard_normal(n)
    return w / np.linalg.norm(w)


def default_rank(correlations: np.ndarray) -> int:
    if correlations.size == 0 or correlations[0] <= 0:
        return 1
    return max(1, int(np.sum(correlations > RANK_FRACTION * correlations[0])))


def optimize_w(
    series: SeriesInput,
    kernel_y: KernelSpec,
    h: int,
    r: Optional[int] = None,
    epochs: int = 200,
    learning_rate: float = 1e-3,
    seed: int = 0,
    reference: str = "all",
) -> RealizationModel:
    """Fit observable weights with full-batch Adam and build the realization model.

    ``r=None`` optimises the sum of all ``h`` correlations and then keeps the
    correlations above 5% of the largest.
    """
    if epochs < 0:
        raise ArgumentError(f"epochs must be >= 0, got {epochs}")
    if r is not None and not 1 <= r <= h:
        raise ArgumentError(f"rank r={r} outside 1..{h}")
    items = _as_list(series)
    win = build_windows(items, h)
    Y = pooled_samples(items)
    S = select_reference(Y.shape[0], reference)
    GS = kernel_matrix(kernel_y, Y, Y[S])
    logger.info(
        f"[realization.optimize_w] {len(items)} series, N={win.N}, |S|={S.size}, "
        f"h={h}, epochs={epochs}"
    )

    w = init_weights(S.size, seed)
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    b1, b2 = ADAM_BETAS
    r_opt = r if r is not None else h
    trace = []
    flags = set()
    w_prev = w
    diverged = False
    for epoch in range(1, epochs + 1):
        loss, grad_u, step_flags = _guarded_loss(GS, w, win, r_opt)
        flags.update(step_flags)
        if not np.isfinite(loss):
            diverged = True
            break
        trace.append(loss)
        w_prev = w
        grad = GS.T @ grad_u
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        m_hat = m / (1 - b1**epoch)
        v_hat = v / (1 - b2**epoch)
        w = w - learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        if epoch % 10 == 0 or epoch == epochs:
            logger.debug(f"[realization.optimize_w] epoch {epoch} loss={loss:.6f}")

    # the iterate after the last Adam step has not been evaluated yet
    if not diverged and epochs > 0:
        diverged = not np.isfinite(_guarded_loss(GS, w, win, r_opt)[0])
    if diverged:
        flags.add("non_finite_loss")
        logger.warning(
            f"[realization.optimize_w] non-finite loss after {len(trace)} epoch(s), "
            f"keeping the last finite iterate"
        )
        w = w_prev

    cov = _features(GS @ w, win).cov
    full = whiten_and_svd(*cov, h)
    rank = r if r is not None else default_rank(full.s)
    final = whiten_and_svd(*cov, min(rank, max(full.s.size, 1)))
    flags.update(final.flags)
    if not _reconstruction_ok(cov.Cpp, final):
        flags.add("reconstruction_mismatch")
        logger.warning("[realization.optimize_w] B Cpp B^T differs from diag(s)")

    train_id = items[0].series_id if len(items) == 1 else f"{items[0].series_id}+{len(items) - 1}"
    logger.info(
        f"[realization.optimize_w] r={final.s.size}, "
        f"correlations={np.round(final.s, 4).tolist()}"
    )
    return RealizationModel(
        kernel_y=kernel_y,
        w=w,
        S=S,
        reference_samples=Y[S],
        B=final.B,
        correlations=final.s,
        h=h,
        r=final.s.size,
        train_series_id=train_id,
        loss_trace=tuple(trace),
        flags=tuple(sorted(flags)),
    )


def _reconstruction_ok(Cpp: np.ndarray, wh: Whitened) -> bool:
    if wh.s.size == 0:
        return True
    recon = wh.B @ Cpp @ wh.B.T
    return bool(np.allclose(recon, np.diag(wh.s), atol=1e-6 * max(1.0, wh.s.max())))


# ============ States ============


def extract_states(model: RealizationModel, series: TimeSeries) -> np.ndarray:
    """State samples x_n = B v_n (r x N) of one series."""
    if series.T < 2 * model.h - 1:
        raise ArgumentError(
            f"series with T={series.T} is shorter than 2h-1={2 * model.h - 1}"
        )
    u = kernel_matrix(model.kernel_y, series.data, model.reference_samples) @ model.w
    win = _windows([series.data.shape[0]], model.h)
    return model.B @ u[win.past_indices()]


def state_samples(model: RealizationModel, series: SeriesInput):
    """States, aligned observations and per-series column segments.

    State x_n is paired with observation y_{n+h-1}. Returns ``(X, Y, segments)``
    with X r x N, Y q x N and segments ``(first_column, count)``.
    """
    xs, ys, segments = [], [], []
    col = 0
    for s in _as_list(series):
        X = extract_states(model, s)
        n = X.shape[1]
        xs.append(X)
        ys.append(s.data[model.h : model.h + n].T)
        segments.append((col, n))
        col += n
    return np.hstack(xs), np.hstack(ys), tuple(segments)


class StateTransition(NamedTuple):
    A: np.ndarray
    residual: float
    flags: Tuple[str, ...] = ()


def linear_state_transition(X) -> StateTransition:
    """Least-squares A with X[:, 1:] ~ A X[:, :-1], its relative residual and flags."""
    X = np.asarray(X, dtype=float)
    r, n = X.shape
    if n < r + 1:
        raise ArgumentError(f"need N >= r+1 = {r + 1} state samples, got {n}")
    X1, X2 = X[:, :-1], X[:, 1:]
    At, _, rank, _ = linalg.lstsq(X1.T, X2.T)
    flags = ()
    if rank < r:
        flags = ("rank_deficient_states",)
        logger.warning(
            f"[realization.linear_state_transition] rank-deficient states "
            f"(rank {rank} < {r}), minimum-norm solution"
        )
    A = At.T
    denom = np.linalg.norm(X2)
    residual = np.linalg.norm(X2 - A @ X1) / denom if denom > 0 else 0.0
    return StateTransition(A, float(residual), flags)
