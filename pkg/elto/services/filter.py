"""Kernel Kalman filtering on an ELTO/EOO model.

Beliefs are weights ``m`` and a covariance weight matrix ``S`` over the N
state samples. Each step predicts, emits the preimage of the prior as the
one-step prediction, then innovates when an observation is available.
"""
import logging
from typing import List, NamedTuple, Optional, Tuple, Union

import numpy as np
from scipy import linalg
from scipy.linalg import lapack

from elto.exceptions import ArgumentError, EltoError, FilterStepError, StateMachineError
from elto.models import BeliefStage, BeliefState, EltoFilterModel, FilterOutput, TimeSeries
from elto.services.kernels import kernel_matrix
from elto.services.operators import ridge_solve

logger = logging.getLogger(__name__)

CONDITION_LIMIT = 1e14
WEIGHT_NORM_LIMIT = 1e6


class Innovation(NamedTuple):
    belief: BeliefState
    innovation_norm: float
    flags: Tuple[str, ...]


def _symmetrize(S: np.ndarray) -> np.ndarray:
    return 0.5 * (S + S.T)


def belief_from_samples(C0: np.ndarray, t: int = 0) -> BeliefState:
    """Posterior belief from sample weight columns; covariance uses 1/J."""
    J = C0.shape[1]
    m = C0.mean(axis=1)
    D = C0 - m[:, None]
    return BeliefState(m=m, S=_symmetrize(D @ D.T / J), stage=BeliefStage.POSTERIOR, t=t)


def init_belief(model: EltoFilterModel, J: Optional[int] = None, seed: int = 0) -> BeliefState:
    """Initial belief from J uniform draws on (0,1)^r embedded on the state samples."""
    J = model.N if J is None else J
    if J < 2:
        raise ArgumentError(f"J must be >= 2 to define a covariance, got {J}")
    rng = np.random.default_rng(seed)
    U = rng.uniform(0.0, 1.0, size=(J, model.r))
    K0 = kernel_matrix(model.kernel_x, model.X.T, U)
    C0 = ridge_solve(model.G_x, model.eps_o, K0)
    return belief_from_samples(C0)


def predict(model: EltoFilterModel, belief: BeliefState) -> BeliefState:
    if belief.stage != BeliefStage.POSTERIOR:
        raise StateMachineError(f"predict expects a posterior belief, got {belief.stage.value}")
    T = model.transition
    m = T @ belief.m
    S = T @ belief.S @ T.T + model.process_noise
    return BeliefState(m=m, S=_symmetrize(S), stage=BeliefStage.PRIOR, t=belief.t + 1)


def innovate_with_diagnostics(model: EltoFilterModel, belief: BeliefState, y) -> Innovation:
    """Innovation update plus the innovation norm and conditioning flags."""
    if belief.stage != BeliefStage.PRIOR:
        raise StateMachineError(f"innovate expects a prior belief, got {belief.stage.value}")
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if y.shape[0] != model.q:
        raise ArgumentError(f"observation has dimension {y.shape[0]}, expected {model.q}")
    if not np.all(np.isfinite(y)):
        raise ArgumentError("observation contains non-finite values")

    O = model.O_coord
    m, S = belief.m, belief.S
    k = kernel_matrix(model.kernel_y, model.Y_train.T, y[None, :])[:, 0]
    residual = k - model.G_y @ (O @ m)

    OS = O @ S
    GyOS = model.G_y @ OS
    Z = GyOS @ O.T + model.eps_q * np.eye(model.N)
    lu, piv = linalg.lu_factor(Z)
    rcond, _ = lapack.dgecon(lu, np.linalg.norm(Z, 1), norm="1")
    flags = []
    if rcond == 0 or 1.0 / rcond > CONDITION_LIMIT:
        flags.append("ill_conditioned_innovation")
        logger.warning(
            f"[filter.innovate] t={belief.t} innovation condition "
            f"{(1.0 / rcond if rcond else float('inf')):.3g} exceeds {CONDITION_LIMIT:g}"
        )
    # gain Q = S O^T Z^{-1}, obtained as (Z^{-T} O S)^T
    Q = linalg.lu_solve((lu, piv), OS, trans=1).T
    m_post = m + Q @ residual
    S_post = _symmetrize(S - Q @ GyOS)
    posterior = BeliefState(m=m_post, S=S_post, stage=BeliefStage.POSTERIOR, t=belief.t)
    return Innovation(posterior, float(np.linalg.norm(residual)), tuple(flags))


def innovate(model: EltoFilterModel, belief: BeliefState, y) -> BeliefState:
    return innovate_with_diagnostics(model, belief, y).belief


def preimage(model: EltoFilterModel, belief: BeliefState, t: Optional[int] = None) -> FilterOutput:
    D = model.decoder
    eta = D @ belief.m
    Sigma = _symmetrize(D @ belief.S @ D.T)
    return FilterOutput(t=belief.t if t is None else t, eta=eta, Sigma=Sigma)


def run_filter(
    model: EltoFilterModel,
    observations: Union[TimeSeries, np.ndarray],
    missing_mask=None,
    J: Optional[int] = None,
    seed: int = 0,
    initial: Optional[BeliefState] = None,
) -> List[FilterOutput]:
    """Filter a sequence and return the one-step prediction for every time index.

    ``missing_mask[t]`` True skips the innovation at t. Output t is the
    preimage of the prior at t, with that step's innovation diagnostics.
    """
    Y = observations.data if isinstance(observations, TimeSeries) else np.asarray(observations, dtype=float)
    if Y.size == 0:
        return []
    if Y.ndim == 1:
        Y = Y.reshape(-1, 1)
    if Y.shape[1] != model.q:
        raise ArgumentError(f"observations have dimension {Y.shape[1]}, expected {model.q}")
    mask = np.zeros(Y.shape[0], dtype=bool) if missing_mask is None else np.asarray(missing_mask, dtype=bool)
    if mask.shape[0] != Y.shape[0]:
        raise ArgumentError(f"mask has length {mask.shape[0]}, expected {Y.shape[0]}")

    belief = initial if initial is not None else init_belief(model, J, seed)
    outputs = []
    warned = False
    for t in range(Y.shape[0]):
        try:
            prior = predict(model, belief)
            output = preimage(model, prior, t)
            if mask[t]:
                belief = prior.model_copy(update={"stage": BeliefStage.POSTERIOR})
            else:
                step = innovate_with_diagnostics(model, prior, Y[t])
                belief = step.belief
                output = output.model_copy(
                    update={"innovation_norm": step.innovation_norm, "flags": step.flags}
                )
        except FilterStepError:
            raise
        except (EltoError, ValueError, linalg.LinAlgError) as e:
            raise FilterStepError(t, e) from e
        if not warned and np.linalg.norm(belief.m) >= WEIGHT_NORM_LIMIT:
            warned = True
            logger.warning(f"[filter.run_filter] weight norm exceeds {WEIGHT_NORM_LIMIT:g} at t={t}")
            output = output.model_copy(update={"flags": output.flags + ("weight_norm_exceeded",)})
        outputs.append(output)
    return outputs


def predictions(outputs: List[FilterOutput]) -> np.ndarray:
    """Stack the predicted means into a T x q array."""
    if not outputs:
        return np.empty((0, 0))
    return np.vstack([o.eta for o in outputs])


# ============ Classical baselines ============


class LinearGaussian(NamedTuple):
    """Scalar model x' = a x + N(0, q), y = h x + N(0, R)."""

    a: float
    q: float
    h: float
    R: float


def equivalent_linear_gaussian(model: EltoFilterModel) -> LinearGaussian:
    """Scalar Kalman model the kernel filter reduces to with Linear kernels and r = q = 1."""
    if model.r != 1 or model.q != 1:
        raise ArgumentError("the scalar reduction needs 1-D states and observations")
    x = model.X[0]
    y = model.Y_train[0]
    xa = x[model.pre_index]
    xb = x[model.post_index]
    a = float(xb @ xa / (xa @ xa + model.eps_t))
    q = float(np.sum((a * xa - xb) ** 2) / model.N)
    h = float(y @ x / (x @ x + model.eps_o))
    return LinearGaussian(a=a, q=q, h=h, R=model.eps_q)


def kalman_filter(params: LinearGaussian, ys, z0: float, s0: float, missing_mask=None):
    """Scalar Kalman filter with the predict-then-innovate loop of run_filter.

    Returns ``(prior_predictions, posterior_means)``; the first is h times the
    prior state mean at each step.
    """
    ys = np.asarray(ys, dtype=float).ravel()
    mask = np.zeros(ys.size, dtype=bool) if missing_mask is None else np.asarray(missing_mask, dtype=bool)
    a, q, h, R = params
    z, s = z0, s0
    prior_pred = np.empty(ys.size)
    post_mean = np.empty(ys.size)
    for t, y in enumerate(ys):
        z, s = a * z, a * a * s + q
        prior_pred[t] = h * z
        if not mask[t]:
            gain = s * h / (h * h * s + R)
            z = z + gain * (y - h * z)
            s = (1.0 - gain * h) * s
        post_mean[t] = z
    return prior_pred, post_mean


def locf_predictions(Y) -> np.ndarray:
    """Last observation carried forward: y_{t-1} predicts y_t (y_0 predicts itself)."""
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y.reshape(-1, 1)
    return np.vstack([Y[:1], Y[:-1]])
