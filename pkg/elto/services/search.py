"""Hyperparameter search: exhaustive grid and CMA-ES."""
import itertools
import logging
import math
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import cma
import numpy as np

from elto.exceptions import ArgumentError
from elto.models import SearchPoint

logger = logging.getLogger(__name__)

# value handed to CMA-ES in place of a non-finite objective
CMA_PENALTY = 1e300


def _safe_call(objective: Callable, arg) -> float:
    try:
        value = float(objective(arg))
    except Exception as e:
        logger.warning(f"[search] objective failed at {arg}: {e}")
        return math.inf
    return value if math.isfinite(value) else math.inf


def grid_search(
    objective: Callable[[Dict[str, float]], float], grid: Dict[str, Sequence[float]]
) -> Tuple[Dict[str, float], List[SearchPoint]]:
    """Evaluate every grid point; ties keep the first point seen."""
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ArgumentError("grid must have at least one value per axis")
    names = list(grid)
    best: Optional[Dict[str, float]] = None
    best_score = math.inf
    trace = []
    for values in itertools.product(*(grid[n] for n in names)):
        params = {n: float(v) for n, v in zip(names, values)}
        score = _safe_call(objective, params)
        trace.append(SearchPoint(params=params, score=score))
        if best is None or score < best_score:
            best, best_score = params, score
    logger.info(f"[search.grid_search] {len(trace)} points, best={best} score={best_score:.6g}")
    return best, trace


def default_popsize(dim: int) -> int:
    return 4 + int(math.floor(3 * math.log(dim)))


def cma_es(
    objective: Callable[[np.ndarray], float],
    x0: Sequence[float],
    sigma0: float,
    budget: int,
    seed: int = 0,
    log_space: bool = False,
    names: Optional[Sequence[str]] = None,
) -> Tuple[Dict[str, float], List[SearchPoint]]:
    """CMA-ES minimisation within ``budget`` evaluations.

    With ``log_space`` the search runs over log10 of positive parameters and
    ``x0`` is given in natural units. The trace holds the best-ever candidate
    after each generation.
    """
    x0 = np.asarray(x0, dtype=float).ravel()
    dim = x0.size
    if dim < 1:
        raise ArgumentError("x0 must have at least one coordinate")
    if sigma0 <= 0:
        raise ArgumentError(f"sigma0 must be > 0, got {sigma0}")
    popsize = default_popsize(dim)
    if budget < popsize:
        raise ArgumentError(f"budget {budget} is below the population size {popsize}")
    if log_space:
        if np.any(x0 <= 0):
            raise ArgumentError("log-space search needs positive x0")
        x0 = np.log10(x0)
    names = list(names) if names is not None else [f"x{i}" for i in range(dim)]

    # the library needs at least two coordinates; a 1-D problem gets an inert one
    start = np.append(x0, 0.0) if dim == 1 else x0
    options = {
        "seed": seed % (2**32 - 1) + 1,
        "popsize": popsize,
        "maxfevals": budget,
        "verbose": -9,
    }
    es = cma.CMAEvolutionStrategy(start.tolist(), sigma0, options)

    def to_params(z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)[:dim]
        return 10.0**z if log_space else z

    best_x: Optional[np.ndarray] = None
    best_score = math.inf
    trace = []
    evals = 0
    while not es.stop() and evals + popsize <= budget:
        candidates = es.ask()
        scores = [_safe_call(objective, to_params(z)) for z in candidates]
        evals += len(candidates)
        es.tell(candidates, [s if math.isfinite(s) else CMA_PENALTY for s in scores])
        i = int(np.argmin(scores))
        if best_x is None or scores[i] < best_score:
            best_x, best_score = to_params(candidates[i]), scores[i]
        trace.append(
            SearchPoint(params=dict(zip(names, map(float, best_x))), score=best_score)
        )
        logger.debug(f"[search.cma_es] evals={evals} best={best_score:.6g}")

    best = dict(zip(names, map(float, best_x)))
    logger.info(f"[search.cma_es] {evals} evaluations, best={best} score={best_score:.6g}")
    return best, trace
