import logging

import numpy as np
from scipy.spatial.distance import cdist

from elto.exceptions import ArgumentError
from elto.models import GramMatrix, KernelKind, KernelSpec

logger = logging.getLogger(__name__)

# Relative slack for the PSD check, scaled by the spectral norm
PSD_TOLERANCE = 1e-10
SYMMETRY_TOLERANCE = 1e-12


def as_samples(points) -> np.ndarray:
    """Coerce a sample set to a 2-D float array, one sample per row.

    A 1-D input is read as scalar samples.
    """
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ArgumentError(f"samples must be 1-D or 2-D, got {arr.ndim}-D")
    return arr


def eval_kernel(spec: KernelSpec, a, b) -> float:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ArgumentError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    if spec.kind == KernelKind.LINEAR:
        return float(a @ b)
    diff = a - b
    return float(np.exp(-spec.bandwidth * (diff @ diff)))


def kernel_matrix(spec: KernelSpec, rows, cols) -> np.ndarray:
    """Raw kernel matrix k(rows[i], cols[j]) as a plain ndarray."""
    rows = as_samples(rows)
    cols = as_samples(cols)
    if rows.shape[0] == 0 or cols.shape[0] == 0:
        raise ArgumentError("gram needs non-empty sample sets")
    if rows.shape[1] != cols.shape[1]:
        raise ArgumentError(
            f"feature dimension mismatch: {rows.shape[1]} vs {cols.shape[1]}"
        )
    if spec.kind == KernelKind.LINEAR:
        return rows @ cols.T
    sq = cdist(rows, cols, metric="sqeuclidean")
    return np.exp(-spec.bandwidth * sq)


def gram(
    spec: KernelSpec, rows, cols=None, row_source="rows", col_source=None
) -> GramMatrix:
    """Gram or cross-Gram matrix; ``cols=None`` gives the self-Gram of ``rows``."""
    same = cols is None
    values = kernel_matrix(spec, rows, rows if same else cols)
    if same:
        # exact symmetry for the self-Gram
        values = 0.5 * (values + values.T)
        col_source = row_source
    return GramMatrix(
        values=values, row_source=row_source, col_source=col_source or "cols"
    )


def is_psd(values: np.ndarray) -> bool:
    """Symmetric to 1e-12 and no eigenvalue below -1e-10 * spectral norm."""
    values = np.asarray(values, dtype=float)
    if values.shape[0] != values.shape[1]:
        return False
    if not np.allclose(values, values.T, atol=SYMMETRY_TOLERANCE, rtol=0):
        return False
    eigvals = np.linalg.eigvalsh(values)
    scale = max(np.abs(eigvals).max(), 0.0) if eigvals.size else 0.0
    return bool(eigvals.min() >= -PSD_TOLERANCE * scale)


def centering_matrix(n: int) -> np.ndarray:
    """Q = I - (1/n) 11^T."""
    if n < 1:
        raise ArgumentError(f"centering_matrix needs n >= 1, got {n}")
    return np.eye(n) - np.full((n, n), 1.0 / n)


def median_heuristic(points) -> float:
    """gamma = 1 / median(squared pairwise distance); 1.0 for degenerate sets."""
    pts = as_samples(points)
    if pts.shape[0] < 2:
        return 1.0
    sq = cdist(pts, pts, metric="sqeuclidean")
    med = float(np.median(sq[np.triu_indices_from(sq, k=1)]))
    if med <= 0:
        logger.warning("[kernels.median_heuristic] all samples coincide, gamma=1")
        return 1.0
    return 1.0 / med


def default_state_kernel(r: int) -> KernelSpec:
    """RBF with gamma = 1 / number of features."""
    return KernelSpec.rbf(1.0 / max(r, 1))
