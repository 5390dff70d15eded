from typing import Sequence

import numpy as np

from elto.exceptions import ArgumentError
from elto.models import Aggregate


def mse(pred, truth) -> float:
    """Mean over all entries of the squared difference."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ArgumentError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise ArgumentError("mse of empty arrays")
    return float(np.mean((pred - truth) ** 2))


def aggregate(values: Sequence[float]) -> Aggregate:
    """Mean and population standard deviation of the finite values."""
    arr = np.asarray([v for v in values if np.isfinite(v)], dtype=float)
    if arr.size == 0:
        return Aggregate(mean=float("nan"), std=float("nan"), n=0)
    return Aggregate(mean=float(arr.mean()), std=float(arr.std()), n=int(arr.size))
