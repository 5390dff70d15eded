import math
import re
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


def frozen_array(value, dtype=float) -> np.ndarray:
    """Copy ``value`` into a read-only numpy array."""
    arr = np.array(value, dtype=dtype)
    arr.setflags(write=False)
    return arr


class ArrayModel(BaseModel):
    """Immutable record holding numpy arrays."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)


# ============ Kernel Models ============


class KernelKind(str, Enum):
    RBF = "rbf"
    LINEAR = "linear"


class KernelSpec(BaseModel):
    """k(a, b) = exp(-bandwidth * |a - b|^2) for RBF, a.b for Linear."""

    model_config = ConfigDict(frozen=True)

    kind: KernelKind = KernelKind.RBF
    bandwidth: float = 1.0  # gamma, ignored by the linear kernel

    @model_validator(mode="after")
    def _check_bandwidth(self):
        if self.kind == KernelKind.RBF and not (
            math.isfinite(self.bandwidth) and self.bandwidth > 0
        ):
            raise ValueError(f"RBF bandwidth must be > 0, got {self.bandwidth}")
        return self

    @classmethod
    def rbf(cls, gamma: float) -> "KernelSpec":
        return cls(kind=KernelKind.RBF, bandwidth=gamma)

    @classmethod
    def linear(cls) -> "KernelSpec":
        return cls(kind=KernelKind.LINEAR)


class GramMatrix(ArrayModel):
    values: np.ndarray
    row_source: str = "rows"
    col_source: str = "cols"

    @field_validator("values", mode="before")
    @classmethod
    def _to_array(cls, v):
        return frozen_array(np.atleast_2d(v))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


# ============ Systems Models ============


class TimeSeries(ArrayModel):
    """Uniformly sampled observations; row t is y_t."""

    data: np.ndarray
    dt: float = Field(gt=0)
    seed: Optional[int] = None
    system_tag: str = "unknown"
    noise_meta: Dict[str, float] = Field(default_factory=dict)
    latent: Optional[np.ndarray] = None  # noise-free state, same rows as data

    @field_validator("data", mode="before")
    @classmethod
    def _check_data(cls, v):
        arr = np.array(v, dtype=float)
        if arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        if arr.ndim != 2 or arr.shape[0] == 0:
            raise ValueError("time series data must be a non-empty 2-D array")
        if not np.all(np.isfinite(arr)):
            raise ValueError("time series contains non-finite values")
        return frozen_array(arr)

    @field_validator("latent", mode="before")
    @classmethod
    def _check_latent(cls, v):
        if v is None:
            return None
        arr = np.array(v)
        if arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        return frozen_array(arr, dtype=arr.dtype)

    @property
    def T(self) -> int:
        """Index of the last sample."""
        return self.data.shape[0] - 1

    @property
    def q(self) -> int:
        return self.data.shape[1]

    @property
    def series_id(self) -> str:
        return f"{self.system_tag}:{self.seed}"


class PendulumConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    g: float = Field(default=9.81, gt=0)
    L: float = Field(default=1.0, gt=0)
    sim_hz: int = Field(default=10_000, gt=0)
    obs_hz: int = Field(default=10, gt=0)
    n_p: float = Field(default=0.1, ge=0)
    n_o: float = Field(default=0.01, ge=0)  # standard deviation of the angle noise
    length: int = Field(default=30, gt=0)  # observations per trajectory
    per_step_noise: bool = False
    q0_range: Tuple[float, float] = (0.1 * math.pi, 0.4 * math.pi)
    qd0_range: Tuple[float, float] = (-0.25 * math.pi, 0.25 * math.pi)
    initial_state: Optional[Tuple[float, float]] = None


class VdpConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mu: float = 2.0
    dt: float = Field(default=0.1, gt=0)
    x0: Tuple[float, float] = (2.0, 0.0)
    obs_noise_std: float = Field(default=0.0, ge=0)
    length: int = Field(default=3000, gt=0)
    burn_in: int = Field(default=0, ge=0)


class SlConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mu: float = 1.0
    gamma: float = 0.9
    beta: float = 0.3
    eps_process: float = Field(default=0.0, ge=0)
    dt: float = Field(default=0.1, gt=0)
    r0: float = 0.1
    theta0: float = 0.0
    obs_noise_var: float = Field(default=0.0, ge=0)
    length: int = Field(default=3000, gt=0)
    burn_in: int = Field(default=0, ge=0)


class SimConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    pendulum: PendulumConfig = Field(default_factory=PendulumConfig)
    vdp: VdpConfig = Field(default_factory=VdpConfig)
    sl: SlConfig = Field(default_factory=SlConfig)


# ============ Realization Models ============


class WindowedData(BaseModel):
    """Past/future window bookkeeping over one or several sequences.

    ``segments`` holds ``(start, T_s)`` for each sequence in the pooled sample
    array; a single series is ``((0, T),)``.
    """

    model_config = ConfigDict(frozen=True)

    T: int
    h: int
    N: int
    past_offsets: Tuple[int, ...]
    future_offsets: Tuple[int, ...]
    segments: Tuple[Tuple[int, int], ...]

    def _indices(self, offsets: Tuple[int, ...]) -> np.ndarray:
        blocks = []
        for start, t_s in self.segments:
            n_s = t_s + 2 - 2 * self.h
            k = np.arange(n_s)
            blocks.append(start + 1 + np.asarray(offsets)[:, None] + k[None, :])
        return np.concatenate(blocks, axis=1)

    def past_indices(self) -> np.ndarray:
        """(h, N) sample indices; row i-1 holds lag i (row 0 is the newest)."""
        return self._indices(self.past_offsets)

    def future_indices(self) -> np.ndarray:
        """(h, N) sample indices; row j-1 holds the j-th future sample."""
        return self._indices(self.future_offsets)


class RealizationModel(ArrayModel):
    kernel_y: KernelSpec
    w: np.ndarray
    S: np.ndarray
    reference_samples: np.ndarray  # y_e for e in S, one row each
    B: np.ndarray
    correlations: np.ndarray
    h: int
    r: int
    train_series_id: str
    loss_trace: Tuple[float, ...] = ()
    flags: Tuple[str, ...] = ()

    @field_validator("w", "B", "correlations", "reference_samples", mode="before")
    @classmethod
    def _float_array(cls, v):
        return frozen_array(v)

    @field_validator("S", mode="before")
    @classmethod
    def _index_array(cls, v):
        return frozen_array(v, dtype=np.int64)

    @model_validator(mode="after")
    def _check(self):
        if self.r > self.h:
            raise ValueError(f"rank r={self.r} exceeds window size h={self.h}")
        if self.B.shape != (self.r, self.h):
            raise ValueError(f"B must be {self.r}x{self.h}, got {self.B.shape}")
        c = self.correlations
        if np.any(np.diff(c) > 1e-12) or np.any(c < -1e-12) or np.any(c > 1 + 1e-6):
            raise ValueError("canonical correlations must be descending in [0, 1]")
        if self.w.shape[0] != self.S.shape[0]:
            raise ValueError("w and S must have the same length")
        return self


# ============ Operator / Filter Models ============


class EltoFilterModel(ArrayModel):
    """Finite-coordinate ELTO/EOO estimate.

    Transition pairs are ``(pre_index[p], post_index[p])``; for one chain
    they are ``(n, n + 1)``. ``transition`` and ``process_noise`` are the
    prediction matrices re-indexed onto all N state samples.
    """

    X: np.ndarray
    Y_train: np.ndarray
    kernel_x: KernelSpec
    kernel_y: KernelSpec
    G_x: np.ndarray
    G1: np.ndarray
    G12: np.ndarray
    G_y: np.ndarray
    T_coord: np.ndarray
    O_coord: np.ndarray
    eps_t: float = Field(gt=0)
    eps_o: float = Field(gt=0)
    eps_q: float = Field(gt=0)
    pre_index: np.ndarray
    post_index: np.ndarray
    transition: np.ndarray
    process_noise: np.ndarray
    decoder: np.ndarray  # Y_train (G_x + eps_o I)^-1 G_x

    @property
    def N(self) -> int:
        return self.X.shape[1]

    @property
    def r(self) -> int:
        return self.X.shape[0]

    @property
    def q(self) -> int:
        return self.Y_train.shape[0]


class BeliefStage(str, Enum):
    PRIOR = "prior"
    POSTERIOR = "posterior"


class BeliefState(ArrayModel):
    m: np.ndarray
    S: np.ndarray
    stage: BeliefStage
    t: int = 0

    @field_validator("m", "S", mode="before")
    @classmethod
    def _finite(cls, v):
        arr = np.array(v, dtype=float)
        if not np.all(np.isfinite(arr)):
            raise ValueError("belief state contains non-finite entries")
        return frozen_array(arr)


class FilterOutput(ArrayModel):
    t: int
    eta: np.ndarray
    Sigma: np.ndarray
    innovation_norm: Optional[float] = None
    flags: Tuple[str, ...] = ()

    @field_validator("eta", "Sigma", mode="before")
    @classmethod
    def _float_array(cls, v):
        return frozen_array(v)


# ============ Mode Decomposition Models ============


class ModeMethod(str, Enum):
    ELTO = "elto"
    DMD = "dmd"
    HANKEL_DMD = "hankel_dmd"
    EDMD = "edmd"
    SUBSPACE_DMD = "subspace_dmd"


class ModeDecomposition(ArrayModel):
    eigvals_discrete: np.ndarray
    eigvals_continuous: np.ndarray
    eigfun_coeffs: np.ndarray  # one column per eigenvalue
    eigfun_values: np.ndarray  # row t: eigenfunctions evaluated at sample t
    modes: np.ndarray  # q x k
    dt: float = Field(gt=0)
    method: ModeMethod
    flags: Tuple[str, ...] = ()

    @field_validator(
        "eigvals_discrete",
        "eigvals_continuous",
        "eigfun_coeffs",
        "eigfun_values",
        "modes",
        mode="before",
    )
    @classmethod
    def _complex_array(cls, v):
        return frozen_array(v, dtype=complex)


# ============ Bench Models ============


class ExperimentKind(str, Enum):
    PENDULUM_FILTER = "pendulum_filter"
    VDP_MODES = "vdp_modes"
    SL_MODES = "sl_modes"
    CSV_FILTER = "csv_filter"
    PENDULUM_ABLATION = "pendulum_ablation"


_REFERENCE_POLICY = re.compile(r"^(all|last:\d+|stride:\d+)$")


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    h: int = Field(default=5, gt=2)
    rank: Optional[int] = Field(default=None, ge=1)
    kernel_y: KernelSpec = Field(default_factory=lambda: KernelSpec.rbf(1.0))
    kernel_x: Optional[KernelSpec] = None  # None: RBF with gamma = 1/r
    eps_t: Optional[float] = Field(default=None, gt=0)
    eps_o: Optional[float] = Field(default=None, gt=0)
    eps_q: Optional[float] = Field(default=None, gt=0)
    epochs: int = Field(default=200, ge=0)
    learning_rate: float = Field(default=1e-3, ge=0)
    reference: str = "all"
    init_samples: Optional[int] = Field(default=None, ge=2)
    warmup: int = Field(default=5, ge=0)
    model_trajectories: int = Field(default=20, ge=1)
    operator_samples: int = Field(default=600, ge=3)  # cap on states for single-series models
    koopman_eps: Optional[float] = Field(default=None, gt=0)
    harmonics: int = Field(default=4, ge=1)
    retention: Tuple[float, float] = (0.2, 1.1)
    delay: int = Field(default=30, ge=1)

    @field_validator("reference")
    @classmethod
    def _check_reference(cls, v):
        if not _REFERENCE_POLICY.match(v):
            raise ValueError("reference must be 'all', 'last:<k>' or 'stride:<k>'")
        return v


class SearchMethod(str, Enum):
    GRID = "grid"
    CMAES = "cmaes"
    NONE = "none"


class SearchConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    method: SearchMethod = SearchMethod.NONE
    budget: int = Field(default=24, ge=1)
    seed: int = 0
    sigma0: float = Field(default=0.5, gt=0)
    # log10 of (eps_t, eps_o, eps_q): CMA-ES start point / grid axes
    x0: Tuple[float, float, float] = (-3.0, -3.0, -2.0)
    grid: Dict[str, List[float]] = Field(default_factory=dict)
    validation_trajectories: int = Field(default=10, ge=1)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "experiment"
    kind: ExperimentKind = ExperimentKind.PENDULUM_FILTER
    system: SimConfig = Field(default_factory=SimConfig)
    input_path: Optional[Path] = None
    input_dt: float = Field(default=1.0, gt=0)
    has_header: bool = True
    center: bool = False
    model: ModelConfig = Field(default_factory=ModelConfig)
    search: SearchConfig = Field(default_factory=SearchConfig)
    trials: int = Field(default=1, ge=1)
    seed: int = Field(default=0, ge=0)
    n_train: int = Field(default=300, ge=1)
    n_val: int = Field(default=100, ge=1)
    methods: List[str] = Field(default_factory=lambda: ["elto"])
    noise_values: List[float] = Field(default_factory=list)
    epochs_grid: List[int] = Field(default_factory=lambda: [200, 500])
    window_grid: List[int] = Field(default_factory=lambda: [5, 8])
    output: Optional[Path] = None

    @model_validator(mode="after")
    def _check_input(self):
        if self.kind == ExperimentKind.CSV_FILTER and self.input_path is None:
            raise ValueError("csv_filter experiments need input_path")
        return self


class Aggregate(BaseModel):
    mean: float
    std: float
    n: int


class TrialResult(BaseModel):
    trial: int
    seed: int
    # method -> metric -> value
    metrics: Dict[str, Dict[str, float]] = Field(default_factory=dict)
    failure: Optional[str] = None


class SearchPoint(BaseModel):
    params: Dict[str, float]
    score: float


class ResultRecord(BaseModel):
    experiment: str
    kind: ExperimentKind
    config: dict
    noise: Optional[float] = None
    trials: List[TrialResult] = Field(default_factory=list)
    aggregate: Dict[str, Dict[str, Aggregate]] = Field(default_factory=dict)
    wall_clock_seconds: float = 0.0
    search_trace: List[SearchPoint] = Field(default_factory=list)

    @property
    def failed(self) -> bool:
        return any(t.failure for t in self.trials)
