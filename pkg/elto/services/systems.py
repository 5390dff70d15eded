"""Seeded simulators for the benchmark systems, eigenvalue oracles and CSV ingestion."""
import logging
import math
import re
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd

from elto.exceptions import ArgumentError, CsvParseError
from elto.models import PendulumConfig, SlConfig, TimeSeries, VdpConfig

logger = logging.getLogger(__name__)

# Fundamental angular frequency of the mu=2 VDP limit cycle, dt=0.1
VDP_OMEGA = 0.823498
VDP_DT = 0.1
SL_OMEGA = 0.6
SL_KAPPA = 3.0
# Complex-exponential dictionary orders, e^{-i m theta} for m = -10..10
SL_DICTIONARY_ORDER = 10


# ============ Pendulum ============


def _pendulum_stride(cfg: PendulumConfig) -> int:
    if cfg.obs_hz > cfg.sim_hz:
        raise ArgumentError(
            f"obs_hz ({cfg.obs_hz}) must not exceed sim_hz ({cfg.sim_hz})"
        )
    if cfg.sim_hz % cfg.obs_hz:
        raise ArgumentError(
            f"sim_hz ({cfg.sim_hz}) must be a multiple of obs_hz ({cfg.obs_hz})"
        )
    return cfg.sim_hz // cfg.obs_hz


def simulate_pendulum_batch(
    cfg: PendulumConfig, n_trajectories: int, seed: int
) -> List[TimeSeries]:
    """Simulate ``n_trajectories`` independent pendulums in one vectorised pass.

    Semi-implicit Euler at ``sim_hz`` with Gaussian velocity noise; angles are
    recorded every ``sim_hz/obs_hz`` steps and corrupted with N(0, n_o^2).
    """
    if n_trajectories < 1:
        raise ArgumentError(f"n_trajectories must be >= 1, got {n_trajectories}")
    stride = _pendulum_stride(cfg)
    rng = np.random.default_rng(seed)
    dt = 1.0 / cfg.sim_hz
    noise_std = cfg.n_p if cfg.per_step_noise else cfg.n_p * math.sqrt(dt)

    if cfg.initial_state is not None:
        q = np.full(n_trajectories, float(cfg.initial_state[0]))
        qd = np.full(n_trajectories, float(cfg.initial_state[1]))
    else:
        q = rng.uniform(*cfg.q0_range, size=n_trajectories)
        qd = rng.uniform(*cfg.qd0_range, size=n_trajectories)

    omega2 = cfg.g / cfg.L
    states = np.empty((cfg.length, n_trajectories, 2))
    states[0, :, 0] = q
    states[0, :, 1] = qd
    for k in range(1, cfg.length):
        for _ in range(stride):
            qd = qd - dt * omega2 * np.sin(q)
            if noise_std > 0:
                qd = qd + noise_std * rng.standard_normal(n_trajectories)
            q = q + dt * qd
        states[k, :, 0] = q
        states[k, :, 1] = qd

    angles = states[:, :, 0]
    if cfg.n_o > 0:
        angles = angles + cfg.n_o * rng.standard_normal(angles.shape)

    meta = {"n_p": cfg.n_p, "n_o": cfg.n_o}
    return [
        TimeSeries(
            data=angles[:, i],
            dt=1.0 / cfg.obs_hz,
            seed=seed,
            system_tag=f"pendulum#{i}",
            noise_meta=meta,
            latent=states[:, i, :],
        )
        for i in range(n_trajectories)
    ]


def simulate_pendulum(cfg: PendulumConfig, seed: int) -> TimeSeries:
    series = simulate_pendulum_batch(cfg, 1, seed)[0]
    return series.model_copy(update={"system_tag": "pendulum"})


# ============ Van der Pol ============


def _rk4_step(f, x, dt):
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def vdp_drift(mu: float):
    def f(s):
        x, y = s
        return np.array([y, mu * (1.0 - x * x) * y - x])

    return f


def simulate_vdp(cfg: VdpConfig, seed: int) -> TimeSeries:
    """RK4 Van der Pol run; both coordinates observed with i.i.d. Gaussian noise."""
    rng = np.random.default_rng(seed)
    f = vdp_drift(cfg.mu)
    s = np.array(cfg.x0, dtype=float)
    for _ in range(cfg.burn_in):
        s = _rk4_step(f, s, cfg.dt)

    clean = np.empty((cfg.length, 2))
    clean[0] = s
    for k in range(1, cfg.length):
        s = _rk4_step(f, s, cfg.dt)
        clean[k] = s

    data = clean
    if cfg.obs_noise_std > 0:
        data = clean + cfg.obs_noise_std * rng.standard_normal(clean.shape)
    return TimeSeries(
        data=data,
        dt=cfg.dt,
        seed=seed,
        system_tag="vdp",
        noise_meta={"obs_noise_std": cfg.obs_noise_std},
        latent=clean,
    )


# ============ Stuart-Landau ============


def sl_drift(mu: float, gamma: float, beta: float):
    def f(z):
        return (mu + 1j * gamma) * z - (1 + 1j * beta) * (abs(z) ** 2) * z

    return f


def simulate_sl(cfg: SlConfig, seed: int) -> TimeSeries:
    """Stuart-Landau run: RK4 drift plus Euler-Maruyama noise sqrt(eps*dt) per coordinate.

    ``data`` is (cos theta, sin theta) with observation noise of variance
    ``obs_noise_var``; ``latent`` keeps the complex state z.
    """
    rng = np.random.default_rng(seed)
    f = sl_drift(cfg.mu, cfg.gamma, cfg.beta)
    diffusion = math.sqrt(cfg.eps_process * cfg.dt)
    z = cfg.r0 * complex(math.cos(cfg.theta0), math.sin(cfg.theta0))

    def step(z):
        z = _rk4_step(f, z, cfg.dt)
        if diffusion > 0:
            z = z + diffusion * complex(rng.standard_normal(), rng.standard_normal())
        return z

    for _ in range(cfg.burn_in):
        z = step(z)

    states = np.empty(cfg.length, dtype=complex)
    states[0] = z
    for k in range(1, cfg.length):
        z = step(z)
        states[k] = z

    theta = np.unwrap(np.angle(states))
    data = np.column_stack([np.cos(theta), np.sin(theta)])
    if cfg.obs_noise_var > 0:
        data = data + math.sqrt(cfg.obs_noise_var) * rng.standard_normal(data.shape)
    return TimeSeries(
        data=data,
        dt=cfg.dt,
        seed=seed,
        system_tag="sl",
        noise_meta={"eps_process": cfg.eps_process, "obs_noise_var": cfg.obs_noise_var},
        latent=states,
    )


def sl_angles(series: TimeSeries) -> np.ndarray:
    """Unwrapped angle of the observed (cos, sin) pair."""
    return np.unwrap(np.arctan2(series.data[:, 1], series.data[:, 0]))


def exponential_dictionary(order: int = SL_DICTIONARY_ORDER):
    """Dictionary theta -> (e^{-i m theta}) for m = -order..order.

    Accepts either raw angles or (cos, sin) rows.
    """
    ms = np.arange(-order, order + 1)

    def g(Y):
        Y = np.asarray(Y, dtype=float)
        if Y.ndim == 2 and Y.shape[1] == 2:
            theta = np.arctan2(Y[:, 1], Y[:, 0])
        else:
            theta = Y.reshape(-1)
        return np.exp(-1j * np.outer(theta, ms))

    return g


def sl_dictionary_observation(series: TimeSeries, order: int = SL_DICTIONARY_ORDER):
    """(T+1) x (2*order+1) complex features of the observed angle."""
    return exponential_dictionary(order)(series.data)


# ============ Eigenvalue oracles ============


def true_eigs_vdp(M: int, omega: float = VDP_OMEGA, dt: float = VDP_DT) -> np.ndarray:
    if M < 1:
        raise ArgumentError(f"M must be >= 1, got {M}")
    out = []
    for m in range(1, M + 1):
        lam = np.exp(1j * m * omega * dt)
        out.extend([lam, np.conj(lam)])
    return np.array(out)


def true_eigs_sl(
    M: int, eps: float, omega: float = SL_OMEGA, kappa: float = SL_KAPPA
) -> np.ndarray:
    """s_m = i m omega - (eps/2) kappa m^2 omega^2 and conjugates, continuous domain."""
    if M < 1:
        raise ArgumentError(f"M must be >= 1, got {M}")
    if eps < 0:
        raise ArgumentError(f"eps must be >= 0, got {eps}")
    out = []
    for m in range(1, M + 1):
        s = complex(-(eps / 2.0) * kappa * m * m * omega * omega, m * omega)
        out.extend([s, s.conjugate()])
    return np.array(out)


def measure_angular_frequency(signal, dt: float) -> float:
    """Angular frequency from upward zero crossings of the mean-removed signal.

    Crossing times are linearly interpolated; the period is the span between
    the first and last crossing divided by the number of cycles.
    """
    x = np.asarray(signal, dtype=float).ravel()
    x = x - x.mean()
    idx = np.flatnonzero((x[:-1] < 0) & (x[1:] >= 0))
    if idx.size < 2:
        raise ArgumentError("signal has fewer than two upward zero crossings")
    frac = -x[idx] / (x[idx + 1] - x[idx])
    times = (idx + frac) * dt
    period = (times[-1] - times[0]) / (times.size - 1)
    return 2.0 * math.pi / period


# ============ CSV ingestion ============

_LINE_IN_MESSAGE = re.compile(r"line (\d+)")


def _leading_comment_lines(path: Path) -> int:
    count = 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#"):
                count += 1
            else:
                break
    return count


def _data_line_numbers(path: Path, skip: int, has_header: bool) -> list:
    """1-based file line of each data row, blank lines excluded as pandas does."""
    numbers = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if lineno > skip and line.strip():
                numbers.append(lineno)
    return numbers[1:] if has_header else numbers


def _comment_metadata(path: Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    if not first.startswith("#"):
        return {}
    return dict(re.findall(r"(\w+)=(\S+)", first))


def load_csv(
    path,
    dt: float = 1.0,
    has_header: bool = True,
    center: bool = False,
    system_tag: Optional[str] = None,
) -> TimeSeries:
    """Read a comma-separated numeric table as a time series.

    Leading ``#`` lines are skipped; raises CsvParseError carrying the
    1-based line number of the first ragged row or non-numeric cell.
    """
    path = Path(path)
    if not path.exists():
        raise ArgumentError(f"CSV file not found: {path}")
    skip = _leading_comment_lines(path)
    try:
        frame = pd.read_csv(
            path,
            skiprows=skip,
            header=0 if has_header else None,
            dtype=str,
            keep_default_na=False,
            skip_blank_lines=True,
            encoding="utf-8",
        )
    except pd.errors.ParserError as e:
        match = _LINE_IN_MESSAGE.search(str(e))
        raise CsvParseError("ragged row", int(match.group(1)) if match else None)
    except pd.errors.EmptyDataError:
        raise CsvParseError("file contains no data")

    if frame.empty:
        raise CsvParseError("file contains no data rows")

    cells = frame.to_numpy()
    numeric = frame.apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)
    bad = np.argwhere(~np.isfinite(numeric))
    if bad.size:
        row, col = bad[0]
        cell = cells[row, col]
        missing = pd.isna(cell) or cell == ""
        reason = "missing field" if missing else f"non-numeric cell {cell!r}"
        raise CsvParseError(
            f"{reason} in column {col + 1}",
            _data_line_numbers(path, skip, has_header)[int(row)],
        )

    if center:
        numeric = numeric - numeric.mean(axis=0)

    meta = _comment_metadata(path)
    seed = meta.get("seed")
    return TimeSeries(
        data=numeric,
        dt=dt,
        seed=int(seed) if seed not in (None, "None") else None,
        system_tag=system_tag or meta.get("system", path.stem),
    )
