#!/usr/bin/env python3
"""Tests des décompositions en modes : Koopman à noyaux, DMD, Hankel-DMD, EDMD et sDMD."""

import numpy as np
import pytest

from elto.exceptions import ArgumentError
from elto.models import KernelSpec, ModeMethod, SlConfig, VdpConfig
from elto.services import modes, systems

LAMBDA = 0.95 * np.exp(0.3j)


def _rotation(rho=0.95, angle=0.3):
    return rho * np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])


def _linear_series(n=60, A=None):
    """Noise-free trajectory of x' = A x, one sample per row."""
    A = _rotation() if A is None else A
    Y = np.empty((n, 2))
    Y[0] = [1.0, 0.5]
    for t in range(1, n):
        Y[t] = A @ Y[t - 1]
    return Y


def _noisy_series(n, seed, process=0.1, obs=0.3):
    rng = np.random.default_rng(seed)
    A = _rotation()
    x = np.zeros((n, 2))
    for t in range(1, n):
        x[t] = A @ x[t - 1] + process * rng.standard_normal(2)
    return x + obs * rng.standard_normal((n, 2))


def test_continuous_eigenvalues():
    s = modes.continuous_eigenvalues([1.0, np.exp(0.2j), 0.0], 0.1)
    assert s[0] == pytest.approx(0.0)
    assert s[1] == pytest.approx(2.0j)
    assert np.isneginf(s[2].real)


def test_exact_dmd_recovers_a_linear_system():
    Y = _linear_series()
    dec = modes.dmd_exact(*modes.snapshot_pairs(Y), dt=0.5)
    assert dec.method == ModeMethod.DMD
    assert np.allclose(dec.eigvals_discrete, [LAMBDA, np.conj(LAMBDA)], atol=1e-10)
    assert np.allclose(dec.eigvals_continuous, np.log(dec.eigvals_discrete) / 0.5)
    assert np.allclose(modes.reconstruct(dec, 20), Y[:20], atol=1e-8)


def test_dmd_rejects_mismatched_snapshots():
    with pytest.raises(ArgumentError):
        modes.dmd_exact(np.ones((2, 5)), np.ones((2, 4)))
    with pytest.raises(ArgumentError):
        modes.dmd_exact(np.zeros((2, 5)), np.zeros((2, 5)))


def test_hankel_dmd_on_a_sinusoid():
    t = np.arange(200)
    dec = modes.hankel_dmd(np.cos(0.5 * t), delay_d=5)
    assert dec.method == ModeMethod.HANKEL_DMD
    assert dec.modes.shape[0] == 1
    assert modes.eigen_error(dec, [np.exp(0.5j), np.exp(-0.5j)]) < 1e-8


def test_hankel_dmd_recovers_the_vdp_fundamental():
    series = systems.simulate_vdp(VdpConfig(length=3000, burn_in=500), seed=0)
    dec = modes.retain(modes.hankel_dmd(series.data, 30, series.dt))
    detail = modes.eigen_error_detail(dec, systems.true_eigs_vdp(1))
    assert detail.max() < 1e-2


def test_edmd_with_identity_dictionary():
    Y = _linear_series()
    dec = modes.edmd(Y, dt=1.0)
    assert dec.method == ModeMethod.EDMD
    assert np.allclose(dec.eigvals_discrete, [LAMBDA, np.conj(LAMBDA)], atol=1e-10)
    assert dec.modes.shape == (2, 2)


def test_edmd_on_noise_free_stuart_landau_is_exact():
    cfg = SlConfig(r0=1.0, eps_process=0.0, obs_noise_var=0.0, length=1000)
    series = systems.simulate_sl(cfg, seed=0)
    dec = modes.edmd(series.data, systems.exponential_dictionary(), cfg.dt)
    assert dec.eigvals_discrete.size == 2 * systems.SL_DICTIONARY_ORDER + 1
    assert np.allclose(np.abs(dec.eigvals_discrete), 1.0, atol=1e-4)
    truth = systems.true_eigs_sl(4, 0.0)
    assert modes.eigen_error(modes.retain(dec), truth, "continuous") < 1e-3


def test_subspace_dmd_is_unbiased_under_observation_noise():
    truth = [LAMBDA, np.conj(LAMBDA)]
    dmd_errors, sdmd_errors = [], []
    for seed in range(5):
        Y = _noisy_series(3000, seed)
        dmd_errors.append(modes.eigen_error(modes.dmd_exact(*modes.snapshot_pairs(Y)), truth))
        sdmd_errors.append(modes.eigen_error(modes.subspace_dmd(Y, rank=2), truth))
    assert np.mean(sdmd_errors) < 0.5 * np.mean(dmd_errors)
    assert np.mean(sdmd_errors) < 0.1


def test_subspace_dmd_noise_free_and_delayed():
    Y = _linear_series(80)
    dec = modes.subspace_dmd(Y, rank=2)
    assert dec.method == ModeMethod.SUBSPACE_DMD
    assert np.allclose(dec.eigvals_discrete, [LAMBDA, np.conj(LAMBDA)], atol=1e-8)
    assert dec.modes.shape == (2, 2)
    # default rank is capped at the snapshot dimension
    assert modes.subspace_dmd(Y, delay=3).eigvals_discrete.size <= 6
    with pytest.raises(ArgumentError):
        modes.subspace_dmd(Y[:3])


def test_kernel_koopman_with_linear_kernel():
    X = _linear_series(60).T
    koopman = modes.kernel_koopman(X, KernelSpec.linear(), eps=1e-8)
    dec = modes.decompose(koopman, X, X.T, dt=1.0, n_modes=2)
    assert dec.method == ModeMethod.ELTO
    assert np.allclose(dec.eigvals_discrete, [LAMBDA, np.conj(LAMBDA)], atol=1e-5)
    assert dec.eigfun_values.shape == (60, 2)
    assert dec.modes.shape == (2, 2)


def test_truncation_keeps_conjugate_partners():
    X = _linear_series(60).T
    koopman = modes.kernel_koopman(X, KernelSpec.linear(), eps=1e-8)
    dec = modes.decompose(koopman, X, X.T, dt=1.0, n_modes=1)
    assert dec.eigvals_discrete.size == 2
    assert dec.eigvals_discrete[0].imag > 0
    assert dec.eigvals_discrete[1] == pytest.approx(np.conj(dec.eigvals_discrete[0]))


def test_kernel_koopman_validates_states():
    with pytest.raises(ArgumentError):
        modes.kernel_koopman(np.ones((2, 2)), KernelSpec.rbf(1.0))
    with pytest.raises(ArgumentError):
        modes.decompose(
            modes.kernel_koopman(_linear_series(10).T, KernelSpec.rbf(1.0)),
            _linear_series(10).T,
            np.ones((9, 2)),
            dt=1.0,
        )


def test_eigen_error_matching():
    assert modes.eigen_error([1.0, 2.0], [1.1]) == pytest.approx(0.1)
    # the second truth value has no estimate left and costs its modulus
    assert modes.eigen_error([1.0], [1.0, 2.0j]) == pytest.approx(1.0)
    assert modes.eigen_error([], [0.5]) == pytest.approx(0.5)
    with pytest.raises(ArgumentError):
        modes.eigen_error([1.0], [1.0], domain="laplace")
    with pytest.raises(ArgumentError):
        modes.eigen_error([1.0], [])


def test_retain_filters_by_modulus():
    Y = _linear_series()
    dec = modes.dmd_exact(*modes.snapshot_pairs(Y))
    assert modes.retain(dec, 0.2, 1.1).eigvals_discrete.size == 2
    empty = modes.retain(dec, 0.96, 1.1)
    assert empty.eigvals_discrete.size == 0
    assert empty.modes.shape == (2, 0)


def test_delay_embedding_is_oldest_first():
    H = modes.delay_embed(np.arange(5.0), 2)
    assert H.tolist() == [[0.0, 1.0, 2.0, 3.0], [1.0, 2.0, 3.0, 4.0]]
    with pytest.raises(ArgumentError):
        modes.delay_embed(np.arange(3.0), 5)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
