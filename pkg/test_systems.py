#!/usr/bin/env python3
"""Tests des simulateurs (pendule, Van der Pol, Stuart-Landau) et de la lecture CSV."""

import math

import numpy as np
import pytest

from elto import storage
from elto.exceptions import ArgumentError, CsvParseError
from elto.models import PendulumConfig, SlConfig, VdpConfig
from elto.services import systems


def test_pendulum_batch_is_reproducible():
    cfg = PendulumConfig(sim_hz=200, obs_hz=10, length=20)
    a = systems.simulate_pendulum_batch(cfg, 3, seed=4)
    b = systems.simulate_pendulum_batch(cfg, 3, seed=4)
    c = systems.simulate_pendulum_batch(cfg, 3, seed=5)
    assert len(a) == 3
    assert a[0].data.shape == (20, 1)
    assert a[0].latent.shape == (20, 2)
    assert a[0].dt == pytest.approx(0.1)
    assert a[1].system_tag == "pendulum#1"
    for x, y in zip(a, b):
        assert np.array_equal(x.data, y.data)
    assert not np.array_equal(a[0].data, c[0].data)


def test_noise_free_small_angle_pendulum_is_harmonic():
    q0 = 0.01
    cfg = PendulumConfig(
        sim_hz=1000, obs_hz=10, length=30, n_p=0.0, n_o=0.0, initial_state=(q0, 0.0)
    )
    series = systems.simulate_pendulum(cfg, seed=0)
    t = np.arange(30) * 0.1
    expected = q0 * np.cos(math.sqrt(cfg.g / cfg.L) * t)
    assert series.system_tag == "pendulum"
    assert np.max(np.abs(series.data[:, 0] - expected)) < 1e-4
    assert np.array_equal(series.data[:, 0], series.latent[:, 0])


def test_pendulum_rates_must_divide():
    with pytest.raises(ArgumentError):
        systems.simulate_pendulum(PendulumConfig(sim_hz=10, obs_hz=20), seed=0)
    with pytest.raises(ArgumentError):
        systems.simulate_pendulum(PendulumConfig(sim_hz=25, obs_hz=10), seed=0)
    with pytest.raises(ArgumentError):
        systems.simulate_pendulum_batch(PendulumConfig(), 0, seed=0)


def test_vdp_limit_cycle_frequency():
    cfg = VdpConfig(length=3000, burn_in=500)
    series = systems.simulate_vdp(cfg, seed=0)
    omega = systems.measure_angular_frequency(series.data[:, 0], cfg.dt)
    assert omega == pytest.approx(systems.VDP_OMEGA, rel=1e-3)


def test_vdp_observation_noise_level():
    clean = systems.simulate_vdp(VdpConfig(length=2000), seed=1)
    noisy = systems.simulate_vdp(VdpConfig(length=2000, obs_noise_std=0.1), seed=1)
    residual = noisy.data - noisy.latent
    assert np.array_equal(clean.data, noisy.latent)
    assert residual.std() == pytest.approx(0.1, rel=0.05)


def test_stuart_landau_without_noise_rotates_at_the_cycle_frequency():
    cfg = SlConfig(r0=1.0, eps_process=0.0, obs_noise_var=0.0, length=1000)
    series = systems.simulate_sl(cfg, seed=0)
    theta = systems.sl_angles(series)
    rate = (theta[-1] - theta[0]) / ((cfg.length - 1) * cfg.dt)
    assert rate == pytest.approx(systems.SL_OMEGA, rel=1e-4)
    assert np.allclose(np.linalg.norm(series.data, axis=1), 1.0)
    assert np.allclose(np.abs(series.latent), 1.0, atol=1e-3)


def test_exponential_dictionary_shapes():
    g = systems.exponential_dictionary(2)
    rows = np.column_stack([np.cos([0.0, 0.5]), np.sin([0.0, 0.5])])
    Psi = g(rows)
    assert Psi.shape == (2, 5)
    assert np.allclose(Psi[:, 2], 1.0)
    assert np.allclose(Psi[1, 3], np.exp(-0.5j))
    assert np.allclose(g(np.array([0.0, 0.5])), Psi)


def test_sl_dictionary_observation_follows_the_observed_angle():
    series = systems.simulate_sl(SlConfig(length=50, obs_noise_var=0.01), seed=1)
    Psi = systems.sl_dictionary_observation(series)
    order = systems.SL_DICTIONARY_ORDER
    assert Psi.shape == (series.data.shape[0], 2 * order + 1)
    assert np.allclose(Psi[:, order], 1.0)
    assert np.allclose(np.abs(Psi), 1.0)
    assert np.allclose(Psi[:, order + 1], np.exp(-1j * systems.sl_angles(series)))
    assert np.allclose(Psi[:, order - 1], np.conj(Psi[:, order + 1]))


def test_eigenvalue_oracles():
    vdp = systems.true_eigs_vdp(2)
    assert vdp.shape == (4,)
    assert np.allclose(np.abs(vdp), 1.0)
    assert vdp[0] == pytest.approx(np.exp(1j * systems.VDP_OMEGA * systems.VDP_DT))
    assert vdp[1] == pytest.approx(np.conj(vdp[0]))

    assert np.allclose(systems.true_eigs_sl(1, 0.0), [0.6j, -0.6j])
    s = systems.true_eigs_sl(2, 0.1)
    assert s[0].real == pytest.approx(-0.05 * 3.0 * 0.36)
    assert s[2] == pytest.approx(complex(-0.05 * 3.0 * 4 * 0.36, 1.2))
    with pytest.raises(ArgumentError):
        systems.true_eigs_vdp(0)
    with pytest.raises(ArgumentError):
        systems.true_eigs_sl(1, -0.1)


def test_csv_round_trip(tmp_path):
    series = systems.simulate_vdp(VdpConfig(length=50, obs_noise_std=0.1), seed=7)
    path = storage.save_series_csv(series, tmp_path / "vdp.csv")
    loaded = systems.load_csv(path, dt=0.1)
    assert np.allclose(loaded.data, series.data, rtol=1e-14, atol=0)
    assert loaded.system_tag == "vdp"
    assert loaded.seed == 7


def test_csv_centering_and_headerless(tmp_path):
    path = tmp_path / "raw.csv"
    path.write_text("1,10\n2,20\n3,30\n")
    series = systems.load_csv(path, has_header=False, center=True)
    assert series.data.shape == (3, 2)
    assert np.allclose(series.data.mean(axis=0), 0.0)
    assert series.system_tag == "raw"


def test_csv_errors_carry_line_numbers(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n3,x\n")
    with pytest.raises(CsvParseError) as err:
        systems.load_csv(bad)
    assert err.value.line == 3

    missing = tmp_path / "missing.csv"
    missing.write_text("a,b\n1,2\n3\n")
    with pytest.raises(CsvParseError) as err:
        systems.load_csv(missing)
    assert err.value.line == 3

    ragged = tmp_path / "ragged.csv"
    ragged.write_text("a,b\n1,2\n3,4,5\n")
    with pytest.raises(CsvParseError):
        systems.load_csv(ragged)

    gaps = tmp_path / "gaps.csv"
    gaps.write_text("# system=x\na,b\n1,2\n\n3,4\n\n5,x\n")
    with pytest.raises(CsvParseError) as err:
        systems.load_csv(gaps)
    assert err.value.line == 7

    with pytest.raises(ArgumentError):
        systems.load_csv(tmp_path / "absent.csv")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
