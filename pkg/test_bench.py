#!/usr/bin/env python3
"""Tests du banc d'essai : configurations, pipelines, stockage des résultats, balayages et CLI.

Les expériences tournent à très petite échelle pour rester rapides.
"""

import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from elto import storage
from elto.api import experiments
from elto.api.experiments import load_experiment_config, run_experiment, trial_seeds
from elto.api.sweeps import noise_sweep, sweep_table, with_noise
from elto.exceptions import ArgumentError, ConsistencyError
from elto.main import main
from elto.models import (
    Aggregate,
    ExperimentConfig,
    ExperimentKind,
    KernelSpec,
    ResultRecord,
    TimeSeries,
    TrialResult,
    VdpConfig,
)
from elto.services import filter as kfilter
from elto.services import systems
from elto.services.metrics import aggregate, mse
from elto.services.operators import fit_operators
from elto.services.realization import optimize_w

CONFIG_DIR = Path(__file__).parent / "configs"


def _tiny_pendulum(**overrides) -> ExperimentConfig:
    raw = {
        "name": "tiny_pendulum",
        "kind": "pendulum_filter",
        "trials": 2,
        "n_train": 12,
        "n_val": 3,
        "system": {"pendulum": {"sim_hz": 100, "obs_hz": 10, "length": 30}},
        "model": {
            "h": 3,
            "epochs": 3,
            "reference": "last:100",
            "warmup": 2,
            "model_trajectories": 6,
        },
    }
    raw.update(overrides)
    return ExperimentConfig(**raw)


def _tiny_vdp(**overrides) -> ExperimentConfig:
    raw = {
        "name": "tiny_vdp",
        "kind": "vdp_modes",
        "system": {"vdp": {"length": 400, "obs_noise_std": 0.05}},
        "methods": ["elto", "dmd", "hankel_dmd", "subspace_dmd"],
        "model": {
            "h": 5,
            "rank": 4,
            "epochs": 2,
            "reference": "last:100",
            "operator_samples": 150,
            "harmonics": 2,
            "delay": 10,
        },
    }
    raw.update(overrides)
    return ExperimentConfig(**raw)


def _write_config(cfg: ExperimentConfig, path: Path) -> Path:
    path.write_text(json.dumps(cfg.model_dump(mode="json")))
    return path


# ============ Metrics ============


def test_mse_and_population_aggregate():
    assert mse([1.0, 2.0], [1.0, 4.0]) == pytest.approx(2.0)
    with pytest.raises(ArgumentError):
        mse([1.0], [1.0, 2.0])
    agg = aggregate([1.0, 2.0, 3.0, float("nan")])
    assert agg.n == 3
    assert agg.mean == pytest.approx(2.0)
    assert agg.std == pytest.approx(np.sqrt(2.0 / 3.0))
    assert aggregate([]).n == 0


# ============ Configuration ============


def test_shipped_configurations_load():
    paths = sorted(CONFIG_DIR.glob("*.toml"))
    assert len(paths) >= 7
    kinds = {load_experiment_config(p).kind for p in paths}
    assert kinds == set(ExperimentKind)
    csv_cfg = load_experiment_config(CONFIG_DIR / "csv_filter.toml")
    assert csv_cfg.input_path.is_absolute()
    sweep = load_experiment_config(CONFIG_DIR / "vdp_sweep.toml")
    assert len(sweep.noise_values) == 20


def test_invalid_configurations_are_reported(tmp_path):
    with pytest.raises(ArgumentError):
        load_experiment_config(tmp_path / "absent.toml")
    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"name": "x", "colour": "blue"}))
    with pytest.raises(ArgumentError):
        load_experiment_config(unknown)
    broken = tmp_path / "broken.toml"
    broken.write_text("name = \n")
    with pytest.raises(ArgumentError):
        load_experiment_config(broken)
    with pytest.raises(ValueError):
        ExperimentConfig(kind="csv_filter")
    with pytest.raises(ValueError):
        ExperimentConfig(model={"reference": "first:3"})


def test_trial_seeds_are_spaced():
    cfg = _tiny_pendulum(seed=5, trials=3)
    assert trial_seeds(cfg) == [5, 10012, 20019]


# ============ Pipelines ============


def test_pendulum_filter_pipeline(tmp_path):
    record = run_experiment(_tiny_pendulum(), tmp_path)
    assert not record.failed
    assert set(record.aggregate) == {"elto", "locf"}
    assert record.aggregate["elto"]["mse"].n == 2
    assert np.isfinite(record.aggregate["elto"]["mse"].mean)
    assert record.noise == pytest.approx(0.1)
    for name in ("results.csv", "results.json", "model.json", "model.bin", "filter_trace.csv", "realization.json"):
        assert (tmp_path / name).exists()
    rows = storage.read_results_csv(tmp_path / "results.csv")
    assert list(rows.columns) == storage.RESULT_COLUMNS
    assert len(rows) == 4

    model = storage.load_model_json(tmp_path / "model.json")
    assert model.N == 6 * (29 + 2 - 6)
    trace = pd.read_csv(tmp_path / "filter_trace.csv")
    assert list(trace.columns) == ["t", "eta_1", "innovation_norm", "sigma_1"]
    assert len(trace) == 30


def test_pipelines_are_deterministic():
    cfg = _tiny_vdp(methods=["dmd", "hankel_dmd"], trials=2)
    a = run_experiment(cfg)
    b = run_experiment(cfg)
    assert [t.metrics for t in a.trials] == [t.metrics for t in b.trials]
    assert a.trials[0].seed == 0
    assert a.trials[1].seed == 10007


def test_results_csv_is_byte_identical_across_runs(tmp_path):
    cfg = _tiny_pendulum()
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()

    cfg_path = _write_config(_tiny_vdp(methods=["dmd", "subspace_dmd"], trials=2), tmp_path / "vdp.json")
    for out in ("c", "d"):
        assert main(["modes", "--config", str(cfg_path), "--out", str(tmp_path / out)]) == 0
    assert (tmp_path / "c" / "results.csv").read_bytes() == (tmp_path / "d" / "results.csv").read_bytes()


def _record_calls(monkeypatch):
    calls = {"fit": [], "scored": []}
    fit, score = experiments._fit_realization, experiments.filter_mse

    def fit_recorder(cfg, train, seed):
        calls["fit"].append(list(train) if isinstance(train, list) else [train])
        return fit(cfg, train, seed)

    def score_recorder(model, items, warmup, seed):
        calls["scored"].append(list(items))
        return score(model, items, warmup, seed)

    monkeypatch.setattr(experiments, "_fit_realization", fit_recorder)
    monkeypatch.setattr(experiments, "filter_mse", score_recorder)
    return calls


def test_search_validation_is_held_out_of_the_realization(monkeypatch):
    calls = _record_calls(monkeypatch)
    cfg = _tiny_pendulum(trials=1, search={"method": "grid", "grid": {"eps_t": [-3.0]}})
    experiments.pendulum_filter(cfg, seed=0)
    fitted = {id(s) for s in calls["fit"][0]}
    validated = {id(s) for s in calls["scored"][0]}
    assert len(fitted) == 9
    assert len(validated) == 3
    assert not fitted & validated


def test_csv_realization_sees_only_the_fit_part(monkeypatch, tmp_path):
    calls = _record_calls(monkeypatch)
    series = systems.simulate_vdp(VdpConfig(length=400, obs_noise_std=0.05), seed=3)
    cfg = ExperimentConfig(
        name="held_out",
        kind="csv_filter",
        input_path=storage.save_series_csv(series, tmp_path / "series.csv"),
        input_dt=0.1,
        model={"h": 4, "epochs": 1, "reference": "last:100", "operator_samples": 150},
        search={"method": "grid", "grid": {"eps_t": [-3.0]}},
    )
    experiments.csv_filter(cfg, seed=0)
    assert [s.data.shape[0] for s in calls["fit"][0]] == [225]
    assert [s.data.shape[0] for s in calls["scored"][0]] == [75]


def test_filter_weights_stay_bounded_over_a_long_horizon(tmp_path):
    cfg = _tiny_pendulum(trials=1)
    _, model = experiments.fit_model(cfg, tmp_path)
    horizon = 10 * cfg.system.pendulum.length
    long_run = systems.simulate_pendulum(
        cfg.system.pendulum.model_copy(update={"length": horizon}), seed=99
    )
    belief = kfilter.init_belief(model, seed=0)
    norms = []
    for y in long_run.data:
        prior = kfilter.predict(model, belief)
        belief = kfilter.innovate(model, prior, y)
        norms.extend([np.linalg.norm(prior.m), np.linalg.norm(belief.m)])
    assert len(norms) == 2 * horizon
    assert max(norms) < 1e6
    outputs = kfilter.run_filter(model, long_run, seed=0)
    assert not any("weight_norm_exceeded" in o.flags for o in outputs)


def test_csv_filter_pipeline_with_grid_search(tmp_path):
    series = systems.simulate_vdp(VdpConfig(length=400, obs_noise_std=0.05), seed=3)
    csv_path = storage.save_series_csv(series, tmp_path / "series.csv")
    cfg = ExperimentConfig(
        name="tiny_csv",
        kind="csv_filter",
        input_path=csv_path,
        input_dt=0.1,
        center=True,
        model={"h": 4, "epochs": 2, "reference": "last:100", "operator_samples": 150},
        search={"method": "grid", "grid": {"eps_t": [-3.0, -2.0]}},
    )
    record = run_experiment(cfg)
    assert not record.failed
    assert len(record.search_trace) == 2
    assert {p.params["eps_o"] for p in record.search_trace} == {-3.0}
    assert record.noise is None
    assert np.isfinite(record.aggregate["elto"]["mse"].mean)


def test_missing_input_fails_the_trial_not_the_run(tmp_path):
    cfg = ExperimentConfig(name="absent", kind="csv_filter", input_path=tmp_path / "nope.csv")
    record = run_experiment(cfg, tmp_path)
    assert record.failed
    assert "ArgumentError" in record.trials[0].failure
    assert record.aggregate == {}
    assert (tmp_path / "results.json").exists()


def test_vdp_modes_pipeline(tmp_path):
    record = run_experiment(_tiny_vdp(), tmp_path)
    assert not record.failed
    assert set(record.aggregate) == {"elto", "dmd", "hankel_dmd", "subspace_dmd"}
    for metrics in record.aggregate.values():
        assert set(metrics) == {"eigen_error", "error_h1", "error_h2"}
        assert np.isfinite(metrics["eigen_error"].mean)
    payload = json.loads((tmp_path / "decomposition_hankel_dmd.json").read_text())
    assert payload["method"] == "hankel_dmd"
    assert payload["config"]["name"] == "tiny_vdp"


def test_sl_modes_pipeline():
    cfg = ExperimentConfig(
        name="tiny_sl",
        kind="sl_modes",
        system={"sl": {"length": 400, "eps_process": 0.04, "obs_noise_var": 0.01}},
        methods=["elto", "edmd", "subspace_dmd_dict"],
        model={"h": 5, "rank": 4, "epochs": 2, "reference": "last:100", "operator_samples": 150, "harmonics": 2},
    )
    record = run_experiment(cfg)
    assert not record.failed
    assert record.noise == pytest.approx(0.04)
    assert set(record.aggregate) == {"elto", "edmd", "subspace_dmd_dict"}


def test_pendulum_ablation_grid(tmp_path):
    cfg = _tiny_pendulum(
        kind="pendulum_ablation", trials=1, epochs_grid=[1, 2], window_grid=[3, 4]
    )
    record = run_experiment(cfg, tmp_path)
    assert not record.failed
    assert set(record.aggregate) == {"h3_e1", "h4_e1", "h3_e2", "h4_e2"}
    assert set(record.aggregate["h4_e2"]) == {"mse", "train_seconds"}
    rows = storage.read_results_csv(tmp_path / "results.csv")
    assert set(rows["metric"]) == {"mse"}


# ============ Sweeps ============


def test_with_noise_targets_the_swept_parameter():
    assert with_noise(_tiny_vdp(), 0.2).system.vdp.obs_noise_std == 0.2
    assert with_noise(_tiny_pendulum(), 0.3).system.pendulum.n_p == 0.3
    sl = ExperimentConfig(kind="sl_modes")
    assert with_noise(sl, 0.05).system.sl.eps_process == 0.05
    with pytest.raises(ArgumentError):
        with_noise(ExperimentConfig(kind="csv_filter", input_path="x.csv"), 0.1)


def test_noise_sweep_writes_one_row_per_level_and_method(tmp_path):
    records = noise_sweep(_tiny_vdp(), [0.0, 0.1], ["dmd", "hankel_dmd"], tmp_path)
    assert len(records) == 4
    assert [r.noise for r in records] == [0.0, 0.0, 0.1, 0.1]
    assert all(len(r.aggregate) == 1 for r in records)
    table = pd.read_csv(tmp_path / "sweep_summary.csv")
    assert list(table.columns) == ["noise", "method", "mean", "std", "n"]
    assert len(table) == 4
    assert sweep_table(records, "eigen_error")["method"].tolist() == ["dmd", "hankel_dmd"] * 2
    with pytest.raises(ArgumentError):
        noise_sweep(_tiny_vdp(), [], ["dmd"])


# ============ Storage ============


def _record(values, stored_mean=None):
    trials = [
        TrialResult(trial=i, seed=i, metrics={"elto": {"mse": v}}) for i, v in enumerate(values)
    ]
    agg = aggregate(values)
    if stored_mean is not None:
        agg = Aggregate(mean=stored_mean, std=agg.std, n=agg.n)
    return ResultRecord(
        experiment="unit", kind="pendulum_filter", config={}, noise=0.1,
        trials=trials, aggregate={"elto": {"mse": agg}},
    )


def test_results_round_trip(tmp_path):
    written = storage.write_results(_record([0.5, 0.25]), tmp_path)
    assert [p.name for p in written] == ["results.csv", "results.json"]
    rows = storage.read_results_csv(tmp_path / "results.csv")
    assert rows["value"].tolist() == [0.5, 0.25]
    assert rows["trial"].tolist() == [0, 1]
    payload = json.loads((tmp_path / "results.json").read_text())
    assert payload["aggregate"]["elto"]["mse"]["mean"] == pytest.approx(0.375)

    json_only = tmp_path / "json"
    assert [p.name for p in storage.write_results(_record([1.0]), json_only, "json")] == ["results.json"]


def test_inconsistent_aggregates_are_rejected(tmp_path):
    with pytest.raises(ConsistencyError):
        storage.write_results(_record([0.5, 0.25], stored_mean=0.4), tmp_path)


def test_filter_model_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    X = rng.standard_normal((2, 30))
    Y = X[:1] + 0.1 * rng.standard_normal((1, 30))
    model = fit_operators(X, Y, KernelSpec.rbf(0.5), KernelSpec.rbf(1.0), 1e-2, 1e-2, 1e-2)
    ys = rng.standard_normal((10, 1))
    expected = kfilter.predictions(kfilter.run_filter(model, ys, seed=1))

    for loaded in (
        storage.load_model_json(storage.save_model_json(model, tmp_path / "m.json")),
        storage.load_model_bin(storage.save_model_bin(model, tmp_path / "m.bin")),
    ):
        assert loaded.eps_t == model.eps_t
        assert np.array_equal(loaded.T_coord, model.T_coord)
        assert np.array_equal(kfilter.predictions(kfilter.run_filter(loaded, ys, seed=1)), expected)


def test_tampered_model_file_is_rejected(tmp_path):
    rng = np.random.default_rng(1)
    X = rng.standard_normal((2, 20))
    model = fit_operators(X, X[:1], KernelSpec.rbf(0.5), KernelSpec.rbf(1.0))
    path = storage.save_model_json(model, tmp_path / "m.json")
    payload = json.loads(path.read_text())
    payload["X"][0][0] += 1.0
    payload["X"][1][1] += 1.0
    for check in payload["spot_checks"]:
        check["value"] += 0.5
    path.write_text(json.dumps(payload))
    with pytest.raises(ConsistencyError):
        storage.load_model_json(path)


def test_realization_round_trip(tmp_path):
    y = np.sin(0.3 * np.arange(80)) + 0.05 * np.random.default_rng(0).standard_normal(80)
    series = TimeSeries(data=y, dt=0.1, seed=0, system_tag="sine")
    model = optimize_w(series, KernelSpec.rbf(1.0), 4, r=2, epochs=3)
    loaded = storage.load_realization_json(storage.save_realization_json(model, tmp_path / "r.json"))
    assert np.array_equal(loaded.w, model.w)
    assert np.array_equal(loaded.B, model.B)
    assert loaded.S.tolist() == model.S.tolist()
    assert loaded.train_series_id == "sine:0"
    assert loaded.loss_trace == model.loss_trace


# ============ CLI ============


def test_cli_modes_and_exit_codes(tmp_path):
    cfg_path = _write_config(_tiny_vdp(methods=["dmd"]), tmp_path / "vdp.json")
    out = tmp_path / "out"
    assert main(["modes", "--config", str(cfg_path), "--out", str(out), "--format", "json"]) == 0
    assert (out / "results.json").exists()
    assert not (out / "results.csv").exists()
    assert (out / "decomposition_dmd.json").exists()

    assert main(["filter", "--config", str(cfg_path)]) == 2
    assert main(["sweep", "--config", str(cfg_path)]) == 2
    assert main(["modes", "--config", str(cfg_path), "--trials", "0"]) == 2
    assert main(["modes", "--config", str(tmp_path / "absent.json")]) == 2


def test_cli_fit_writes_models(tmp_path):
    cfg_path = _write_config(_tiny_pendulum(trials=1), tmp_path / "pendulum.json")
    out = tmp_path / "fit"
    assert main(["fit", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert (out / "realization.json").exists()
    assert (out / "model.json").exists()
    assert (out / "model.bin").exists()


def test_cli_reports_failed_trials(tmp_path):
    cfg = ExperimentConfig(name="absent", kind="csv_filter", input_path=tmp_path / "nope.csv")
    cfg_path = _write_config(cfg, tmp_path / "csv.json")
    assert main(["filter", "--config", str(cfg_path), "--out", str(tmp_path / "out")]) == 1


def test_cli_search_runs_cma_es(tmp_path):
    cfg_path = _write_config(_tiny_pendulum(trials=1), tmp_path / "pendulum.json")
    out = tmp_path / "search"
    assert main(["search", "--config", str(cfg_path), "--out", str(out)]) == 0
    payload = json.loads((out / "results.json").read_text())
    assert payload["search_trace"]
    assert set(payload["search_trace"][0]["params"]) == {"eps_t", "eps_o", "eps_q"}


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
