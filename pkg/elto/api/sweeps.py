import logging
from pathlib import Path
from typing import List, Sequence

import pandas as pd

from elto.api.experiments import aggregate_trials, run_experiment
from elto.exceptions import ArgumentError
from elto.models import ExperimentConfig, ExperimentKind, ResultRecord, TrialResult
from elto import storage

logger = logging.getLogger(__name__)

PRIMARY_METRIC = {
    ExperimentKind.VDP_MODES: "eigen_error",
    ExperimentKind.SL_MODES: "eigen_error",
    ExperimentKind.PENDULUM_FILTER: "mse",
    ExperimentKind.CSV_FILTER: "mse",
    ExperimentKind.PENDULUM_ABLATION: "mse",
}


def with_noise(cfg: ExperimentConfig, noise: float) -> ExperimentConfig:
    """Copie de la configuration avec le niveau de bruit balayé par ce type d'expérience.

    VDP : écart-type du bruit d'observation ; SL : variance du bruit de
    processus ; pendule : intensité n_p du bruit de processus.
    """
    system = cfg.system
    if cfg.kind == ExperimentKind.VDP_MODES:
        system = system.model_copy(update={"vdp": system.vdp.model_copy(update={"obs_noise_std": noise})})
    elif cfg.kind == ExperimentKind.SL_MODES:
        system = system.model_copy(update={"sl": system.sl.model_copy(update={"eps_process": noise})})
    elif cfg.kind in (ExperimentKind.PENDULUM_FILTER, ExperimentKind.PENDULUM_ABLATION):
        system = system.model_copy(update={"pendulum": system.pendulum.model_copy(update={"n_p": noise})})
    else:
        raise ArgumentError(f"pas de niveau de bruit à balayer pour {cfg.kind.value}")
    return cfg.model_copy(update={"system": system})


def split_by_method(record: ResultRecord, methods: Sequence[str]) -> List[ResultRecord]:
    """Un ResultRecord par méthode, à partir d'un enregistrement multi-méthodes."""
    out = []
    for method in methods:
        trials = [
            TrialResult(
                trial=t.trial,
                seed=t.seed,
                metrics={method: t.metrics[method]} if method in t.metrics else {},
                failure=t.failure,
            )
            for t in record.trials
        ]
        out.append(
            record.model_copy(
                update={"trials": trials, "aggregate": aggregate_trials(trials)}
            )
        )
    return out


def noise_sweep(
    cfg: ExperimentConfig,
    noise_values: Sequence[float],
    methods: Sequence[str],
    out_dir=None,
    fmt: str = "csv",
) -> List[ResultRecord]:
    """Balayage bruit x méthodes : toutes les méthodes partagent les données d'un même niveau.

    Retourne une ligne (ResultRecord) par couple (niveau de bruit, méthode).
    """
    if not noise_values or not methods:
        raise ArgumentError("noise_values et methods doivent être non vides")
    records: List[ResultRecord] = []
    for noise in noise_values:
        level = with_noise(cfg, float(noise)).model_copy(update={"methods": list(methods)})
        logger.info(f"[sweeps.noise_sweep] noise={noise}")
        record = run_experiment(level)
        records.extend(split_by_method(record, methods))
    if out_dir is not None:
        storage.write_results(records, out_dir, fmt)
        sweep_table(records, PRIMARY_METRIC[cfg.kind]).to_csv(
            Path(out_dir) / "sweep_summary.csv", index=False, float_format=storage.FLOAT_FORMAT
        )
    return records


def sweep_table(records: Sequence[ResultRecord], metric: str) -> pd.DataFrame:
    """Tableau prêt à tracer : bruit, méthode, moyenne, écart-type, nombre d'essais."""
    rows = []
    for record in records:
        for method, metrics in record.aggregate.items():
            agg = metrics.get(metric)
            if agg is None:
                continue
            rows.append(
                {"noise": record.noise, "method": method, "mean": agg.mean, "std": agg.std, "n": agg.n}
            )
    return pd.DataFrame(rows, columns=["noise", "method", "mean", "std", "n"])
