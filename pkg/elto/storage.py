"""Lecture et écriture des artefacts : résultats, modèles, traces et séries."""
import json
import logging
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from elto.exceptions import ConsistencyError
from elto.models import (
    EltoFilterModel,
    FilterOutput,
    KernelSpec,
    ModeDecomposition,
    RealizationModel,
    ResultRecord,
    TimeSeries,
)
from elto.services.metrics import aggregate
from elto.services.operators import fit_operators

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
RESULT_COLUMNS = ["experiment", "method", "noise", "trial", "metric", "value"]
SPOT_CHECKS = 5
SPOT_TOLERANCE = 1e-10
MODEL_FORMAT = "elto-filter-model/1"


def _finite_or_none(value: float) -> Optional[float]:
    return float(value) if np.isfinite(value) else None


# ============ Results ============


def result_rows(records: Iterable[ResultRecord]) -> pd.DataFrame:
    """Long-format rows; ``*_seconds`` metrics stay out of the table."""
    rows = []
    for record in records:
        for trial in record.trials:
            for method, metrics in sorted(trial.metrics.items()):
                for metric, value in sorted(metrics.items()):
                    if metric.endswith("_seconds"):
                        continue
                    rows.append(
                        {
                            "experiment": record.experiment,
                            "method": method,
                            "noise": "" if record.noise is None else record.noise,
                            "trial": trial.trial,
                            "metric": metric,
                            "value": value,
                        }
                    )
    return pd.DataFrame(rows, columns=RESULT_COLUMNS)


def check_aggregates(record: ResultRecord) -> None:
    """Recompute every aggregate from the per-trial values."""
    for method, metrics in record.aggregate.items():
        for metric, stored in metrics.items():
            values = [
                t.metrics[method][metric]
                for t in record.trials
                if method in t.metrics and metric in t.metrics[method]
            ]
            fresh = aggregate(values)
            same = fresh.n == stored.n and (
                fresh.n == 0
                or (np.isclose(fresh.mean, stored.mean, rtol=1e-12, atol=0)
                    and np.isclose(fresh.std, stored.std, rtol=1e-9, atol=1e-300))
            )
            if not same:
                raise ConsistencyError(
                    f"aggregate {method}/{metric} does not match its trials"
                )


def write_results(
    records: Union[ResultRecord, Sequence[ResultRecord]],
    out_dir,
    fmt: str = "csv",
) -> List[Path]:
    """Write results.json, plus results.csv (long format) unless ``fmt`` is json."""
    records = [records] if isinstance(records, ResultRecord) else list(records)
    for record in records:
        check_aggregates(record)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if fmt != "json":
        path = out_dir / "results.csv"
        result_rows(records).to_csv(path, index=False, float_format=FLOAT_FORMAT)
        written.append(path)
    path = out_dir / "results.json"
    payload = [json.loads(r.model_dump_json()) for r in records]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload[0] if len(payload) == 1 else payload, fh, indent=2)
    written.append(path)
    logger.info(f"[storage.write_results] wrote {', '.join(p.name for p in written)}")
    return written


def read_results_csv(path) -> pd.DataFrame:
    return pd.read_csv(path, keep_default_na=False)


# ============ Filter model ============


def _spot_checks(model: EltoFilterModel, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    checks = []
    for _ in range(SPOT_CHECKS):
        i, j = (int(v) for v in rng.integers(0, model.N, size=2))
        checks.append({"matrix": "G_x", "i": i, "j": j, "value": float(model.G_x[i, j])})
    return checks


def _model_header(model: EltoFilterModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "kernel_x": model.kernel_x.model_dump(mode="json"),
        "kernel_y": model.kernel_y.model_dump(mode="json"),
        "eps_t": model.eps_t,
        "eps_o": model.eps_o,
        "eps_q": model.eps_q,
        "spot_checks": _spot_checks(model),
    }


def _rebuild(header: dict, X, Y_train, pre, post) -> EltoFilterModel:
    if header.get("format") != MODEL_FORMAT:
        raise ConsistencyError(f"unknown model format {header.get('format')!r}")
    model = fit_operators(
        np.asarray(X, dtype=float),
        np.asarray(Y_train, dtype=float),
        KernelSpec(**header["kernel_x"]),
        KernelSpec(**header["kernel_y"]),
        eps_t=header["eps_t"],
        eps_o=header["eps_o"],
        eps_q=header["eps_q"],
        pre_index=pre,
        post_index=post,
    )
    for check in header["spot_checks"]:
        value = getattr(model, check["matrix"])[check["i"], check["j"]]
        if abs(value - check["value"]) > SPOT_TOLERANCE * max(1.0, abs(check["value"])):
            raise ConsistencyError(
                f"{check['matrix']}[{check['i']},{check['j']}] recomputed as {value!r}, "
                f"stored {check['value']!r}"
            )
    return model


def save_model_json(model: EltoFilterModel, path) -> Path:
    path = Path(path)
    payload = _model_header(model)
    payload.update(
        {
            "X": model.X.tolist(),
            "Y_train": model.Y_train.tolist(),
            "pre_index": model.pre_index.tolist(),
            "post_index": model.post_index.tolist(),
        }
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
    return path


def load_model_json(path) -> EltoFilterModel:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return _rebuild(
        payload, payload["X"], payload["Y_train"], payload["pre_index"], payload["post_index"]
    )


def save_model_bin(model: EltoFilterModel, path) -> Path:
    """numpy .npz container; the ``header`` entry is the JSON metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(
            fh,
            header=np.array(json.dumps(_model_header(model))),
            X=model.X,
            Y_train=model.Y_train,
            pre_index=model.pre_index,
            post_index=model.post_index,
        )
    return path


def load_model_bin(path) -> EltoFilterModel:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        return _rebuild(
            header, data["X"], data["Y_train"], data["pre_index"], data["post_index"]
        )


# ============ Realization model ============


def save_realization_json(model: RealizationModel, path) -> Path:
    path = Path(path)
    payload = {
        "kernel_y": model.kernel_y.model_dump(mode="json"),
        "w": model.w.tolist(),
        "S": model.S.tolist(),
        "reference_samples": model.reference_samples.tolist(),
        "B": model.B.tolist(),
        "correlations": model.correlations.tolist(),
        "h": model.h,
        "r": model.r,
        "train_series_id": model.train_series_id,
        "loss_trace": list(model.loss_trace),
        "flags": list(model.flags),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
    return path


def load_realization_json(path) -> RealizationModel:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    payload["kernel_y"] = KernelSpec(**payload["kernel_y"])
    payload["B"] = np.asarray(payload["B"], dtype=float).reshape(payload["r"], payload["h"])
    payload["loss_trace"] = tuple(payload["loss_trace"])
    payload["flags"] = tuple(payload["flags"])
    return RealizationModel(**payload)


# ============ Traces and decompositions ============


def filter_trace_frame(outputs: Sequence[FilterOutput]) -> pd.DataFrame:
    """Columns t, eta_1..q, innovation_norm, sigma_1..q (diagonal of Sigma)."""
    rows = []
    for o in outputs:
        row = {"t": o.t}
        row.update({f"eta_{i + 1}": v for i, v in enumerate(o.eta)})
        row["innovation_norm"] = np.nan if o.innovation_norm is None else o.innovation_norm
        row.update({f"sigma_{i + 1}": v for i, v in enumerate(np.diag(o.Sigma))})
        rows.append(row)
    return pd.DataFrame(rows)


def write_filter_trace(outputs: Sequence[FilterOutput], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    filter_trace_frame(outputs).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def decomposition_payload(dec: ModeDecomposition, config: Optional[dict] = None) -> dict:
    def pairs(values):
        return [[_finite_or_none(v.real), _finite_or_none(v.imag)] for v in values]

    return {
        "method": dec.method.value,
        "dt": dec.dt,
        "eigvals_discrete": pairs(dec.eigvals_discrete),
        "eigvals_continuous": pairs(dec.eigvals_continuous),
        "flags": list(dec.flags),
        "config": config or {},
    }


def write_decomposition_json(dec: ModeDecomposition, path, config: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(decomposition_payload(dec, config), fh, indent=2)
    return path


# ============ Time series ============


def save_series_csv(series: TimeSeries, path) -> Path:
    """CSV with a ``# system=... dt=... seed=...`` line, a header and %.17g values."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        series.data, columns=[f"y{i + 1}" for i in range(series.q)]
    )
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# system={series.system_tag} dt={series.dt!r} seed={series.seed}\n")
        frame.to_csv(fh, index=False, float_format=FLOAT_FORMAT)
    return path
