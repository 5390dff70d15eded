import json
import logging
import time
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from pydantic import ValidationError

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from elto.config import THREADS
from elto.exceptions import ArgumentError, EltoError
from elto.models import (
    EltoFilterModel,
    ExperimentConfig,
    ExperimentKind,
    FilterOutput,
    ModeDecomposition,
    RealizationModel,
    ResultRecord,
    SearchMethod,
    SearchPoint,
    TimeSeries,
    TrialResult,
)
from elto.services import filter as kfilter
from elto.services import modes, systems
from elto.services.kernels import default_state_kernel
from elto.services.metrics import aggregate
from elto.services.operators import fit_operators, transition_pairs
from elto.services.realization import optimize_w, state_samples
from elto.services.search import cma_es, grid_search
from elto import storage

logger = logging.getLogger(__name__)

# Trial i runs with seed base + i * TRIAL_SEED_STRIDE
TRIAL_SEED_STRIDE = 10007
VALIDATION_FRACTION = 0.25
EPS_NAMES = ("eps_t", "eps_o", "eps_q")

FILTER_KINDS = (
    ExperimentKind.PENDULUM_FILTER,
    ExperimentKind.CSV_FILTER,
    ExperimentKind.PENDULUM_ABLATION,
)
MODE_KINDS = (ExperimentKind.VDP_MODES, ExperimentKind.SL_MODES)


class TrialArtifacts(NamedTuple):
    realization: Optional[RealizationModel] = None
    model: Optional[EltoFilterModel] = None
    trace: Optional[List[FilterOutput]] = None
    decompositions: Optional[Dict[str, ModeDecomposition]] = None


class TrialOutcome(NamedTuple):
    result: TrialResult
    search_trace: List[SearchPoint]
    artifacts: Optional[TrialArtifacts]


# ============ Configuration ============


def load_experiment_config(path) -> ExperimentConfig:
    """Charger une configuration d'expérience depuis un fichier JSON ou TOML."""
    path = Path(path)
    if not path.exists():
        raise ArgumentError(f"configuration introuvable : {path}")
    try:
        if path.suffix.lower() == ".toml":
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        else:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise ArgumentError(f"configuration illisible ({path.name}) : {e}")
    try:
        cfg = ExperimentConfig(**raw)
    except ValidationError as e:
        raise ArgumentError(f"configuration invalide ({path.name}) : {e}")
    if cfg.input_path is not None and not cfg.input_path.is_absolute():
        cfg = cfg.model_copy(update={"input_path": (path.parent / cfg.input_path).resolve()})
    return cfg


def trial_seeds(cfg: ExperimentConfig) -> List[int]:
    return [cfg.seed + i * TRIAL_SEED_STRIDE for i in range(cfg.trials)]


# ============ Shared model building ============


def _split_validation(items: Sequence[TimeSeries], cap: int):
    """Séparer les dernières séquences (25 %) pour la validation de la recherche."""
    n_val = max(1, int(round(VALIDATION_FRACTION * len(items))))
    if len(items) - n_val < 1:
        return list(items), list(items[-1:])
    return list(items[:-n_val]), list(items[-n_val:])[:cap]


def _fit_realization(cfg: ExperimentConfig, train, seed: int) -> RealizationModel:
    m = cfg.model
    return optimize_w(
        train,
        m.kernel_y,
        m.h,
        m.rank,
        m.epochs,
        m.learning_rate,
        seed,
        m.reference,
    )


def _state_set(cfg: ExperimentConfig, realization: RealizationModel, items):
    """États, observations alignées et paires de transition du modèle d'opérateurs."""
    X, Y, segments = state_samples(realization, items)
    cap = cfg.model.operator_samples
    if len(segments) == 1 and X.shape[1] > cap:
        X, Y = X[:, -cap:], Y[:, -cap:]
        segments = ((0, cap),)
    pre, post = transition_pairs(segments)
    return X, Y, pre, post


def _build_filter_model(cfg, realization, X, Y, pre, post, eps: Dict[str, Optional[float]]):
    kernel_x = cfg.model.kernel_x or default_state_kernel(realization.r)
    return fit_operators(
        X, Y, kernel_x, cfg.model.kernel_y,
        eps_t=eps.get("eps_t"), eps_o=eps.get("eps_o"), eps_q=eps.get("eps_q"),
        pre_index=pre, post_index=post,
    )


def _scored(outputs: List[FilterOutput], series: TimeSeries, warmup: int):
    """Prédictions et vérité au-delà de la période de chauffe."""
    pred = kfilter.predictions(outputs)[warmup:]
    truth = series.data[warmup:]
    return pred, truth


def filter_mse(model, items: Sequence[TimeSeries], warmup: int, seed: int) -> Tuple[float, float]:
    """MSE de prédiction à un pas du filtre et de la référence LOCF, sur toutes les séquences."""
    sq_filter, sq_locf, count = 0.0, 0.0, 0
    for s in items:
        outputs = kfilter.run_filter(model, s, seed=seed)
        pred, truth = _scored(outputs, s, warmup)
        locf = kfilter.locf_predictions(s.data)[warmup:]
        sq_filter += float(np.sum((pred - truth) ** 2))
        sq_locf += float(np.sum((locf - truth) ** 2))
        count += truth.size
    if count == 0:
        raise ArgumentError(f"aucun pas de temps après la chauffe ({warmup})")
    return sq_filter / count, sq_locf / count


def _search_epsilons(cfg, realization, X, Y, pre, post, validation, seed):
    """Rechercher (eps_t, eps_o, eps_q) en log10 sur la MSE de validation."""
    search = cfg.search
    fixed = {name: getattr(cfg.model, name) for name in EPS_NAMES}
    if search.method == SearchMethod.NONE:
        return fixed, []

    def objective_from(params: Dict[str, float]) -> float:
        eps = {name: 10.0 ** params[name] for name in EPS_NAMES}
        model = _build_filter_model(cfg, realization, X, Y, pre, post, eps)
        return filter_mse(model, validation, cfg.model.warmup, seed)[0]

    if search.method == SearchMethod.GRID:
        grid = {name: search.grid.get(name, [x]) for name, x in zip(EPS_NAMES, search.x0)}
        best, trace = grid_search(objective_from, grid)
    else:
        best, trace = cma_es(
            lambda z: objective_from(dict(zip(EPS_NAMES, z))),
            search.x0,
            search.sigma0,
            search.budget,
            seed=search.seed,
            names=EPS_NAMES,
        )
    logger.info(f"[experiments.search] best log10 eps {best}")
    return {name: 10.0 ** best[name] for name in EPS_NAMES}, trace


# ============ Pipelines ============


def _filter_stage(cfg, realization, train_items, validation, test_items, seed):
    X, Y, pre, post = _state_set(cfg, realization, train_items)
    eps, trace = _search_epsilons(cfg, realization, X, Y, pre, post, validation, seed)
    model = _build_filter_model(cfg, realization, X, Y, pre, post, eps)
    mse_filter, mse_locf = filter_mse(model, test_items, cfg.model.warmup, seed)
    logger.info(
        f"[experiments.filter] mse={mse_filter:.4e} locf={mse_locf:.4e} "
        f"ratio={mse_locf / mse_filter if mse_filter > 0 else float('inf'):.2f}"
    )
    metrics = {"elto": {"mse": mse_filter}, "locf": {"mse": mse_locf}}
    return metrics, trace, model


def pendulum_filter(cfg: ExperimentConfig, seed: int, keep: bool = False):
    """Pendule : simulation, réalisation, opérateurs, recherche puis filtrage du jeu de test."""
    pcfg = cfg.system.pendulum
    train = systems.simulate_pendulum_batch(pcfg, cfg.n_train, seed)
    test = systems.simulate_pendulum_batch(pcfg, cfg.n_val, seed + 1)
    fit_part, validation = _split_validation(train, cfg.search.validation_trajectories)
    realization = _fit_realization(cfg, fit_part, seed)
    model_part = fit_part[: cfg.model.model_trajectories]
    metrics, trace, model = _filter_stage(cfg, realization, model_part, validation, test, seed)
    artifacts = None
    if keep:
        artifacts = TrialArtifacts(
            realization=realization,
            model=model,
            trace=kfilter.run_filter(model, test[0], seed=seed),
        )
    return metrics, trace, artifacts


def _tail_split(series: TimeSeries, fraction: float) -> Tuple[TimeSeries, TimeSeries]:
    cut = int(round(series.data.shape[0] * (1.0 - fraction)))
    head = series.model_copy(update={"data": series.data[:cut]})
    tail = series.model_copy(update={"data": series.data[cut:], "system_tag": f"{series.system_tag}/tail"})
    return head, tail


def csv_filter(cfg: ExperimentConfig, seed: int, keep: bool = False):
    """Série CSV externe : apprentissage sur 75 %, filtrage des 25 % restants."""
    series = systems.load_csv(cfg.input_path, cfg.input_dt, cfg.has_header, cfg.center)
    train, test = _tail_split(series, VALIDATION_FRACTION)
    fit_part, validation = _tail_split(train, VALIDATION_FRACTION)
    realization = _fit_realization(cfg, fit_part, seed)
    metrics, trace, model = _filter_stage(cfg, realization, [fit_part], [validation], [test], seed)
    artifacts = None
    if keep:
        artifacts = TrialArtifacts(
            realization=realization, model=model, trace=kfilter.run_filter(model, test, seed=seed)
        )
    return metrics, trace, artifacts


def pendulum_ablation(cfg: ExperimentConfig, seed: int, keep: bool = False):
    """Grille (époques, fenêtre) : MSE et durée d'apprentissage de la réalisation."""
    pcfg = cfg.system.pendulum
    train = systems.simulate_pendulum_batch(pcfg, cfg.n_train, seed)
    test = systems.simulate_pendulum_batch(pcfg, cfg.n_val, seed + 1)
    fit_part, _ = _split_validation(train, cfg.search.validation_trajectories)
    model_part = fit_part[: cfg.model.model_trajectories]
    eps = {name: getattr(cfg.model, name) for name in EPS_NAMES}
    metrics = {}
    for epochs in cfg.epochs_grid:
        for h in cfg.window_grid:
            variant = cfg.model_copy(update={"model": cfg.model.model_copy(update={"epochs": epochs, "h": h})})
            started = time.perf_counter()
            realization = _fit_realization(variant, fit_part, seed)
            elapsed = time.perf_counter() - started
            X, Y, pre, post = _state_set(variant, realization, model_part)
            model = _build_filter_model(variant, realization, X, Y, pre, post, eps)
            mse_filter, _ = filter_mse(model, test, cfg.model.warmup, seed)
            metrics[f"h{h}_e{epochs}"] = {"mse": mse_filter, "train_seconds": elapsed}
    return metrics, [], None


def _harmonic_metrics(detail: np.ndarray, harmonics: int) -> Dict[str, float]:
    out = {"eigen_error": float(detail.mean())}
    for m in range(harmonics):
        out[f"error_h{m + 1}"] = float(detail[2 * m : 2 * m + 2].mean())
    return out


def _elto_decomposition(cfg: ExperimentConfig, series: TimeSeries, seed: int):
    realization = _fit_realization(cfg, series, seed)
    X, Y, pre, post = _state_set(cfg, realization, series)
    kernel_x = cfg.model.kernel_x or cfg.model.kernel_y
    koopman = modes.kernel_koopman(X, kernel_x, cfg.model.koopman_eps, pre, post)
    return realization, modes.decompose(koopman, X, Y.T, series.dt)


def mode_decompositions(cfg: ExperimentConfig, series: TimeSeries, seed: int):
    """Décompositions de chaque méthode demandée sur une même série."""
    m = cfg.model
    dt = series.dt
    sl = cfg.kind == ExperimentKind.SL_MODES
    dictionary = systems.exponential_dictionary() if sl else modes.identity_dictionary
    out: Dict[str, ModeDecomposition] = {}
    realization = None
    for method in cfg.methods:
        if method == "elto":
            realization, out[method] = _elto_decomposition(cfg, series, seed)
        elif method == "dmd":
            out[method] = modes.dmd_exact(*modes.snapshot_pairs(series.data), dt=dt)
        elif method == "hankel_dmd":
            out[method] = modes.hankel_dmd(series.data, m.delay, dt)
        elif method == "edmd":
            out[method] = modes.edmd(series.data, dictionary, dt)
        elif method == "subspace_dmd":
            out[method] = modes.subspace_dmd(series.data, delay=m.delay, dt=dt)
        elif method == "subspace_dmd_dict":
            out[method] = modes.subspace_dmd(series.data, dictionary=dictionary, dt=dt)
        else:
            raise ArgumentError(f"méthode inconnue : {method}")
    return realization, out


def oscillator_modes(cfg: ExperimentConfig, seed: int, keep: bool = False):
    """VDP ou SL : erreurs de valeurs propres de chaque méthode par rapport aux valeurs attendues."""
    m = cfg.model
    if cfg.kind == ExperimentKind.VDP_MODES:
        series = systems.simulate_vdp(cfg.system.vdp, seed)
        truth = systems.true_eigs_vdp(m.harmonics, dt=cfg.system.vdp.dt)
        domain = "discrete"
    else:
        series = systems.simulate_sl(cfg.system.sl, seed)
        truth = systems.true_eigs_sl(m.harmonics, cfg.system.sl.eps_process)
        domain = "continuous"
    realization, decompositions = mode_decompositions(cfg, series, seed)
    metrics = {}
    for method, dec in decompositions.items():
        kept = modes.retain(dec, *m.retention)
        detail = modes.eigen_error_detail(kept, truth, domain)
        metrics[method] = _harmonic_metrics(detail, m.harmonics)
    artifacts = TrialArtifacts(realization=realization, decompositions=decompositions) if keep else None
    return metrics, [], artifacts


PIPELINES = {
    ExperimentKind.PENDULUM_FILTER: pendulum_filter,
    ExperimentKind.CSV_FILTER: csv_filter,
    ExperimentKind.PENDULUM_ABLATION: pendulum_ablation,
    ExperimentKind.VDP_MODES: oscillator_modes,
    ExperimentKind.SL_MODES: oscillator_modes,
}


# ============ Orchestration ============


def _run_trial(cfg: ExperimentConfig, index: int, seed: int, keep: bool) -> TrialOutcome:
    try:
        metrics, trace, artifacts = PIPELINES[cfg.kind](cfg, seed, keep)
    except (EltoError, ValueError, ArithmeticError, np.linalg.LinAlgError) as e:
        logger.error(f"[experiments.run_trial] trial {index} (seed {seed}) failed: {e}")
        return TrialOutcome(
            TrialResult(trial=index, seed=seed, failure=f"{type(e).__name__}: {e}"), [], None
        )
    return TrialOutcome(TrialResult(trial=index, seed=seed, metrics=metrics), trace, artifacts)


def aggregate_trials(trials: Sequence[TrialResult]) -> dict:
    collected: Dict[str, Dict[str, List[float]]] = {}
    for t in trials:
        for method, metrics in t.metrics.items():
            for metric, value in metrics.items():
                collected.setdefault(method, {}).setdefault(metric, []).append(value)
    return {
        method: {metric: aggregate(values) for metric, values in metrics.items()}
        for method, metrics in collected.items()
    }


def save_artifacts(artifacts: TrialArtifacts, cfg: ExperimentConfig, out_dir) -> None:
    """Écrire les artefacts du premier essai (modèle, trace, décompositions)."""
    out_dir = Path(out_dir)
    if artifacts.realization is not None:
        storage.save_realization_json(artifacts.realization, out_dir / "realization.json")
    if artifacts.model is not None:
        storage.save_model_json(artifacts.model, out_dir / "model.json")
        storage.save_model_bin(artifacts.model, out_dir / "model.bin")
    if artifacts.trace:
        storage.write_filter_trace(artifacts.trace, out_dir / "filter_trace.csv")
    for method, dec in (artifacts.decompositions or {}).items():
        storage.write_decomposition_json(
            dec, out_dir / f"decomposition_{method}.json", cfg.model_dump(mode="json")
        )


def run_experiment(cfg: ExperimentConfig, out_dir=None, fmt: str = "csv") -> ResultRecord:
    """Exécuter tous les essais d'une expérience et construire le ResultRecord.

    Les essais tournent en parallèle (joblib, ELTO_THREADS) ; un essai en échec
    est annoté sans interrompre les autres.
    """
    started = time.perf_counter()
    seeds = trial_seeds(cfg)
    n_jobs = max(1, min(THREADS, len(seeds)))
    logger.info(
        f"[experiments.run_experiment] {cfg.name} ({cfg.kind.value}), "
        f"{len(seeds)} trial(s), {n_jobs} worker(s)"
    )
    outcomes = Parallel(n_jobs=n_jobs)(
        delayed(_run_trial)(cfg, i, seed, out_dir is not None and i == 0)
        for i, seed in enumerate(seeds)
    )
    trials = [o.result for o in outcomes]
    noise = _noise_level(cfg)
    record = ResultRecord(
        experiment=cfg.name,
        kind=cfg.kind,
        config=cfg.model_dump(mode="json"),
        noise=noise,
        trials=trials,
        aggregate=aggregate_trials(trials),
        wall_clock_seconds=time.perf_counter() - started,
        search_trace=outcomes[0].search_trace if outcomes else [],
    )
    if out_dir is not None:
        storage.write_results(record, out_dir, fmt)
        if outcomes and outcomes[0].artifacts is not None:
            save_artifacts(outcomes[0].artifacts, cfg, out_dir)
    return record


def _noise_level(cfg: ExperimentConfig) -> Optional[float]:
    if cfg.kind == ExperimentKind.VDP_MODES:
        return cfg.system.vdp.obs_noise_std
    if cfg.kind == ExperimentKind.SL_MODES:
        return cfg.system.sl.eps_process
    if cfg.kind in (ExperimentKind.PENDULUM_FILTER, ExperimentKind.PENDULUM_ABLATION):
        return cfg.system.pendulum.n_p
    return None


def fit_model(cfg: ExperimentConfig, out_dir) -> Tuple[RealizationModel, Optional[EltoFilterModel]]:
    """Apprendre la réalisation (et le modèle de filtrage) du premier essai, sans évaluation."""
    seed = cfg.seed
    if cfg.kind == ExperimentKind.CSV_FILTER:
        series = systems.load_csv(cfg.input_path, cfg.input_dt, cfg.has_header, cfg.center)
        items = [series]
    elif cfg.kind in (ExperimentKind.PENDULUM_FILTER, ExperimentKind.PENDULUM_ABLATION):
        items = systems.simulate_pendulum_batch(cfg.system.pendulum, cfg.n_train, seed)
    elif cfg.kind == ExperimentKind.VDP_MODES:
        items = [systems.simulate_vdp(cfg.system.vdp, seed)]
    else:
        items = [systems.simulate_sl(cfg.system.sl, seed)]
    realization = _fit_realization(cfg, items, seed)
    model = None
    if cfg.kind in FILTER_KINDS:
        X, Y, pre, post = _state_set(cfg, realization, items[: cfg.model.model_trajectories])
        eps = {name: getattr(cfg.model, name) for name in EPS_NAMES}
        model = _build_filter_model(cfg, realization, X, Y, pre, post, eps)
    save_artifacts(TrialArtifacts(realization=realization, model=model), cfg, out_dir)
    return realization, model
