"""Point d'entrée en ligne de commande : elto fit|filter|modes|sweep|search."""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from elto.api.experiments import (
    FILTER_KINDS,
    MODE_KINDS,
    fit_model,
    load_experiment_config,
    run_experiment,
)
from elto.api.sweeps import noise_sweep
from elto.config import DEBUG, OUTPUT_DIR
from elto.exceptions import EltoError
from elto.models import ExperimentConfig, SearchMethod

logger = logging.getLogger("elto")

EXIT_OK = 0
EXIT_FAILED_TRIALS = 1
EXIT_BAD_INPUT = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="elto",
        description="Opérateurs de transfert latents plongés : filtrage à noyaux et décomposition de Koopman.",
    )
    parser.add_argument("command", choices=["fit", "filter", "modes", "sweep", "search"])
    parser.add_argument("--config", required=True, type=Path, help="configuration JSON ou TOML")
    parser.add_argument("--out", type=Path, default=None, help=f"répertoire de sortie (défaut : {OUTPUT_DIR})")
    parser.add_argument("--seed", type=int, default=None, help="graine de base (remplace la configuration)")
    parser.add_argument("--trials", type=int, default=None, help="nombre d'essais (remplace la configuration)")
    parser.add_argument("--format", choices=["csv", "json"], default="csv", dest="fmt")
    return parser


def apply_overrides(cfg: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    updates = {}
    if args.seed is not None:
        if args.seed < 0:
            raise EltoError(f"--seed doit être positif, reçu {args.seed}")
        updates["seed"] = args.seed
    if args.trials is not None:
        if args.trials < 1:
            raise EltoError(f"--trials doit être >= 1, reçu {args.trials}")
        updates["trials"] = args.trials
    return cfg.model_copy(update=updates) if updates else cfg


def _check_kind(cfg: ExperimentConfig, allowed, command: str) -> None:
    if cfg.kind not in allowed:
        kinds = ", ".join(k.value for k in allowed)
        raise EltoError(f"la commande '{command}' attend une expérience parmi : {kinds}")


def run(args: argparse.Namespace) -> int:
    cfg = apply_overrides(load_experiment_config(args.config), args)
    out_dir = args.out or cfg.output or OUTPUT_DIR

    if args.command == "fit":
        fit_model(cfg, out_dir)
        print(f"[main] modèle écrit dans {out_dir}")
        return EXIT_OK

    if args.command == "sweep":
        if not cfg.noise_values:
            raise EltoError("la configuration ne définit aucun niveau de bruit (noise_values)")
        records = noise_sweep(cfg, cfg.noise_values, cfg.methods, out_dir, args.fmt)
        failed = any(r.failed for r in records)
    else:
        if args.command == "modes":
            _check_kind(cfg, MODE_KINDS, "modes")
        else:
            _check_kind(cfg, FILTER_KINDS, args.command)
        if args.command == "search" and cfg.search.method == SearchMethod.NONE:
            cfg = cfg.model_copy(
                update={"search": cfg.search.model_copy(update={"method": SearchMethod.CMAES})}
            )
        record = run_experiment(cfg, out_dir, args.fmt)
        for method, metrics in record.aggregate.items():
            summary = ", ".join(f"{k}={v.mean:.4g}±{v.std:.2g}" for k, v in metrics.items())
            print(f"[main] {method}: {summary}")
        if record.search_trace:
            best = min(record.search_trace, key=lambda p: p.score)
            print(f"[main] meilleurs hyperparamètres (log10) : {best.params} score={best.score:.4g}")
        failed = record.failed

    print(f"[main] résultats écrits dans {out_dir}")
    if failed:
        logger.error("[main] au moins un essai a échoué, voir results.json")
        return EXIT_FAILED_TRIALS
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(
        level=logging.DEBUG if DEBUG else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except EltoError as e:
        logger.error(f"[main] {e}")
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
