"""Command-line entry point for dual-estimation benchmarks.

    python harness.py generate  --sizes 10 --seed 3 --out data/n10
    python harness.py fit       --data data/n10 --method BP --out fits/n10
    python harness.py score     --data data/n10 --model fits/n10/BP_model.json
    python harness.py campaign  --config campaign.json --jobs 4 --out results
    python harness.py plot-data --out results

Exit codes: 0 success, 1 at least one run failed, 2 invalid configuration.
"""

from pathlib import Path
import argparse
import json
import logging
import sys

import pandas as pd
from pydantic import ValidationError

from configuration.config import config as env_config
from configuration.experiment import ExperimentConfig
from create_plot_data import emit_plot_data
from data_generation import fresh_data, generate_ground_truth, load_ground_truth, save_ground_truth
from estimation.errors import DualEstimationError
from estimation.metrics import SCORE_COLUMNS, ScoreCard, crossval_state_mse, score_models
from estimation.serialization import load_model, save_model, write_table
from process_campaign import (
    HELD_OUT_SEED,
    INIT_SEED,
    TRAIN_SEED,
    campaign_errors,
    fit_method,
    held_out_objective,
    initial_template,
    provenance,
    run_experiment,
    write_debug_dumps,
)

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_RUN_ERRORS, EXIT_CONFIG_ERROR = 0, 1, 2


class ConfigurationError(Exception):
    pass


def setup_logging(level: str, log_file: str | None):
    handlers = [logging.StreamHandler(sys.stdout)]
    if log_file:
        handlers.insert(0, logging.FileHandler(log_file))
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=handlers,
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment configuration")
    common.add_argument("--seed", type=int, help="Master seed (overrides the config)")
    common.add_argument("--out", type=Path, help="Output directory")
    common.add_argument("--methods", nargs="+", choices=["BP", "jEKF", "jUKF"])
    common.add_argument("--sizes", nargs="+", type=int, help="Network sizes")
    common.add_argument("--jobs", type=int, help="Worker threads")
    common.add_argument("--paper-scale", action="store_true", help="Start from the published budgets")
    common.add_argument("--log-level", default=env_config.LOG_LEVEL)
    common.add_argument("--log-file", default=env_config.LOG_FILE)

    parser = argparse.ArgumentParser(description="Dual state and parameter estimation benchmarks.")
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("generate", parents=[common], help="Simulate a ground truth")
    fit = commands.add_parser("fit", parents=[common], help="Fit one method to a ground truth")
    fit.add_argument("--data", type=Path, required=True)
    fit.add_argument("--method", choices=["BP", "jEKF", "jUKF"], default="BP")
    fit.add_argument(
        "--dump-trajectories",
        action="store_true",
        help="Also write the EKF trajectory and backward-pass adjoints of the fitted model on the first segment",
    )
    score = commands.add_parser("score", parents=[common], help="Score a fitted model")
    score.add_argument("--data", type=Path, required=True)
    score.add_argument("--model", type=Path, required=True)
    commands.add_parser("campaign", parents=[common], help="Run a full benchmark campaign")
    commands.add_parser("plot-data", parents=[common], help="Summarize a campaign for plotting")
    return parser


def load_config(args) -> ExperimentConfig:
    """Defaults (or the published preset), then the config file, then CLI flags."""
    base = ExperimentConfig.paper_scale() if args.paper_scale else ExperimentConfig()
    values = base.model_dump()
    values["output_dir"] = env_config.RESULTS_DIR
    values["jobs"] = env_config.JOBS
    if args.config is not None:
        try:
            from_file = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"Cannot read config {args.config}: {e}") from e
        if not isinstance(from_file, dict):
            raise ConfigurationError(f"Config {args.config} must hold a JSON object")
        values.update(from_file)
    overrides = {
        "master_seed": args.seed,
        "output_dir": str(args.out) if args.out is not None else None,
        "methods": args.methods,
        "sizes": args.sizes,
        "jobs": args.jobs,
    }
    values.update({key: value for key, value in overrides.items() if value is not None})
    return ExperimentConfig.model_validate(values)


def cmd_generate(config: ExperimentConfig) -> int:
    n = config.sizes[0]
    spec = config.simulation.model_copy(update={"n_nodes": n, "seed": config.master_seed})
    truth = generate_ground_truth(spec)
    out = save_ground_truth(truth, config.output_dir, provenance(config))
    logger.info(f"Ground truth for n={n} written to {out}")
    return EXIT_OK


def cmd_fit(config: ExperimentConfig, data: Path, method: str, dump_trajectories: bool = False) -> int:
    truth = load_ground_truth(data)
    n = truth.model.n_states
    template = initial_template(truth, config, config.derive_seed(n, 0, INIT_SEED))
    fit = fit_method(method, template, truth, config, config.derive_seed(n, 0, TRAIN_SEED), progress=True)
    out = Path(config.output_dir)
    meta = provenance(config)
    save_model(fit.model, out / f"{method}_model.json", metadata=meta)
    write_table(fit.loss, out / f"{method}_loss.csv", meta)
    if dump_trajectories:
        write_debug_dumps(fit.model, truth, config, out, method)
    logger.info(f"{method} fit written to {out}")
    return EXIT_OK


def cmd_score(config: ExperimentConfig, data: Path, model_path: Path) -> int:
    truth = load_ground_truth(data)
    fitted = load_model(model_path)
    n = truth.model.n_states
    spec = config.simulation.model_copy(
        update={"n_nodes": n, "seed": config.derive_seed(n, 0, HELD_OUT_SEED), "horizon": config.crossval_horizon}
    )
    fresh = fresh_data(truth, spec)
    corr, rmse = score_models(fitted, truth.model)
    state_mse = crossval_state_mse(fitted, truth.obs, fresh, config.crossval_estimator, config.filter_init, config.joint)
    card = ScoreCard(
        method=model_path.stem.removesuffix("_model"),
        n=n,
        seed=config.master_seed,
        param_corr=corr,
        param_rmse=rmse,
        state_mse=state_mse,
        objective_final=held_out_objective(fitted, truth, fresh, config),
        crossval_diverged=state_mse == float("inf"),
    )
    out = write_table(
        pd.DataFrame([card.row()], columns=SCORE_COLUMNS), Path(config.output_dir) / "score.csv", provenance(config)
    )
    logger.info(f"param_corr={corr:.4f} param_rmse={rmse:.4g} state_mse={state_mse:.4g} -> {out}")
    return EXIT_OK


def cmd_campaign(config: ExperimentConfig) -> int:
    out = run_experiment(config)
    errors = campaign_errors(out)
    if len(errors):
        logger.error(f"{len(errors)} run(s) failed; see {out / 'errors.csv'}")
        return EXIT_RUN_ERRORS
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level, args.log_file)
    try:
        config = load_config(args)
    except (ValidationError, ConfigurationError) as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_CONFIG_ERROR

    try:
        if args.command == "generate":
            return cmd_generate(config)
        if args.command == "fit":
            return cmd_fit(config, args.data, args.method, args.dump_trajectories)
        if args.command == "score":
            return cmd_score(config, args.data, args.model)
        if args.command == "campaign":
            return cmd_campaign(config)
        if args.command == "plot-data":
            emit_plot_data(config.output_dir)
            return EXIT_OK
    except DualEstimationError as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_RUN_ERRORS
    parser.error(f"Unknown command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
