"""Benchmark campaigns: generate ground truths, fit every method, score, persist."""

from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple
import logging
import sys
import time

import numpy as np
import pandas as pd
from tqdm import tqdm

from configuration.experiment import ExperimentConfig
from data_generation import GroundTruth, generate_ground_truth
from estimation.backprop import dump_adjoints
from estimation.ekf import filter_segment, trajectory_frame
from estimation.errors import FilterDivergedError, SingularInnovationError
from estimation.joint_filters import jekf_run, jukf_run
from estimation.metrics import (
    SCORE_COLUMNS,
    ScoreCard,
    crossval_state_mse,
    estimate_states,
    median_step_time,
    score_models,
)
from estimation.optimizer import initialize_parameters, trace_segment, train
from estimation.serialization import read_table, save_model, write_table

logger = logging.getLogger(__name__)

TIMING_COLUMNS = ["method", "n", "replicate", "wall_time_per_iteration", "steps", "total_time"]
ERROR_COLUMNS = ["n", "replicate", "method", "error"]


class FitOutcome(NamedTuple):
    model: object
    loss: pd.DataFrame | None
    step_times: np.ndarray


@dataclass
class RunOutcome:
    n: int
    replicate: int
    cards: list[ScoreCard] = field(default_factory=list)
    timings: list[dict] = field(default_factory=list)
    errors: list[dict] = field(default_factory=list)


# Sub-seed purposes for ExperimentConfig.derive_seed
TRUTH_SEED, HELD_OUT_SEED, INIT_SEED, TRAIN_SEED = 0, 1, 2, 3


def provenance(config: ExperimentConfig) -> dict:
    return {"config_hash": config.config_hash(), "seed": config.master_seed}


def initial_template(truth: GroundTruth, config: ExperimentConfig, seed: int):
    """Shared starting point for every method: true structure, random free weights."""
    template = replace(truth.model, trainable=config.train.trainable)
    return initialize_parameters(template, np.random.default_rng(seed), config.train.init_scale)


def fit_method(method: str, template, truth: GroundTruth, config: ExperimentConfig,
               train_seed: int, progress: bool = False) -> FitOutcome:
    if method == "BP":
        train_config = config.train.model_copy(update={"seed": train_seed})
        result = train(template, truth.obs, truth.measurements, train_config, config.filter_init,
                       progress=progress)
        return FitOutcome(result.model, result.history, result.history["wall_time"].to_numpy())

    run = {"jEKF": jekf_run, "jUKF": jukf_run}[method]
    y = truth.measurements[: config.joint.horizon]
    result = run(template, truth.obs, y, config.joint, config.filter_init)
    logger.info(
        f"{method} finished {result.n_steps} steps, parameter process variance {result.param_process_var:.3e}"
    )
    m = truth.obs.m
    loss = pd.DataFrame(
        {
            "step": np.arange(1, result.n_steps + 1),
            "objective": np.einsum("ti,ij,tj->t", result.innovations, m, result.innovations),
        }
    )
    return FitOutcome(result.model, loss, result.step_times)


def write_debug_dumps(model, truth: GroundTruth, config: ExperimentConfig, out: Path, method: str) -> list[Path]:
    """EKF trajectory and backward-pass adjoints of ``model`` on the first training segment."""
    n = model.n_states
    traj, report = trace_segment(
        model,
        truth.obs,
        truth.measurements,
        0,
        config.train.segment_length,
        config.train.warmup,
        np.zeros(n),
        config.filter_init.p0_scale * np.eye(n),
        config.train.gradient_path,
        record_adjoints=True,
    )
    out.mkdir(parents=True, exist_ok=True)
    trajectory = write_table(trajectory_frame(traj), out / f"{method}_trajectory.csv", provenance(config))
    adjoints = dump_adjoints(report, out / f"{method}_adjoints.csv")
    logger.info(f"Debug dumps for {method}: {trajectory}, {adjoints}")
    return [trajectory, adjoints]


def held_out_objective(model, truth: GroundTruth, fresh: GroundTruth, config: ExperimentConfig) -> float:
    n = model.n_states
    try:
        _, objective = filter_segment(
            model,
            truth.obs,
            fresh.measurements,
            np.zeros(n),
            config.filter_init.p0_scale * np.eye(n),
            warmup=min(config.train.warmup, fresh.horizon - 1),
        )
    except (FilterDivergedError, SingularInnovationError) as e:
        logger.warning(f"Held-out objective diverged: {e}")
        return float("inf")
    return objective


def trace_frame(fitted: dict, truth: GroundTruth, fresh: GroundTruth, config: ExperimentConfig) -> pd.DataFrame:
    """True and EKF-estimated held-out states for the first ``trace_steps`` steps."""
    steps = min(config.trace_steps, fresh.horizon)
    columns = {"step": np.arange(1, steps + 1)}
    for i in range(fresh.states.shape[1]):
        columns[f"truth_{i}"] = fresh.states[:steps, i]
    for method, model in fitted.items():
        try:
            estimates = estimate_states(model, truth.obs, fresh.measurements[:steps], "EKF", config.filter_init)
        except (FilterDivergedError, SingularInnovationError):
            estimates = np.full((steps, model.n_states), np.nan)
        for i in range(estimates.shape[1]):
            columns[f"{method}_{i}"] = estimates[:, i]
    return pd.DataFrame(columns)


def run_single(config: ExperimentConfig, n: int, replicate: int, out: Path, progress: bool = False) -> RunOutcome:
    """One (size, replicate) cell: every method sees the same truth, data and initialization."""
    outcome = RunOutcome(n, replicate)
    run_dir = out / "runs" / f"n{n}_r{replicate}"
    meta = provenance(config)

    truth_seed = config.derive_seed(n, replicate, TRUTH_SEED)
    horizon = max(config.simulation.horizon, config.joint.horizon if set(config.methods) - {"BP"} else 0)
    spec = config.simulation.model_copy(update={"n_nodes": n, "seed": truth_seed, "horizon": horizon})
    truth = generate_ground_truth(spec)
    held_out_spec = spec.model_copy(
        update={"seed": config.derive_seed(n, replicate, HELD_OUT_SEED), "horizon": config.crossval_horizon}
    )
    fresh = generate_ground_truth(held_out_spec, model=truth.model, obs=truth.obs)
    template = initial_template(truth, config, config.derive_seed(n, replicate, INIT_SEED))
    save_model(truth.model, run_dir / "truth_model.json", metadata={**meta, "flagged": list(truth.flagged)})

    fitted = {}
    for method in config.methods:
        try:
            started = time.perf_counter()
            fit = fit_method(method, template, truth, config, config.derive_seed(n, replicate, TRAIN_SEED), progress)
            total = time.perf_counter() - started
            corr, rmse = score_models(fit.model, truth.model)
            state_mse = crossval_state_mse(
                fit.model, truth.obs, fresh, config.crossval_estimator, config.filter_init, config.joint
            )
            card = ScoreCard(
                method=method,
                n=n,
                replicate=replicate,
                seed=truth_seed,
                param_corr=corr,
                param_rmse=rmse,
                state_mse=state_mse,
                objective_final=held_out_objective(fit.model, truth, fresh, config),
                crossval_diverged=not np.isfinite(state_mse),
                wall_time_per_iteration=median_step_time(fit.step_times),
                steps=len(fit.step_times),
            )
        except Exception as e:
            logger.error(f"Run n={n} replicate={replicate} method={method} failed: {str(e)}")
            outcome.errors.append({"n": n, "replicate": replicate, "method": method, "error": str(e)})
            continue

        fitted[method] = fit.model
        save_model(fit.model, run_dir / f"{method}_model.json", metadata=meta)
        if fit.loss is not None:
            write_table(fit.loss, run_dir / f"{method}_loss.csv", meta)
        outcome.cards.append(card)
        outcome.timings.append(
            {
                "method": method,
                "n": n,
                "replicate": replicate,
                "wall_time_per_iteration": card.wall_time_per_iteration,
                "steps": card.steps,
                "total_time": total,
            }
        )
        logger.info(f"n={n} replicate={replicate} {method}: corr={corr:.3f} state_mse={state_mse:.4g}")

    if fitted:
        write_table(trace_frame(fitted, truth, fresh, config), run_dir / "trace.csv", meta)
    return outcome


def _ordered(rows: list[dict], columns: list[str], method_order: list[str]) -> pd.DataFrame:
    frame = pd.DataFrame(rows, columns=columns)
    if frame.empty:
        return frame
    frame["_method"] = frame["method"].map({m: i for i, m in enumerate(method_order)})
    frame = frame.sort_values(["n", "replicate", "_method"], kind="stable").drop(columns="_method")
    return frame.reset_index(drop=True)


def run_experiment(config: ExperimentConfig, progress: bool = True) -> Path:
    """Run every (size, replicate) cell and write the results directory."""
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config.model_dump_json(indent=2))
    cells = [(n, rep) for n in config.sizes for rep in range(config.replicates_for(n))]
    logger.info(f"Starting campaign {config.config_hash()} with {len(cells)} run(s) in {out}")

    outcomes = []
    with ThreadPoolExecutor(max_workers=config.jobs) as executor:
        future_to_cell = {
            executor.submit(run_single, config, n, rep, out, progress and config.jobs == 1): (n, rep)
            for n, rep in cells
        }
        for future in tqdm(as_completed(future_to_cell), total=len(cells), disable=not progress, desc="campaign"):
            n, rep = future_to_cell[future]
            try:
                outcomes.append(future.result())
                logger.info(f"Completed run n={n} replicate={rep}")
            except Exception as e:
                logger.error(f"Error in run n={n} replicate={rep}: {str(e)}")
                outcomes.append(
                    RunOutcome(n, rep, errors=[{"n": n, "replicate": rep, "method": "", "error": str(e)}])
                )

    meta = provenance(config)
    cards = [card.row() for o in outcomes for card in o.cards]
    timings = [row for o in outcomes for row in o.timings]
    errors = sorted((row for o in outcomes for row in o.errors), key=lambda r: (r["n"], r["replicate"], r["method"]))
    write_table(_ordered(cards, SCORE_COLUMNS, config.methods), out / "scorecards.csv", meta)
    write_table(_ordered(timings, TIMING_COLUMNS, config.methods), out / "timings.csv", meta)
    write_table(pd.DataFrame(errors, columns=ERROR_COLUMNS), out / "errors.csv", meta)
    logger.info(f"Campaign finished: {len(cards)} scorecard(s), {len(errors)} error(s)")
    return out


def campaign_errors(directory: str | Path) -> pd.DataFrame:
    return read_table(Path(directory) / "errors.csv")


if __name__ == "__main__":
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[logging.StreamHandler(sys.stdout)],
    )
    run_experiment(ExperimentConfig())
