"""Stochastic-gradient training: sample segments, filter, backpropagate, Nadam."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple
import logging
import time

import numpy as np
import pandas as pd
from tqdm import tqdm

from configuration.experiment import FilterInit, TrainConfig
from estimation.backprop import GradientReport, backward_general, backward_network, reduce_reports
from estimation.ekf import FilterTrajectory, ObservationSetup, filter_segment
from estimation.errors import (
    FilterDivergedError,
    InvalidInputError,
    NonFiniteGradientError,
    SingularInnovationError,
    TrainingDivergedError,
)
from estimation.model import EiBrainModel, NetworkModel
from estimation.serialization import save_model

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class NadamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    rate: float = 0.001
    beta1: float = 0.98
    beta2: float = 0.95
    epsilon: float = 1e-8

    @classmethod
    def zeros(cls, size: int, rate=0.001, beta1=0.98, beta2=0.95, epsilon=1e-8) -> "NadamState":
        return cls(np.zeros(size), np.zeros(size), 0, rate, beta1, beta2, epsilon)


class TrainResult(NamedTuple):
    model: object
    history: pd.DataFrame


def sample_start_times(horizon: int, k: int, batch_size: int, rng: np.random.Generator) -> list[int]:
    """``batch_size`` independent draws, uniform over ``[0, horizon - k]``."""
    if horizon < k:
        raise InvalidInputError(f"horizon={horizon} is shorter than the segment length k={k}")
    if batch_size < 1:
        raise InvalidInputError("batch_size must be at least 1")
    return [int(t) for t in rng.integers(0, horizon - k + 1, size=batch_size)]


def nadam_step(state: NadamState, grad: np.ndarray, params: np.ndarray,
               iteration: int | None = None) -> tuple[NadamState, np.ndarray]:
    """Nadam with bias-corrected Nesterov momentum (dense update)."""
    grad = np.asarray(grad, dtype=float)
    params = np.asarray(params, dtype=float)
    if grad.shape != params.shape or grad.shape != state.first_moment.shape:
        raise InvalidInputError(
            f"Gradient {grad.shape}, parameters {params.shape} and moments "
            f"{state.first_moment.shape} must have the same shape"
        )
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError(state.step_count + 1 if iteration is None else iteration)

    b1, b2 = state.beta1, state.beta2
    t = state.step_count + 1
    m = b1 * state.first_moment + (1.0 - b1) * grad
    v = b2 * state.second_moment + (1.0 - b2) * grad**2
    m_hat = b1 * m / (1.0 - b1 ** (t + 1)) + (1.0 - b1) * grad / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    updated = params - state.rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return replace(state, first_moment=m, second_moment=v, step_count=t), updated


def initialize_parameters(template, rng: np.random.Generator, init_scale: float = 0.01):
    """Starting point for training: free B entries ~ N(0, init_scale / n), everything else as given."""
    if isinstance(template, NetworkModel) and "B.free" in template.layout.names:
        values = template.pack().values.copy()
        sl = template.layout.slices["B.free"]
        values[sl] = rng.normal(0.0, np.sqrt(init_scale / template.n_states), size=sl.stop - sl.start)
        return template.unpack(values)
    if isinstance(template, EiBrainModel):
        values = template.pack().values.copy()
        for name in ("Wp", "Wr"):
            if name in template.layout.names:
                sl = template.layout.slices[name]
                values[sl] = rng.normal(0.0, np.sqrt(init_scale / template.n_regions), size=sl.stop - sl.start)
        return template.unpack(values)
    return template


def _pick_backward(model, gradient_path: str):
    if gradient_path == "general":
        return backward_general
    if gradient_path == "network" or isinstance(model, (NetworkModel, EiBrainModel)):
        return backward_network
    return backward_general


def trace_segment(model, obs: ObservationSetup, y: np.ndarray, t0: int, k: int, warmup: int,
                  x0: np.ndarray, p0: np.ndarray, gradient_path: str = "auto",
                  record_adjoints: bool = False) -> tuple[FilterTrajectory, GradientReport]:
    """Filter ``y[t0 : t0 + k]`` and backpropagate through it."""
    segment = y[t0 : t0 + k]
    traj, objective = filter_segment(model, obs, segment, x0, p0, warmup)
    backward = _pick_backward(model, gradient_path)
    report = backward(traj, model, obs, segment, t0=t0, record_adjoints=record_adjoints, objective=objective)
    return traj, report


def evaluate_segment(model, obs: ObservationSetup, y: np.ndarray, t0: int, k: int, warmup: int,
                     x0: np.ndarray, p0: np.ndarray, gradient_path: str = "auto") -> GradientReport:
    return trace_segment(model, obs, y, t0, k, warmup, x0, p0, gradient_path)[1]


def train(model, obs: ObservationSetup, y: np.ndarray, config: TrainConfig,
          filter_init: FilterInit | None = None, checkpoint_path: str | Path | None = None,
          progress: bool = False) -> TrainResult:
    """Fit the trainable parameters of ``model`` to the measurements ``y``."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    filter_init = filter_init or FilterInit()
    k, warmup = config.segment_length, config.warmup
    if y.shape[0] < k:
        raise InvalidInputError(f"Data horizon {y.shape[0]} is shorter than segment_length {k}")

    rng = np.random.default_rng(config.seed)
    n = model.n_states
    p0 = filter_init.p0_scale * np.eye(n)
    params = model.pack().values
    state = NadamState.zeros(params.size, config.rate, config.beta1, config.beta2, config.epsilon)
    rows = []
    executor = ThreadPoolExecutor(max_workers=config.jobs) if config.jobs > 1 else None

    def checkpoint(current, iteration):
        if checkpoint_path is None:
            return None
        return save_model(current, checkpoint_path, metadata={"iteration": iteration})

    try:
        for iteration in tqdm(range(1, config.n_iterations + 1), disable=not progress, desc="train"):
            started = time.perf_counter()
            starts = sample_start_times(y.shape[0], k, config.batch_size, rng)
            x0s = rng.normal(0.0, filter_init.x0_std, size=(len(starts), n))

            def run(job, current=model):
                t0, x0 = job
                return evaluate_segment(current, obs, y, t0, k, warmup, x0, p0, config.gradient_path)

            try:
                jobs = list(zip(starts, x0s))
                reports = list(executor.map(run, jobs)) if executor else [run(job) for job in jobs]
                report = reduce_reports(reports)
                if not np.isfinite(report.objective):
                    raise FilterDivergedError(k)
                state, params = nadam_step(state, report.grad, params, iteration)
            except (FilterDivergedError, SingularInnovationError, NonFiniteGradientError) as e:
                logger.error(f"Training diverged at iteration {iteration}: {e}")
                raise TrainingDivergedError(iteration, model, checkpoint(model, iteration - 1)) from e

            model = model.unpack(params)
            if config.rate_decay != 1.0:
                state = replace(state, rate=state.rate * config.rate_decay)
            rows.append(
                {
                    "iteration": iteration,
                    "objective": report.objective,
                    "grad_norm": float(np.linalg.norm(report.grad)),
                    "wall_time": time.perf_counter() - started,
                }
            )
            if config.checkpoint_every and iteration % config.checkpoint_every == 0:
                path = checkpoint(model, iteration)
                if path is not None:
                    logger.info(f"Checkpoint written to {path} at iteration {iteration}")
    finally:
        if executor:
            executor.shutdown()

    history = pd.DataFrame(rows, columns=["iteration", "objective", "grad_norm", "wall_time"])
    return TrainResult(model, history)
