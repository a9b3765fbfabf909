"""Scoring of fitted models: parameter recovery, held-out state estimation, timing."""

from typing import Literal
import logging

import numpy as np
from pydantic import BaseModel, Field
from scipy import stats

from configuration.experiment import FilterInit, JointTuning
from estimation.ekf import ObservationSetup, filter_segment
from estimation.errors import (
    FilterDivergedError,
    InvalidInputError,
    SingularInnovationError,
    UndefinedCorrelationError,
)
from estimation.joint_filters import ukf_filter
from estimation.model import EiBrainModel

logger = logging.getLogger(__name__)

SCORE_COLUMNS = [
    "method",
    "n",
    "replicate",
    "seed",
    "param_corr",
    "param_rmse",
    "state_mse",
    "objective_final",
    "crossval_diverged",
]


class ScoreCard(BaseModel):
    method: str
    n: int = Field(ge=1)
    replicate: int = Field(0, ge=0)
    seed: int = Field(ge=0)
    param_corr: float = Field(ge=-1.0, le=1.0)
    param_rmse: float = Field(ge=0)
    state_mse: float = Field(ge=0)
    objective_final: float
    crossval_diverged: bool = False
    wall_time_per_iteration: float = Field(0.0, ge=0)
    steps: int = Field(0, ge=0)

    def row(self) -> dict:
        """Deterministic columns only; timings are reported separately."""
        return self.model_dump(include=set(SCORE_COLUMNS))


def free_parameters(model) -> tuple[np.ndarray, np.ndarray]:
    """Connectivity values and free mask used for recovery scoring."""
    network = model.network if isinstance(model, EiBrainModel) else model
    return network.b_matrix, network.free_mask


def parameter_score(fitted, truth, mask) -> tuple[float, float]:
    """Pearson correlation and RMSE over the entries selected by ``mask``."""
    fitted = np.asarray(fitted, dtype=float)
    truth = np.asarray(truth, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if fitted.shape != truth.shape or mask.shape != truth.shape:
        raise InvalidInputError("Fitted values, truth and mask must share a shape")
    a, b = fitted[mask], truth[mask]
    if a.size < 2:
        raise UndefinedCorrelationError(f"Correlation needs at least 2 free entries, got {a.size}")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise UndefinedCorrelationError("Correlation is undefined for a constant vector")
    corr = float(np.clip(stats.pearsonr(a, b).statistic, -1.0, 1.0))
    rmse = float(np.sqrt(np.mean((a - b) ** 2)))
    return corr, rmse


def score_models(fitted, truth) -> tuple[float, float]:
    fitted_b, _ = free_parameters(fitted)
    truth_b, mask = free_parameters(truth)
    return parameter_score(fitted_b, truth_b, mask)


def estimate_states(model, obs: ObservationSetup, measurements: np.ndarray,
                    estimator: Literal["EKF", "UKF"] = "EKF",
                    filter_init: FilterInit | None = None,
                    tuning: JointTuning | None = None) -> np.ndarray:
    """Filtered means from ``x_0 = 0, P_0 = p0_scale * I`` for every method alike."""
    filter_init = filter_init or FilterInit()
    n = model.n_states
    x0 = np.zeros(n)
    if estimator == "EKF":
        traj, _ = filter_segment(model, obs, measurements, x0, filter_init.p0_scale * np.eye(n), score=False)
        return traj.x_post
    if estimator == "UKF":
        return ukf_filter(model, obs, measurements, tuning, filter_init, x0)
    raise InvalidInputError(f"Unknown state estimator {estimator!r}")


def crossval_state_mse(fitted, obs: ObservationSetup, fresh, estimator: Literal["EKF", "UKF"] = "EKF",
                       filter_init: FilterInit | None = None,
                       tuning: JointTuning | None = None) -> float:
    """Mean squared state error of ``fitted`` on held-out data; ``inf`` if the filter diverges."""
    try:
        estimates = estimate_states(fitted, obs, fresh.measurements, estimator, filter_init, tuning)
    except (FilterDivergedError, SingularInnovationError) as e:
        logger.warning(f"Cross-validation {estimator} diverged: {e}")
        return float("inf")
    if not np.all(np.isfinite(estimates)):
        logger.warning(f"Cross-validation {estimator} produced non-finite estimates")
        return float("inf")
    return float(np.mean((estimates - fresh.states) ** 2))


def median_step_time(step_times, discard: int = 1) -> float:
    """Median per-iteration wall time with the first ``discard`` warm-up iterations dropped."""
    times = np.asarray(step_times, dtype=float)
    if times.size > discard:
        times = times[discard:]
    if times.size == 0:
        return 0.0
    return float(np.median(times))


def quartile_summary(values) -> dict:
    """Mean and first/third quartiles (linear interpolation) of finite values."""
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    if values.size == 0:
        return {"mean": np.nan, "q1": np.nan, "q3": np.nan, "count": 0}
    q1, q3 = np.percentile(values, [25, 75], method="linear")
    return {"mean": float(np.mean(values)), "q1": float(q1), "q3": float(q3), "count": int(values.size)}
