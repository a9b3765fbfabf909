"""Forward Extended Kalman Filter over a measurement segment.

The filter records every intermediate quantity the backward pass needs, and
evaluates the Mahalanobis prediction-error objective

    Omega = 1 / (k - warmup) * sum_{t > warmup} z_t^T M z_t,   z_t = y_t - H x_{t|t-1}.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import pandas as pd
from scipy import linalg

from estimation.errors import (
    FilterDivergedError,
    InvalidInputError,
    SingularInnovationError,
)
from estimation.linalg import symmetrize


@dataclass(frozen=True, eq=False)
class ObservationSetup:
    """Measurement matrix and noise covariances of one run (time invariant)."""

    h: np.ndarray
    q: np.ndarray
    r: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        if not self.weight > 0:
            raise InvalidInputError("Objective weight must be positive")
        h = np.atleast_2d(np.asarray(self.h, dtype=float))
        p, n = h.shape
        q = np.asarray(self.q, dtype=float)
        r = np.asarray(self.r, dtype=float)
        if q.shape != (n, n):
            raise InvalidInputError(f"Q has shape {q.shape}, expected ({n}, {n})")
        if r.shape != (p, p):
            raise InvalidInputError(f"R has shape {r.shape}, expected ({p}, {p})")
        for name, matrix in (("Q", q), ("R", r)):
            if not np.allclose(matrix, matrix.T, atol=1e-12):
                raise InvalidInputError(f"{name} must be symmetric")
            if np.min(linalg.eigvalsh(matrix)) < -1e-10 * max(1.0, np.abs(matrix).max()):
                raise InvalidInputError(f"{name} must be positive semidefinite")
        for name, matrix in (("h", h), ("q", q), ("r", r)):
            matrix = np.array(matrix)
            matrix.setflags(write=False)
            object.__setattr__(self, name, matrix)

    @property
    def n_states(self) -> int:
        return self.h.shape[1]

    @property
    def n_measurements(self) -> int:
        return self.h.shape[0]

    @cached_property
    def m(self) -> np.ndarray:
        """``M = weight * (H Q H^T + R)^-1``, computed once per run."""
        covariance = symmetrize(self.h @ self.q @ self.h.T + self.r)
        try:
            factor = linalg.cho_factor(covariance, lower=True)
        except linalg.LinAlgError as e:
            raise InvalidInputError("H Q H^T + R is not positive definite") from e
        m = self.weight * symmetrize(
            linalg.cho_solve(factor, np.eye(self.n_measurements))
        )
        m.setflags(write=False)
        return m

    def reweighted(self, weight: float) -> "ObservationSetup":
        return ObservationSetup(self.h, self.q, self.r, weight=weight)


@dataclass(frozen=True, eq=False)
class FilterTrajectory:
    """Per-step record of one filtered segment; index ``t`` holds step ``t + 1``."""

    x0: np.ndarray
    p0: np.ndarray
    x_pred: np.ndarray
    p_pred: np.ndarray
    s: np.ndarray
    k_gain: np.ndarray
    g: np.ndarray
    innovation: np.ndarray
    x_post: np.ndarray
    p_post: np.ndarray
    jacobians: np.ndarray
    warmup: int

    @property
    def n_steps(self) -> int:
        return self.x_pred.shape[0]

    def previous_state(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """``(x_{t-1}, P_{t-1})`` for zero-based step index ``t``."""
        if t == 0:
            return self.x0, self.p0
        return self.x_post[t - 1], self.p_post[t - 1]


def mahalanobis(z: np.ndarray, m: np.ndarray) -> float:
    z = np.asarray(z, dtype=float)
    return float(z @ m @ z)


def _validate_segment(model, obs, y, x0, p0, warmup):
    n = model.n_states
    if obs.n_states != n:
        raise InvalidInputError(f"H has {obs.n_states} columns but the model has {n} states")
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if y.ndim != 2 or y.shape[1] != obs.n_measurements:
        raise InvalidInputError(
            f"Measurements have shape {y.shape}, expected (k, {obs.n_measurements})"
        )
    k = y.shape[0]
    if k < 1:
        raise InvalidInputError("A segment needs at least one measurement")
    if not 0 <= warmup < k:
        raise InvalidInputError(f"warmup={warmup} must satisfy 0 <= warmup < k={k}")
    x0 = np.asarray(x0, dtype=float)
    p0 = np.asarray(p0, dtype=float)
    if x0.shape != (n,) or p0.shape != (n, n):
        raise InvalidInputError("Initial mean/covariance do not match the state dimension")
    if not np.allclose(p0, p0.T, atol=1e-12):
        raise InvalidInputError("P_0 must be symmetric")
    return y, x0, p0


def filter_segment(model, obs: ObservationSetup, y, x0, p0, warmup: int = 0, score: bool = True):
    """Run the EKF over ``y`` (k x p) and return ``(trajectory, objective)``.

    With ``score=False`` the objective is not evaluated (returned as NaN), so
    setups whose ``H Q H^T + R`` is singular can still be filtered.
    """
    y, x0, p0 = _validate_segment(model, obs, y, x0, p0, warmup)
    k, p = y.shape
    n = model.n_states
    h, q, r = obs.h, obs.q, obs.r
    m = obs.m if score else None
    eye = np.eye(n)

    x_pred = np.empty((k, n))
    p_pred = np.empty((k, n, n))
    s_all = np.empty((k, p, p))
    k_all = np.empty((k, n, p))
    g_all = np.empty((k, n, n))
    z_all = np.empty((k, p))
    x_post = np.empty((k, n))
    p_post = np.empty((k, n, n))
    jacobians = np.empty((k, n, n))

    x_prev, p_prev = x0, p0
    total = 0.0
    for t in range(k):
        f_jac = model.jacobian(x_prev)
        prediction = model.step(x_prev)
        covariance = symmetrize(f_jac @ p_prev @ f_jac.T + q)
        if not (np.all(np.isfinite(prediction)) and np.all(np.isfinite(covariance))):
            raise FilterDivergedError(t + 1)
        s = symmetrize(h @ covariance @ h.T + r)
        try:
            factor = linalg.cho_factor(s, lower=True)
        except linalg.LinAlgError:
            raise SingularInnovationError(t + 1)
        gain = linalg.cho_solve(factor, h @ covariance).T
        g = eye - gain @ h
        z = y[t] - h @ prediction
        x_new = prediction + gain @ z
        p_new = symmetrize(g @ covariance)
        if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(p_new))):
            raise FilterDivergedError(t + 1)

        if score and t >= warmup:
            total += mahalanobis(z, m)

        jacobians[t], x_pred[t], p_pred[t] = f_jac, prediction, covariance
        s_all[t], k_all[t], g_all[t], z_all[t] = s, gain, g, z
        x_post[t], p_post[t] = x_new, p_new
        x_prev, p_prev = x_new, p_new

    trajectory = FilterTrajectory(
        x0=x0.copy(),
        p0=p0.copy(),
        x_pred=x_pred,
        p_pred=p_pred,
        s=s_all,
        k_gain=k_all,
        g=g_all,
        innovation=z_all,
        x_post=x_post,
        p_post=p_post,
        jacobians=jacobians,
        warmup=warmup,
    )
    return trajectory, (total / (k - warmup) if score else float("nan"))


def trajectory_frame(trajectory: FilterTrajectory) -> pd.DataFrame:
    """One row per step: predicted and updated means, innovation, diag(P)."""
    columns = {"step": np.arange(1, trajectory.n_steps + 1)}
    for name, values in (
        ("x_pred", trajectory.x_pred),
        ("x_post", trajectory.x_post),
        ("z", trajectory.innovation),
        ("p_diag", np.diagonal(trajectory.p_post, axis1=1, axis2=2)),
    ):
        for i in range(values.shape[1]):
            columns[f"{name}_{i}"] = values[:, i]
    return pd.DataFrame(columns)
