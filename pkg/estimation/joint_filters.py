"""Joint (augmented-state) Kalman filters used as dual-estimation baselines.

The parameters ride along with the state as ``[x; theta]`` under random-walk
dynamics ``theta_{t+1} = theta_t + eta_t``. The parameter part of the process
covariance is annealed on a fixed schedule so the estimates settle.
"""

from dataclasses import dataclass
import logging
import time

import numpy as np
from scipy import linalg

from configuration.experiment import FilterInit, JointTuning
from estimation.ekf import ObservationSetup
from estimation.errors import FilterDivergedError, InvalidInputError, SingularInnovationError
from estimation.linalg import cholupdate, lower_factor, psd_sqrt, symmetrize, triangular_from_qr

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class AugmentedState:
    mean: np.ndarray
    cov: np.ndarray
    n_states: int

    @property
    def x(self) -> np.ndarray:
        return self.mean[: self.n_states]

    @property
    def theta(self) -> np.ndarray:
        return self.mean[self.n_states :]


@dataclass(frozen=True, eq=False)
class JointResult:
    model: object
    params: np.ndarray
    states: np.ndarray
    final: AugmentedState
    param_process_var: float
    step_times: np.ndarray
    innovations: np.ndarray
    recoveries: int = 0

    @property
    def n_steps(self) -> int:
        return self.states.shape[0]


def _prepare(model_template, obs, y, tuning, filter_init, x0, estimate_parameters):
    y = np.atleast_2d(np.asarray(y, dtype=float))
    n = model_template.n_states
    if obs.n_states != n or y.shape[1] != obs.n_measurements:
        raise InvalidInputError("Model, measurement matrix and data dimensions disagree")
    if y.shape[0] < 1:
        raise InvalidInputError("Joint filters need at least one measurement")
    filter_init = filter_init or FilterInit()
    theta = model_template.pack().values if estimate_parameters else np.zeros(0)
    q = theta.size
    x0 = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float)
    mean = np.concatenate([x0, theta])
    cov = np.zeros((n + q, n + q))
    cov[:n, :n] = filter_init.p0_scale * np.eye(n)
    cov[n:, n:] = tuning.param_init_var * np.eye(q)
    return y, n, q, mean, cov


def _model_at(template, theta, q):
    return template.unpack(theta) if q else template


def jekf_run(model_template, obs: ObservationSetup, y, tuning: JointTuning,
             filter_init: FilterInit | None = None, x0=None,
             estimate_parameters: bool = True) -> JointResult:
    """Joint EKF on ``[x; theta]`` with dynamics ``[f(x, theta); theta]``."""
    y, n, q, mean, cov = _prepare(model_template, obs, y, tuning, filter_init, x0, estimate_parameters)
    h, r = obs.h, obs.r
    param_var = tuning.param_process_var
    states = np.empty((y.shape[0], n))
    innovations = np.empty_like(y)
    step_times = np.empty(y.shape[0])

    for t in range(y.shape[0]):
        started = time.perf_counter()
        x, theta = mean[:n], mean[n:]
        current = _model_at(model_template, theta, q)
        f_jac = current.jacobian(x)
        f_theta = current.param_jacobian(x) if q else np.zeros((n, 0))
        prediction = current.step(x)

        # covariance of [F f_theta; 0 I] applied on both sides, by blocks
        top = f_jac @ cov[:n, :] + f_theta @ cov[n:, :]
        cov = cov.copy()
        cov[:n, :n] = top[:, :n] @ f_jac.T + top[:, n:] @ f_theta.T + obs.q
        cov[:n, n:] = top[:, n:]
        cov[n:, :n] = top[:, n:].T
        cov[n:, n:] += param_var * np.eye(q)

        if not (np.all(np.isfinite(prediction)) and np.all(np.isfinite(cov))):
            raise FilterDivergedError(t + 1)
        hp = h @ cov[:n, :]
        s = symmetrize(hp[:, :n] @ h.T + r)
        try:
            factor = linalg.cho_factor(s, lower=True)
        except linalg.LinAlgError:
            raise SingularInnovationError(t + 1)
        gain = linalg.cho_solve(factor, hp).T
        z = y[t] - h @ prediction
        mean = np.concatenate([prediction, theta]) + gain @ z
        cov = cov - gain @ hp

        if (t + 1) % tuning.resym_every == 0:
            cov = symmetrize(cov)
        if (t + 1) % tuning.anneal_every == 0:
            param_var *= tuning.anneal_factor
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise FilterDivergedError(t + 1)
        states[t] = mean[:n]
        innovations[t] = z
        step_times[t] = time.perf_counter() - started

    params = mean[n:].copy()
    return JointResult(
        model=_model_at(model_template, params, q),
        params=params,
        states=states,
        final=AugmentedState(mean, cov, n),
        param_process_var=param_var,
        step_times=step_times,
        innovations=innovations,
    )


def sigma_weights(dim: int, alpha: float, beta: float, kappa: float):
    """Scaled sigma-point weights: ``(scale, wm, wc)`` for ``2 dim + 1`` points."""
    lam = alpha**2 * (dim + kappa) - dim
    if dim + lam <= 0:
        raise InvalidInputError("Sigma-point scaling gives a non-positive spread")
    wm = np.full(2 * dim + 1, 1.0 / (2.0 * (dim + lam)))
    wc = wm.copy()
    wm[0] = lam / (dim + lam)
    wc[0] = wm[0] + 1.0 - alpha**2 + beta
    return np.sqrt(dim + lam), wm, wc


def sigma_points(mean: np.ndarray, factor: np.ndarray, scale: float) -> np.ndarray:
    """Columns ``mean, mean + scale * S_i, mean - scale * S_i``: ``2 d + 1`` points."""
    return np.hstack([mean[:, None], mean[:, None] + scale * factor, mean[:, None] - scale * factor])


def _downdate(factor, columns, step):
    """Lower factor of ``factor @ factor.T - columns @ columns.T`` and whether it was refactorized.

    Rank-one downdates that lose definiteness fall back to a Cholesky factorization of
    the explicit difference; if that fails too the filter has diverged.
    """
    start = factor
    try:
        for column in columns.T:
            factor = cholupdate(factor, column, -1.0)
        return factor, False
    except linalg.LinAlgError:
        logger.warning(f"Square-root downdate lost definiteness at step {step}; refactorizing")
        try:
            return lower_factor(symmetrize(start @ start.T - columns @ columns.T)), True
        except linalg.LinAlgError as e:
            raise FilterDivergedError(step) from e


def _sqrt_transform(points, wm, wc, noise_sqrt, step):
    """Mean and lower square-root covariance of weighted points plus additive noise."""
    mean = points @ wm
    dev = points - mean[:, None]
    factor = triangular_from_qr(np.hstack([np.sqrt(wc[1]) * dev[:, 1:], noise_sqrt]))
    recovered = False
    if wc[0] > 0:
        factor = cholupdate(factor, np.sqrt(wc[0]) * dev[:, 0], 1.0)
    elif wc[0] < 0:
        factor, recovered = _downdate(factor, np.sqrt(-wc[0]) * dev[:, :1], step)
    return mean, factor, dev, recovered


def jukf_run(model_template, obs: ObservationSetup, y, tuning: JointTuning,
             filter_init: FilterInit | None = None, x0=None,
             estimate_parameters: bool = True) -> JointResult:
    """Square-root joint UKF on the same augmented system as ``jekf_run``."""
    y, n, q, mean, cov = _prepare(model_template, obs, y, tuning, filter_init, x0, estimate_parameters)
    d = n + q
    h = obs.h
    scale, wm, wc = sigma_weights(d, tuning.alpha, tuning.beta, tuning.kappa)
    sqrt_q = psd_sqrt(obs.q)
    sqrt_r = psd_sqrt(obs.r)
    factor = lower_factor(cov)
    param_var = tuning.param_process_var
    states = np.empty((y.shape[0], n))
    innovations = np.empty_like(y)
    step_times = np.empty(y.shape[0])
    recoveries = 0

    for t in range(y.shape[0]):
        started = time.perf_counter()
        sigmas = sigma_points(mean, factor, scale)
        propagated = np.empty_like(sigmas)
        for i in range(sigmas.shape[1]):
            theta = sigmas[n:, i]
            propagated[:n, i] = _model_at(model_template, theta, q).step(sigmas[:n, i])
            propagated[n:, i] = theta
        if not np.all(np.isfinite(propagated)):
            raise FilterDivergedError(t + 1)

        noise_sqrt = np.zeros((d, d))
        noise_sqrt[:n, :n] = sqrt_q
        noise_sqrt[n:, n:] = np.sqrt(param_var) * np.eye(q)
        prediction, factor, _, recovered = _sqrt_transform(propagated, wm, wc, noise_sqrt, t + 1)
        recoveries += recovered

        # redraw so the measurement statistics see the process noise
        redrawn = sigma_points(prediction, factor, scale)
        dev = redrawn - prediction[:, None]
        measured = h @ redrawn[:n]
        y_mean, y_factor, y_dev, recovered = _sqrt_transform(measured, wm, wc, sqrt_r, t + 1)
        recoveries += recovered
        if np.any(np.diag(y_factor) <= 0):
            raise SingularInnovationError(t + 1)
        cross = (dev * wc[None, :]) @ y_dev.T
        if not (np.all(np.isfinite(cross)) and np.all(np.isfinite(y_factor))):
            raise FilterDivergedError(t + 1)
        gain = linalg.solve_triangular(
            y_factor.T, linalg.solve_triangular(y_factor, cross.T, lower=True), lower=False
        ).T
        z = y[t] - y_mean
        mean = prediction + gain @ z

        factor, recovered = _downdate(factor, gain @ y_factor, t + 1)
        recoveries += recovered

        if (t + 1) % tuning.anneal_every == 0:
            param_var *= tuning.anneal_factor
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(factor))):
            raise FilterDivergedError(t + 1)
        states[t] = mean[:n]
        innovations[t] = z
        step_times[t] = time.perf_counter() - started

    params = mean[n:].copy()
    return JointResult(
        model=_model_at(model_template, params, q),
        params=params,
        states=states,
        final=AugmentedState(mean, factor, n),
        param_process_var=param_var,
        step_times=step_times,
        innovations=innovations,
        recoveries=recoveries,
    )


def ukf_filter(model, obs: ObservationSetup, y, tuning: JointTuning | None = None,
               filter_init: FilterInit | None = None, x0=None) -> np.ndarray:
    """Square-root UKF state estimates with the parameters held fixed."""
    result = jukf_run(model, obs, y, tuning or JointTuning(), filter_init, x0, estimate_parameters=False)
    return result.states
