"""Backward accumulation of the objective gradient through a filtered segment.

The forward step (see ``estimation.ekf``) is

    x_{t|t-1} = f(x_{t-1}),            P_{t|t-1} = F' P_{t-1} F'^T + Q
    S_t = H P_{t|t-1} H^T + R,         K_t = P_{t|t-1} H^T S_t^-1,  G_t = I - K_t H
    x_t = x_{t|t-1} + K_t z_t,         P_t = G_t P_{t|t-1}

and its exact adjoint, walked from t = k down to 1 with zero terminal
adjoints, is

    dx_{t|t-1} = G_t^T dx_t - (2 / N) H^T M z_t            (source only after warm-up)
    U_t        = G_t^T dx_t v_t^T,  v_t = H^T S_t^-1 z_t
    dP_{t|t-1} = (U_t + U_t^T) / 2 + G_t^T dP_t G_t
    Z_t        = 2 dP_{t|t-1} F'_t,  dP_{t-1} = F'^T_t Z_t / 2
    dx_{t-1}   = F'^T_t dx_{t|t-1} + <Z_t P_{t-1}, dF'/dx>
    dtheta    += df/dtheta^T dx_{t|t-1} + <Z_t P_{t-1}, dF'/dtheta>

``backward_general`` evaluates the contractions through the model protocol one
derivative slice at a time; ``backward_network`` uses the closed forms of the
network family and never builds a derivative slice.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import linalg

from estimation.errors import InvalidInputError
from estimation.model import EiBrainModel, NetworkModel, ParameterLayout


@dataclass(frozen=True, eq=False)
class AdjointState:
    step: int
    d_x: np.ndarray
    d_p: np.ndarray
    d_x_pred: np.ndarray
    u: np.ndarray
    z_mat: np.ndarray


@dataclass(frozen=True, eq=False)
class GradientReport:
    objective: float
    grad: np.ndarray
    layout: ParameterLayout
    blocks: dict[str, np.ndarray] = field(default_factory=dict)
    t0: int = 0
    k: int = 0
    warmup: int = 0
    adjoints: tuple[AdjointState, ...] = ()

    def block(self, name: str) -> np.ndarray:
        return self.grad[self.layout.slices[name]]


def _check_inputs(traj, model, obs, y):
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if y.shape != traj.innovation.shape:
        raise InvalidInputError(
            f"Measurements {y.shape} do not match the trajectory {traj.innovation.shape}"
        )
    if traj.x_pred.shape[1] != model.n_states or obs.n_states != model.n_states:
        raise InvalidInputError("Trajectory, model and observation dimensions disagree")
    return y


def _step_adjoint(traj, obs, t, d_x, d_p, n_scored):
    """Shared part of one backward step: ``(d_x_pred, U_t, Z_t, Z_t P_{t-1}, dP_{t-1})``."""
    h, m = obs.h, obs.m
    g = traj.g[t]
    f_jac = traj.jacobians[t]
    z = traj.innovation[t]
    _, p_prev = traj.previous_state(t)

    factor = linalg.cho_factor(traj.s[t], lower=True)
    v = h.T @ linalg.cho_solve(factor, z)

    carried = g.T @ d_x
    d_x_pred = carried.copy()
    if t >= traj.warmup:
        d_x_pred -= (2.0 / n_scored) * (h.T @ (m @ z))
    u = np.outer(carried, v)
    d_p_pred = 0.5 * (u + u.T) + g.T @ d_p @ g
    z_mat = 2.0 * d_p_pred @ f_jac
    gamma = z_mat @ p_prev
    d_p_prev = 0.5 * f_jac.T @ z_mat
    d_p_prev = 0.5 * (d_p_prev + d_p_prev.T)
    return d_x_pred, u, z_mat, gamma, d_p_prev


def backward_general(traj, model, obs, y, t0: int = 0, record_adjoints: bool = False,
                     objective: float | None = None) -> GradientReport:
    """Gradient for any model implementing the state-space protocol."""
    _check_inputs(traj, model, obs, y)
    n = model.n_states
    layout = model.layout
    k = traj.n_steps
    n_scored = k - traj.warmup

    d_x = np.zeros(n)
    d_p = np.zeros((n, n))
    grad = np.zeros(layout.size)
    adjoints = []
    for t in range(k - 1, -1, -1):
        d_x_pred, u, z_mat, gamma, d_p_prev = _step_adjoint(traj, obs, t, d_x, d_p, n_scored)
        x_prev, _ = traj.previous_state(t)
        f_jac = traj.jacobians[t]

        # <Z_t P_{t-1}, dF'/dx^i> = Tr(gamma^T dF'/dx^i)
        curvature = np.array(
            [np.sum(gamma * model.jacobian_state_derivative(x_prev, i)) for i in range(n)]
        )
        grad += model.param_jacobian(x_prev).T @ d_x_pred
        grad += np.array(
            [np.sum(gamma * model.jacobian_param_derivative(x_prev, j)) for j in range(layout.size)]
        )
        if record_adjoints:
            adjoints.append(AdjointState(t + 1, d_x, d_p, d_x_pred, u, z_mat))
        d_x = f_jac.T @ d_x_pred + curvature
        d_p = d_p_prev

    return GradientReport(
        objective=_objective(traj, obs) if objective is None else objective,
        grad=grad,
        layout=layout,
        blocks=layout.split(grad),
        t0=t0,
        k=k,
        warmup=traj.warmup,
        adjoints=tuple(reversed(adjoints)),
    )


def backward_network(traj, model, obs, y, t0: int = 0, record_adjoints: bool = False,
                     objective: float | None = None) -> GradientReport:
    """Closed-form gradient for the network family (E/I models via their network form)."""
    if isinstance(model, EiBrainModel):
        report = backward_network(traj, model.network, obs, y, t0, record_adjoints, objective)
        grad = model.pull_back(report.grad)
        return GradientReport(
            objective=report.objective,
            grad=grad,
            layout=model.layout,
            blocks={**report.blocks, **model.layout.split(grad)},
            t0=t0,
            k=report.k,
            warmup=report.warmup,
            adjoints=report.adjoints,
        )
    if not isinstance(model, NetworkModel):
        raise InvalidInputError("backward_network needs a model in canonical network form")
    _check_inputs(traj, model, obs, y)
    n = model.n_states
    k = traj.n_steps
    n_scored = k - traj.warmup
    b_hat, gain = model.b_matrix, model.gain
    phi = model.nonlinearity

    d_a = np.zeros((n, n))
    d_b = np.zeros((n, n))
    d_c = np.zeros(n)
    d_bias = np.zeros(n)
    d_x = np.zeros(n)
    d_p = np.zeros((n, n))
    adjoints = []
    for t in range(k - 1, -1, -1):
        d_x_pred, u, z_mat, gamma, d_p_prev = _step_adjoint(traj, obs, t, d_x, d_p, n_scored)
        x_prev, _ = traj.previous_state(t)
        f_jac = traj.jacobians[t]

        activation = gain * x_prev + model.offset
        slope = phi.derivative(activation)
        curvature = phi.second_derivative(activation)
        # (B o (Z_t P_{t-1}))^T 1 : column sums of the Hadamard product
        weighted = np.sum(b_hat * gamma, axis=0)

        d_a += np.outer(d_x_pred, x_prev) + gamma
        d_b += np.outer(d_x_pred, phi.apply(activation)) + gamma * (slope * gain)[None, :]
        # equals dx_{t-1} - A^T dx_{t|t-1} divided by the gain
        d_c += slope * (b_hat.T @ d_x_pred) + weighted * curvature * gain
        d_bias += d_x_pred
        if record_adjoints:
            adjoints.append(AdjointState(t + 1, d_x, d_p, d_x_pred, u, z_mat))
        d_x = f_jac.T @ d_x_pred + weighted * curvature * gain**2
        d_p = d_p_prev

    pieces = {
        "A": d_a.ravel(),
        "B.free": d_b.ravel()[model.free_indices],
        "c": d_c,
        "bias": d_bias,
    }
    values = [pieces[name] for name in model.trainable]
    grad = np.concatenate(values) if values else np.zeros(0)
    return GradientReport(
        objective=_objective(traj, obs) if objective is None else objective,
        grad=grad,
        layout=model.layout,
        blocks={"A": d_a, "B": d_b, "c": d_c, "bias": d_bias},
        t0=t0,
        k=k,
        warmup=traj.warmup,
        adjoints=tuple(reversed(adjoints)),
    )


def _objective(traj, obs) -> float:
    z = traj.innovation[traj.warmup:]
    return float(np.einsum("ti,ij,tj->", z, obs.m, z) / z.shape[0])


def reduce_reports(reports: list[GradientReport]) -> GradientReport:
    """Mean of a minibatch of reports, summed in list order."""
    if not reports:
        raise InvalidInputError("Cannot reduce an empty batch")
    grad = np.zeros_like(reports[0].grad)
    objective = 0.0
    for report in reports:
        grad = grad + report.grad
        objective += report.objective
    grad = grad / len(reports)
    first = reports[0]
    return GradientReport(
        objective=objective / len(reports),
        grad=grad,
        layout=first.layout,
        blocks=first.layout.split(grad),
        t0=first.t0,
        k=first.k,
        warmup=first.warmup,
    )


def dump_adjoints(report: GradientReport, path: str | Path) -> Path:
    """Write the recorded per-step adjoints as CSV (debug aid)."""
    rows = []
    for state in report.adjoints:
        row = {"step": state.step}
        row.update({f"d_x_{i}": v for i, v in enumerate(state.d_x)})
        row.update({f"d_x_pred_{i}": v for i, v in enumerate(state.d_x_pred)})
        row["d_p_fro"] = float(np.linalg.norm(state.d_p))
        row["u_fro"] = float(np.linalg.norm(state.u))
        row["z_fro"] = float(np.linalg.norm(state.z_mat))
        rows.append(row)
    path = Path(path)
    pd.DataFrame(rows).to_csv(path, index=False, float_format="%.17g")
    return path
