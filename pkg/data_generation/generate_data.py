"""Synthetic ground truth: random sparse networks, measurement operators and
noisy simulated trajectories for the recovery benchmark."""

from dataclasses import dataclass
from pathlib import Path
import logging
import sys
import os

import numpy as np
from scipy import linalg

# Add the parent directory to the Python path so the packages resolve when run as a script
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from configuration.experiment import SimulationSpec
from estimation.ekf import ObservationSetup
from estimation.errors import InvalidInputError, SimulationDivergedError
from estimation.linalg import psd_sqrt
from estimation.model import EiBrainModel, NetworkModel
from estimation.serialization import load_model, read_array, save_model, write_array

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    model: NetworkModel | EiBrainModel
    obs: ObservationSetup
    states: np.ndarray
    measurements: np.ndarray
    flagged: tuple[int, ...] = ()

    @property
    def horizon(self) -> int:
        return self.states.shape[0]


def sparsify(w: np.ndarray, fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Zero the floor(fraction * size) entries smallest in absolute value.

    Ties are broken by row-major position so the result is platform independent.
    """
    if not 0 <= fraction < 1:
        raise InvalidInputError(f"Sparsity fraction {fraction} outside [0, 1)")
    w = np.asarray(w, dtype=float)
    flat = w.ravel().copy()
    n_zero = int(np.floor(fraction * flat.size + 1e-9))
    order = np.argsort(np.abs(flat), kind="stable")
    mask = np.ones(flat.size, dtype=bool)
    mask[order[:n_zero]] = False
    flat[~mask] = 0.0
    return flat.reshape(w.shape), mask.reshape(w.shape)


def _haar_orthogonal(size: int, rng: np.random.Generator) -> np.ndarray:
    q, r = linalg.qr(rng.standard_normal((size, size)))
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)[None, :]


def random_measurement_matrix(
    p: int,
    n: int,
    rng: np.random.Generator,
    mean: float = 2.0,
    spread: float = 0.25,
    spread_is_variance: bool = True,
) -> np.ndarray:
    """``H = U diag(sigma) V^T`` with Haar ``U``, ``V`` and ``sigma ~ |N(mean, spread)|``."""
    if p < 1 or p > n:
        raise InvalidInputError(f"Need 1 <= p <= n, got p={p}, n={n}")
    u = _haar_orthogonal(p, rng)
    v = _haar_orthogonal(n, rng)[:, :p]
    std = np.sqrt(spread) if spread_is_variance else spread
    sigma = np.abs(rng.normal(mean, std, size=p))
    return (u * sigma[None, :]) @ v.T


def ei_measurement_matrix(p: int, n_regions: int, rng: np.random.Generator, **kwargs) -> np.ndarray:
    """Sensors see excitatory populations only: inhibitory columns are zero."""
    h = random_measurement_matrix(p, n_regions, rng, **kwargs)
    return np.hstack([h, np.zeros((p, n_regions))])


def simulate(model, obs: ObservationSetup, horizon: int, x0, rng: np.random.Generator) -> GroundTruth:
    if horizon < 1:
        raise InvalidInputError("horizon must be at least 1")
    n, p = obs.n_states, obs.n_measurements
    if model.n_states != n:
        raise InvalidInputError("Model and measurement matrix disagree on the state dimension")
    q_sqrt = psd_sqrt(obs.q)
    r_sqrt = psd_sqrt(obs.r)
    states = np.empty((horizon, n))
    measurements = np.empty((horizon, p))
    x = np.asarray(x0, dtype=float)
    for t in range(horizon):
        x = model.step(x) + q_sqrt @ rng.standard_normal(n)
        if not np.all(np.isfinite(x)):
            raise SimulationDivergedError(t + 1)
        states[t] = x
        measurements[t] = obs.h @ x + r_sqrt @ rng.standard_normal(p)
    return GroundTruth(model=model, obs=obs, states=states, measurements=measurements)


def dynamic_range_screen(model, states: np.ndarray, threshold: float = 2.0,
                         max_fraction: float = 0.9) -> list[int]:
    """Coordinates whose activation sits in tanh saturation for most steps."""
    network = model.network if isinstance(model, EiBrainModel) else model
    activation = network.gain[None, :] * states + network.offset[None, :]
    saturated = np.mean(np.abs(activation) > threshold, axis=0)
    return [int(i) for i in np.flatnonzero(saturated > max_fraction)]


def generate_network(spec: SimulationSpec, rng: np.random.Generator) -> NetworkModel:
    n = spec.n_nodes
    weights = spec.weight_distribution
    w = rng.normal(0.0, np.sqrt(weights.w_variance_scale / n), size=(n, n))
    w, mask = sparsify(w, spec.sparsity_fraction)
    d = rng.uniform(weights.d_low, weights.d_high, size=n)
    c = rng.normal(0.0, weights.c_std, size=n)
    return NetworkModel.hopfield(w, d, c, free_mask=mask)


def generate_ground_truth(spec: SimulationSpec, model=None, obs: ObservationSetup | None = None) -> GroundTruth:
    """Draw (or reuse) a model and measurement setup, burn in, then simulate ``spec.horizon`` steps.

    A generated network whose trajectory fails the dynamic-range screen is replaced by a
    fresh draw from the same stream, up to ``spec.max_redraws`` times. A supplied model is
    never replaced; it is only flagged.
    """
    rng = np.random.default_rng(spec.seed)
    redraw = model is None
    if model is None:
        model = generate_network(spec, rng)
    if obs is None:
        h = random_measurement_matrix(
            spec.n_measurements,
            spec.n_nodes,
            rng,
            mean=spec.singular_value_mean,
            spread=spec.singular_value_spread,
            spread_is_variance=spec.spread_is_variance,
        )
        obs = ObservationSetup(
            h=h,
            q=spec.process_std**2 * np.eye(spec.n_nodes),
            r=spec.measurement_std**2 * np.eye(h.shape[0]),
        )
    for attempt in range(spec.max_redraws + 1):
        x0 = rng.normal(0.0, spec.x0_std, size=model.n_states)
        if spec.burn_in > 0:
            x0 = simulate(model, obs, spec.burn_in, x0, rng).states[-1]
        truth = simulate(model, obs, spec.horizon, x0, rng)
        flagged = dynamic_range_screen(
            model, truth.states, spec.saturation_threshold, spec.saturation_max_fraction
        )
        if not flagged or not redraw or attempt == spec.max_redraws:
            break
        logger.warning(
            f"Rejected network draw {attempt + 1} (seed={spec.seed}): "
            f"{len(flagged)} coordinate(s) pinned in saturation; drawing again"
        )
        model = generate_network(spec, rng)
    if flagged:
        logger.warning(
            f"Ground truth (seed={spec.seed}) has {len(flagged)} coordinate(s) pinned in saturation: {flagged}"
        )
    return GroundTruth(model, obs, truth.states, truth.measurements, tuple(flagged))


def fresh_data(truth: GroundTruth, spec: SimulationSpec) -> GroundTruth:
    """New trajectory from the same model and measurement setup (held-out data)."""
    return generate_ground_truth(spec, model=truth.model, obs=truth.obs)


def random_ei_model(n_regions: int, rng: np.random.Generator, trainable=("Wp", "Wr")) -> EiBrainModel:
    scale = 1.0 / np.sqrt(n_regions)
    return EiBrainModel(
        w_p=np.abs(rng.normal(0.0, scale, size=(n_regions, n_regions))),
        w_r=np.abs(rng.normal(0.0, scale, size=(n_regions, n_regions))),
        j_p=rng.uniform(0.2, 1.0, size=n_regions),
        j_r=rng.uniform(0.2, 1.0, size=n_regions),
        tau_p=rng.uniform(1.5, 3.0, size=n_regions),
        tau_r=rng.uniform(1.5, 3.0, size=n_regions),
        gain=rng.uniform(0.5, 1.5, size=2 * n_regions),
        offset=rng.normal(0.0, 0.3, size=2 * n_regions),
        trainable=trainable,
    )


def save_ground_truth(truth: GroundTruth, directory: str | Path, provenance: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_model(truth.model, directory / "model.json", metadata={"flagged": list(truth.flagged), **(provenance or {})})
    write_array(truth.states, directory / "states.csv", "x", provenance)
    write_array(truth.measurements, directory / "measurements.csv", "y", provenance)
    write_array(truth.obs.h, directory / "h.csv", "h", provenance)
    write_array(truth.obs.q, directory / "q.csv", "q", provenance)
    write_array(truth.obs.r, directory / "r.csv", "r", provenance)
    return directory


def load_ground_truth(directory: str | Path) -> GroundTruth:
    directory = Path(directory)
    obs = ObservationSetup(
        h=read_array(directory / "h.csv"),
        q=read_array(directory / "q.csv"),
        r=read_array(directory / "r.csv"),
    )
    return GroundTruth(
        model=load_model(directory / "model.json"),
        obs=obs,
        states=read_array(directory / "states.csv"),
        measurements=read_array(directory / "measurements.csv"),
    )


def main():
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[logging.StreamHandler(sys.stdout)],
    )
    spec = SimulationSpec()
    logger.info(f"Generating a {spec.n_nodes}-node ground truth (seed={spec.seed})...")
    truth = generate_ground_truth(spec)
    out = save_ground_truth(truth, Path("data") / f"n{spec.n_nodes}_s{spec.seed}")
    logger.info(f"Ground truth written to {out}")


if __name__ == "__main__":
    main()
