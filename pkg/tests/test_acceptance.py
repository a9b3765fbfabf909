"""End-to-end recovery and cost checks at desk scale. Run with ``pytest -m slow``."""

import numpy as np
import pytest

from configuration.experiment import ExperimentConfig, JointTuning, SimulationSpec, TrainConfig
from data_generation import generate_ground_truth
from estimation.metrics import crossval_state_mse, median_step_time, score_models
from process_campaign import HELD_OUT_SEED, INIT_SEED, TRAIN_SEED, TRUTH_SEED, fit_method, initial_template

pytestmark = pytest.mark.slow


def desk_run(config: ExperimentConfig, n: int, replicate: int):
    spec = config.simulation.model_copy(update={"n_nodes": n, "seed": config.derive_seed(n, replicate, TRUTH_SEED)})
    truth = generate_ground_truth(spec)
    held_out = spec.model_copy(
        update={"seed": config.derive_seed(n, replicate, HELD_OUT_SEED), "horizon": config.crossval_horizon}
    )
    fresh = generate_ground_truth(held_out, model=truth.model, obs=truth.obs)
    template = initial_template(truth, config, config.derive_seed(n, replicate, INIT_SEED))
    fit = fit_method("BP", template, truth, config, config.derive_seed(n, replicate, TRAIN_SEED))
    corr, _ = score_models(fit.model, truth.model)
    fitted_mse = crossval_state_mse(fit.model, truth.obs, fresh)
    truth_mse = crossval_state_mse(truth.model, truth.obs, fresh)
    return corr, fitted_mse / truth_mse


def test_desk_scale_recovery():
    config = ExperimentConfig(train=TrainConfig(n_iterations=20_000), simulation=SimulationSpec(horizon=5000))
    results = [desk_run(config, 10, replicate) for replicate in range(10)]
    corr, mse_ratio = np.array(results).T
    assert np.median(corr) >= 0.8
    assert np.median(mse_ratio) <= 1.5


def test_joint_filter_cost_grows_faster_than_backprop():
    config = ExperimentConfig(
        train=TrainConfig(n_iterations=30),
        joint=JointTuning(horizon=30),
        simulation=SimulationSpec(horizon=400, burn_in=50),
    )
    ratios = {"jEKF": [], "jUKF": []}
    for n in (10, 20, 40):
        spec = config.simulation.model_copy(update={"n_nodes": n, "seed": config.derive_seed(n, 0, TRUTH_SEED)})
        truth = generate_ground_truth(spec)
        template = initial_template(truth, config, config.derive_seed(n, 0, INIT_SEED))
        bp = fit_method("BP", template, truth, config, 0)
        bp_time = median_step_time(bp.step_times)
        for method, found in ratios.items():
            joint = fit_method(method, template, truth, config, 0)
            found.append(median_step_time(joint.step_times) / bp_time)
    for found in ratios.values():
        assert found[0] < found[1] < found[2]
        assert found[2] > 10
