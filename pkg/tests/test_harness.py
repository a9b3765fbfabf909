import json

import pytest

import process_campaign
from estimation.metrics import SCORE_COLUMNS
from estimation.serialization import load_model, read_table
from harness import EXIT_CONFIG_ERROR, EXIT_OK, EXIT_RUN_ERRORS, build_parser, load_config, main

TINY = {
    "sizes": [4],
    "replicates": 2,
    "simulation": {"horizon": 120, "burn_in": 10},
    "train": {"n_iterations": 4, "segment_length": 8, "warmup": 2},
    "joint": {"horizon": 60},
    "crossval_horizon": 40,
    "trace_steps": 10,
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def run(*argv):
    return main([*argv, "--log-file", ""])


class TestCampaign:
    def test_outputs(self, tiny_config, tmp_path):
        out = tmp_path / "results"
        assert run("campaign", "--config", str(tiny_config), "--out", str(out)) == EXIT_OK

        scores = read_table(out / "scorecards.csv")
        assert list(scores.columns) == SCORE_COLUMNS
        assert len(scores) == 2 * 3
        assert list(scores["method"][:3]) == ["BP", "jEKF", "jUKF"]
        assert scores["param_corr"].between(-1, 1).all()
        assert (out / "scorecards.csv").read_text().startswith("# config_hash=")
        assert len(read_table(out / "timings.csv")) == 6
        assert read_table(out / "errors.csv").empty
        assert json.loads((out / "config.json").read_text())["sizes"] == [4]

        run_dir = out / "runs" / "n4_r1"
        for name in ("truth_model.json", "BP_model.json", "jUKF_model.json", "BP_loss.csv", "jEKF_loss.csv",
                     "trace.csv"):
            assert (run_dir / name).exists()
        assert load_model(run_dir / "truth_model.json").n_states == 4
        assert len(read_table(run_dir / "BP_loss.csv")) == 4
        assert list(read_table(run_dir / "BP_loss.csv").columns) == ["iteration", "objective", "grad_norm", "wall_time"]
        assert len(read_table(run_dir / "jEKF_loss.csv")) == 60
        assert len(read_table(run_dir / "trace.csv")) == 10

    def test_deterministic_across_jobs(self, tiny_config, tmp_path):
        first, second = tmp_path / "first", tmp_path / "second"
        assert run("campaign", "--config", str(tiny_config), "--out", str(first)) == EXIT_OK
        assert run("campaign", "--config", str(tiny_config), "--out", str(second), "--jobs", "2") == EXIT_OK
        assert (first / "scorecards.csv").read_bytes() == (second / "scorecards.csv").read_bytes()
        for name in ("BP_model.json", "jEKF_model.json"):
            assert (first / "runs" / "n4_r0" / name).read_bytes() == (second / "runs" / "n4_r0" / name).read_bytes()

    def test_seed_changes_results(self, tiny_config, tmp_path):
        first, second = tmp_path / "first", tmp_path / "second"
        run("campaign", "--config", str(tiny_config), "--out", str(first), "--methods", "BP")
        run("campaign", "--config", str(tiny_config), "--out", str(second), "--methods", "BP", "--seed", "9")
        assert (first / "scorecards.csv").read_bytes() != (second / "scorecards.csv").read_bytes()

    def test_failed_method_is_recorded(self, tiny_config, tmp_path, monkeypatch):
        fit_method = process_campaign.fit_method

        def failing(method, *args, **kwargs):
            if method == "jEKF":
                raise RuntimeError("boom")
            return fit_method(method, *args, **kwargs)

        monkeypatch.setattr(process_campaign, "fit_method", failing)
        out = tmp_path / "results"
        assert run("campaign", "--config", str(tiny_config), "--out", str(out)) == EXIT_RUN_ERRORS
        errors = read_table(out / "errors.csv")
        assert list(errors["method"]) == ["jEKF", "jEKF"]
        assert list(errors["error"]) == ["boom", "boom"]
        scores = read_table(out / "scorecards.csv")
        assert set(scores["method"]) == {"BP", "jUKF"}
        assert len(scores) == 4


class TestPlotData:
    def test_summaries(self, tiny_config, tmp_path):
        out = tmp_path / "results"
        run("campaign", "--config", str(tiny_config), "--out", str(out))
        assert run("plot-data", "--out", str(out)) == EXIT_OK

        corr = read_table(out / "plot_param_corr.csv")
        assert list(corr.columns) == ["method", "n", "mean", "q1", "q3", "count"]
        assert sorted(corr["method"]) == ["BP", "jEKF", "jUKF"]
        assert (corr["count"] == 2).all()
        assert (corr["q1"] <= corr["q3"]).all()
        for name in ("plot_runtime.csv", "plot_param_rmse.csv", "plot_state_mse.csv"):
            assert len(read_table(out / name)) == 3
        trace = read_table(out / "plot_trace.csv")
        assert set(trace["n"]) == {4}
        assert len(trace) == 10

    def test_missing_campaign(self, tmp_path):
        assert run("plot-data", "--out", str(tmp_path / "nothing")) == EXIT_RUN_ERRORS


class TestSingleRunCommands:
    def test_generate_fit_score(self, tiny_config, tmp_path):
        data, fits = tmp_path / "data", tmp_path / "fits"
        common = ["--config", str(tiny_config), "--seed", "3"]
        assert run("generate", *common, "--out", str(data)) == EXIT_OK
        assert read_table(data / "measurements.csv").shape == (120, 2)

        assert run("fit", *common, "--data", str(data), "--method", "jEKF", "--out", str(fits)) == EXIT_OK
        assert (fits / "jEKF_model.json").exists()

        model = str(fits / "jEKF_model.json")
        assert run("score", *common, "--data", str(data), "--model", model, "--out", str(fits)) == EXIT_OK
        score = read_table(fits / "score.csv")
        assert score["method"][0] == "jEKF"
        assert score["n"][0] == 4

    def test_fit_debug_dumps(self, tiny_config, tmp_path):
        data, fits = tmp_path / "data", tmp_path / "fits"
        common = ["--config", str(tiny_config), "--seed", "3"]
        assert run("generate", *common, "--out", str(data)) == EXIT_OK
        assert run("fit", *common, "--data", str(data), "--method", "BP", "--out", str(fits),
                   "--dump-trajectories") == EXIT_OK

        trajectory = read_table(fits / "BP_trajectory.csv")
        assert list(trajectory["step"]) == list(range(1, 9))
        assert "x_post_3" in trajectory.columns
        adjoints = read_table(fits / "BP_adjoints.csv")
        assert len(adjoints) == 8
        assert "d_x_0" in adjoints.columns

    def test_fit_without_flag_writes_no_dumps(self, tiny_config, tmp_path):
        data, fits = tmp_path / "data", tmp_path / "fits"
        common = ["--config", str(tiny_config), "--seed", "3"]
        run("generate", *common, "--out", str(data))
        assert run("fit", *common, "--data", str(data), "--method", "jEKF", "--out", str(fits)) == EXIT_OK
        assert not (fits / "jEKF_trajectory.csv").exists()
        assert not (fits / "jEKF_adjoints.csv").exists()


class TestConfiguration:
    def test_invalid_values(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"sizes": []}))
        assert run("campaign", "--config", str(path), "--out", str(tmp_path)) == EXIT_CONFIG_ERROR

    def test_warmup_longer_than_segment(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"train": {"segment_length": 4, "warmup": 4}}))
        assert run("campaign", "--config", str(path), "--out", str(tmp_path)) == EXIT_CONFIG_ERROR

    def test_unreadable_file(self, tmp_path):
        assert run("campaign", "--config", str(tmp_path / "missing.json")) == EXIT_CONFIG_ERROR
        path = tmp_path / "list.json"
        path.write_text("[1, 2]")
        assert run("campaign", "--config", str(path)) == EXIT_CONFIG_ERROR

    def test_flags_override_file(self, tiny_config, tmp_path):
        args = build_parser().parse_args(
            ["campaign", "--config", str(tiny_config), "--sizes", "6", "8", "--seed", "5", "--out", str(tmp_path)]
        )
        config = load_config(args)
        assert config.sizes == [6, 8]
        assert config.master_seed == 5
        assert config.output_dir == str(tmp_path)
        assert config.train.n_iterations == 4

    def test_paper_scale_preset(self):
        config = load_config(build_parser().parse_args(["campaign", "--paper-scale"]))
        assert config.sizes == [10, 20, 30, 40, 50, 60]
        assert config.replicates_for(10) == 300
        assert config.train.n_iterations == 125_000
