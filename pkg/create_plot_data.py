"""Aggregate a campaign directory into plot-ready CSVs.

Each summary has one row per (method, n) with the mean and the first and third
quartiles (linear interpolation between order statistics). Non-finite scores
from diverged cross-validation runs are left out of the summary; ``count``
says how many runs contributed.
"""

from pathlib import Path
import logging
import sys

import pandas as pd

from estimation.errors import EmptyCampaignError
from estimation.metrics import quartile_summary
from estimation.serialization import read_table, write_table

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = ["method", "n", "mean", "q1", "q3", "count"]

PLOTS = {
    "plot_runtime.csv": ("timings.csv", "wall_time_per_iteration"),
    "plot_param_corr.csv": ("scorecards.csv", "param_corr"),
    "plot_param_rmse.csv": ("scorecards.csv", "param_rmse"),
    "plot_state_mse.csv": ("scorecards.csv", "state_mse"),
}


def summarize(frame: pd.DataFrame, column: str) -> pd.DataFrame:
    rows = []
    for (method, n), group in frame.groupby(["method", "n"], sort=False):
        rows.append({"method": method, "n": int(n), **quartile_summary(group[column])})
    summary = pd.DataFrame(rows, columns=SUMMARY_COLUMNS)
    return summary.sort_values(["method", "n"], kind="stable").reset_index(drop=True)


def representative_run(scores: pd.DataFrame) -> tuple[int, int]:
    """Run of the smallest size whose BP correlation is nearest that size's mean."""
    pool = scores[scores["method"] == "BP"]
    if pool.empty:
        pool = scores[scores["method"] == scores["method"].iloc[0]]
    pool = pool[pool["n"] == pool["n"].min()]
    distance = (pool["param_corr"] - pool["param_corr"].mean()).abs()
    best = pool.loc[distance.sort_values(kind="stable").index[0]]
    return int(best["n"]), int(best["replicate"])


def _provenance(path: Path) -> dict:
    with open(path) as f:
        first = f.readline()
    if not first.startswith("#"):
        return {}
    return dict(item.split("=", 1) for item in first[1:].split())


def emit_plot_data(results_dir: str | Path) -> list[Path]:
    results_dir = Path(results_dir)
    scores_path = results_dir / "scorecards.csv"
    if not scores_path.exists():
        raise EmptyCampaignError(f"No scorecards found in {results_dir}")
    scores = read_table(scores_path)
    if scores.empty:
        raise EmptyCampaignError(f"Campaign in {results_dir} has no successful runs")
    provenance = _provenance(scores_path)

    tables = {"scorecards.csv": scores, "timings.csv": read_table(results_dir / "timings.csv")}
    written = []
    for name, (source, column) in PLOTS.items():
        written.append(write_table(summarize(tables[source], column), results_dir / name, provenance))

    n, replicate = representative_run(scores)
    trace_path = results_dir / "runs" / f"n{n}_r{replicate}" / "trace.csv"
    if trace_path.exists():
        trace = read_table(trace_path)
        trace.insert(0, "replicate", replicate)
        trace.insert(0, "n", n)
        written.append(write_table(trace, results_dir / "plot_trace.csv", provenance))
    else:
        logger.warning(f"Representative run n={n} replicate={replicate} has no trace file")

    logger.info(f"Plot data written to {results_dir} ({len(written)} file(s))")
    return written


if __name__ == "__main__":
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[logging.StreamHandler(sys.stdout)],
    )
    emit_plot_data(sys.argv[1] if len(sys.argv) > 1 else "results")
