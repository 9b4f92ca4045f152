"""Artifact files for a scenario run: CSV tables and SVG figures."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import detect_metrics as dm
from .sim import write_trajectory_csv


def _fmt(v) -> str:
    return repr(float(v))


def _write_rows(path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow(row)
    return Path(path)


def write_estimator_csvs(out_dir, name, times, run, flags) -> tuple[Path, Path]:
    """Per-step log ``<name>_trajectory.csv`` and detection log ``<name>_innovation.csv``.

    The log has ``t, mean_1..n, innov_1..p, ratio_1..p``; the detection log
    has ``t, ratio_1..p, flag_1..p``.
    """
    out_dir = Path(out_dir)
    n, p = run.means.shape[1], run.innovations.shape[1]
    traj = _write_rows(
        out_dir / f"{name}_trajectory.csv",
        ["t"] + [f"mean_{i + 1}" for i in range(n)] + [f"innov_{j + 1}" for j in range(p)]
        + [f"ratio_{j + 1}" for j in range(p)],
        ([_fmt(t)] + [_fmt(v) for v in np.concatenate([x, v, r])]
         for t, x, v, r in zip(times, run.means, run.innovations, run.ratios)))
    inn = _write_rows(
        out_dir / f"{name}_innovation.csv",
        ["t"] + [f"ratio_{j + 1}" for j in range(p)] + [f"flag_{j + 1}" for j in range(p)],
        ([_fmt(t)] + [_fmt(a) for a in r] + [str(int(b)) for b in f]
         for t, r, f in zip(times, run.ratios, flags)))
    return traj, inn


def write_rel_err_csv(path, times, series: dict) -> Path:
    names = list(series)
    cols = np.column_stack([np.asarray(series[k], dtype=float) for k in names])
    return _write_rows(path, ["t"] + names,
                       ([_fmt(t)] + [_fmt(v) for v in row] for t, row in zip(times, cols)))


def read_table(path) -> tuple[list[str], np.ndarray]:
    with open(Path(path), newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        rows = [[float(v) for v in row] for row in rd]
    return header, np.array(rows, dtype=float).reshape(len(rows), len(header))


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "powerdse"
    return plt


def plot_rel_error(path, times, series: dict, title: str = "") -> Path:
    """Relative state-error norm against time, one line per estimator, log scale."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    for name, err in series.items():
        ax.semilogy(times, np.where(np.asarray(err) > 0, err, np.nan), label=name, lw=1.2)
    ax.set_xlabel("t (s)")
    ax.set_ylabel("relative error norm")
    if title:
        ax.set_title(title)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return Path(path)


def plot_ranking(path, table: list[dict]) -> Path:
    """Grouped bars of final relative error per run and estimator."""
    plt = _pyplot()
    runs = list(dict.fromkeys(r["run"] for r in table))
    names = list(dict.fromkeys(r["estimator"] for r in table))
    width = 0.8 / max(len(names), 1)
    fig, ax = plt.subplots(figsize=(max(5.0, 1.5 * len(runs) + 2), 4.0))
    for j, name in enumerate(names):
        vals = [next((r["final_rel_err"] for r in table
                      if r["run"] == run and r["estimator"] == name), np.nan) for run in runs]
        ax.bar(np.arange(len(runs)) + j * width, vals, width, label=name)
    ax.set_xticks(np.arange(len(runs)) + 0.4 - width / 2)
    ax.set_xticklabels(runs, rotation=20, ha="right")
    ax.set_yscale("log")
    ax.set_ylabel("final relative error norm")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return Path(path)


def write_result(result, out_dir) -> dict:
    """Write every artifact of a :class:`ScenarioResult`; returns name -> path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {}
    truth_path = out_dir / "truth.csv"
    write_trajectory_csv(truth_path, result.times, result.truth, result.measured)
    files["truth"] = truth_path
    for name, run in result.runs.items():
        traj, inn = write_estimator_csvs(out_dir, name, result.times, run, result.flags[name])
        files[f"{name}_trajectory"] = traj
        files[f"{name}_innovation"] = inn
    series = {k: m.rel_err_norm for k, m in result.metrics.items()}
    files["rel_err"] = write_rel_err_csv(out_dir / "rel_err.csv", result.times, series)
    summary = out_dir / "summary.csv"
    dm.write_summary_csv(summary, list(result.metrics.items()))
    files["summary"] = summary
    if result.gain is not None:
        gpath = out_dir / "observer_gain.json"
        result.gain.save(gpath)
        files["gain"] = gpath
    files["plot"] = plot_rel_error(out_dir / "rel_err.svg", result.times, series,
                                   title=result.setup.scenario)
    return files


def merge_summaries(dirs) -> list[dict]:
    """Concatenate ``summary.csv`` files, ranking estimators within each run."""
    table = []
    for d in dirs:
        d = Path(d)
        rows = dm.read_summary_csv(d / "summary.csv")
        order = sorted(range(len(rows)), key=lambda i: (np.nan_to_num(rows[i]["final_rel_err"],
                                                                      nan=np.inf), i))
        for rank, i in enumerate(order, start=1):
            table.append({"run": d.name or str(d), "rank": rank, **rows[i]})
    return table


RANKING_FIELDS = ("run", "rank") + dm.SUMMARY_FIELDS


def write_ranking(fh, table) -> None:
    wr = csv.writer(fh, lineterminator="\n")
    wr.writerow(RANKING_FIELDS)
    for row in table:
        wr.writerow([row["run"], row["rank"], row["estimator"]]
                    + [repr(row[k]) for k in dm.SUMMARY_FIELDS[1:]])
