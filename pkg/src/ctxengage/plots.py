"""SVG figures from report CSVs: model R2 bars, sequence-length curves, SHAP bars.

Figures are pure functions of their input tables: the SVG hash salt is fixed
and the date metadata is dropped so identical inputs give identical bytes.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

RC = {"svg.hashsalt": "ctxengage", "svg.fonttype": "none", "font.size": 9}


class CSVParseError(ValueError):
    pass


def read_table(path, required: dict) -> pd.DataFrame:
    """Read a CSV, checking field counts and types; errors name the line.

    ``required`` maps column name -> "float" | "int" | "str".
    """
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CSVParseError(f"{path}:1: empty file")
    header = rows[0]
    missing = [c for c in required if c not in header]
    if missing:
        raise CSVParseError(f"{path}:1: missing column(s) {missing}")
    out = {c: [] for c in required}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise CSVParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        for c, kind in required.items():
            v = row[header.index(c)]
            try:
                if kind == "float":
                    out[c].append(float(v) if v != "" else np.nan)
                elif kind == "int":
                    out[c].append(int(v))
                else:
                    out[c].append(v)
            except ValueError:
                raise CSVParseError(f"{path}:{lineno}: column {c!r} has non-{kind} value {v!r}") from None
    return pd.DataFrame(out)


def _save(fig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)


def plot_models(report: pd.DataFrame, path) -> int:
    """Bar chart of mean R2 per model with std whiskers; returns the bar count."""
    if len(report) == 0:
        raise ValueError("report has no rows")
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6, 3.2))
        x = np.arange(len(report))
        err = np.nan_to_num(report["r2_std"].to_numpy(dtype=float))
        bars = ax.bar(x, report["r2_mean"], yerr=err, capsize=3, color="#4c72b0")
        ax.set_xticks(x, [f"M{int(m)}" for m in report["model"]])
        ax.set_ylabel("R$^2$ (test)")
        ax.set_ylim(0, max(0.05, float(np.nanmax(report["r2_mean"] + err)) * 1.15))
        ax.set_title("Predictive performance by model")
        n = len(bars)
        _save(fig, path)
    return n


def plot_sweep(sweep: pd.DataFrame, path) -> int:
    """Mean R2 against history length, one line per channel; returns the line count."""
    if len(sweep) == 0:
        raise ValueError("sweep has no rows")
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        channels = sorted(sweep["channel"].unique())
        for ch in channels:
            d = sweep[sweep["channel"] == ch].sort_values("length")
            ax.errorbar(d["length"], d["mean_r2"], yerr=np.nan_to_num(d["std"].to_numpy(dtype=float)),
                        marker="o", capsize=2, label=ch)
        ax.set_xscale("log")
        ax.set_xlabel("sequence length (session hours)")
        ax.set_ylabel("R$^2$ (test)")
        ax.legend(frameon=False)
        ax.set_title("Performance by sequence length")
        _save(fig, path)
    return len(channels)


def plot_importance(importance: pd.DataFrame, path, top: int = 20) -> int:
    """Horizontal bars of mean |SHAP| for the top groups; returns the bar count."""
    if len(importance) == 0:
        raise ValueError("importance table has no rows")
    d = importance.sort_values("mean_abs_shap", ascending=False, kind="mergesort").head(top)[::-1]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 0.25 * len(d) + 1))
        bars = ax.barh(np.arange(len(d)), d["mean_abs_shap"], color="#c44e52")
        ax.set_yticks(np.arange(len(d)), d["group"])
        ax.set_xlabel("mean |SHAP value|")
        ax.set_title("Feature importance")
        n = len(bars)
        _save(fig, path)
    return n
