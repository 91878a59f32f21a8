"""Report emission: CSV logs, JSON metrics and matplotlib figures."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import IoError  # noqa: E402
from .train import MetricsReport, TrainResult, write_log  # noqa: E402

FORMATS = ("csv", "json", "svg", "png")

# fixed ids and no date stamp keep rendered SVG byte-identical across runs
plt.rcParams.update({
    "svg.hashsalt": "phnn",
    "figure.figsize": (6.0, 3.6),
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.2,
})
_METADATA = {"svg": {"Date": None, "Creator": None}, "png": {"Software": None}}

Result = Union[TrainResult, MetricsReport]


def _report(result: Result) -> MetricsReport:
    return result.report if isinstance(result, TrainResult) else result


def _log_rows(result: Result) -> list:
    if isinstance(result, TrainResult):
        return result.log_rows
    return [(step, 0, float("nan"), loss) for step, loss in result.loss_curve]


def plot_curves(results: Mapping[str, Result], title: str = "training loss"):
    """One loss curve per run on a shared log-scale axis."""
    fig, ax = plt.subplots()
    for label, result in results.items():
        curve = _report(result).loss_curve
        if curve:
            steps, losses = zip(*curve)
            ax.plot(steps, losses, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if all(v > 0 for r in results.values() for _, v in _report(r).loss_curve):
        ax.set_yscale("log")
    ax.set_title(title)
    if len(results) > 1:
        ax.legend()
    fig.tight_layout()
    return fig


def emit_report(results: Mapping[str, Result], format: str, out_dir, stem: str = "report") -> list:
    """Write ``results`` (run label -> result) in one format; returns the written paths.

    ``csv`` writes one ``<stem>_<label>.csv`` per run with the training-log header,
    ``json`` one MetricsReport document per run, ``svg``/``png`` a single figure.
    """
    if not results:
        raise IoError("no results to report")
    if format not in FORMATS:
        raise IoError(f"unknown report format {format!r}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out_dir}: {exc}") from exc
    paths = []
    try:
        if format == "csv":
            for label, result in results.items():
                path = out_dir / f"{stem}_{label}.csv"
                write_log(path, _log_rows(result))
                paths.append(path)
        elif format == "json":
            for label, result in results.items():
                path = out_dir / f"{stem}_{label}.json"
                path.write_text(_report(result).to_json())
                paths.append(path)
        else:
            fig = plot_curves(results)
            path = out_dir / f"{stem}.{format}"
            fig.savefig(path, format=format, metadata=_METADATA[format])
            plt.close(fig)
            paths.append(path)
    except OSError as exc:
        raise IoError(f"failed writing report: {exc}") from exc
    return paths


def plot_bars(labels, values, ylabel: str, path) -> Path:
    """Bar chart for per-n comparisons (parameter ratios, accuracies, SED scores)."""
    fig, ax = plt.subplots()
    ax.bar([str(x) for x in labels], values, color="tab:blue")
    ax.set_xlabel("n")
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    path = Path(path)
    fmt = path.suffix.lstrip(".") or "svg"
    fig.savefig(path, format=fmt, metadata=_METADATA.get(fmt))
    plt.close(fig)
    return path
