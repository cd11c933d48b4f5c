"""Result tables (CSV / JSON-lines) and the figures rendered alongside them.

Every metric row carries the oracle value it was checked against and a pass
flag.  CSV is the primary format with a fixed column set and order; reruns
with the same config and seed produce byte-identical CSV.  Figures are
written next to the delimited output as PNG files.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

plt.rcParams["figure.dpi"] = 110
plt.rcParams["font.size"] = 9

CSV_COLUMNS = ("experiment", "config", "metric", "value", "oracle", "passed")


@dataclass(frozen=True)
class ResultRow:
    experiment: str
    config: str
    metric: str
    value: float
    oracle: float
    passed: bool


def config_echo(config: dict) -> str:
    """Canonical one-line config serialization for the `config` column."""
    return json.dumps(config, sort_keys=True, separators=(",", ":"))


def _format(value: float) -> str:
    if isinstance(value, bool):
        return str(value)
    if isinstance(value, int):
        return str(value)
    return repr(float(value))


def rows_to_csv(rows: Sequence[ResultRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([
            row.experiment, row.config, row.metric,
            _format(row.value), _format(row.oracle), str(row.passed),
        ])
    return buf.getvalue()


def write_csv(rows: Sequence[ResultRow], path: str | Path) -> None:
    Path(path).write_text(rows_to_csv(rows))


def write_jsonl(rows: Sequence[ResultRow], path: str | Path) -> None:
    with open(path, "w") as fp:
        for row in rows:
            fp.write(json.dumps({
                "experiment": row.experiment,
                "config": row.config,
                "metric": row.metric,
                "value": row.value,
                "oracle": row.oracle,
                "passed": row.passed,
            }) + "\n")


# -- figures ----------------------------------------------------------------


def render_verify_figure(rows: Sequence[ResultRow], path: str | Path) -> None:
    """One horizontal bar per check: measured value with its oracle marker."""
    labels = [f"{r.experiment}:{r.metric}" for r in rows]
    values = [r.value for r in rows]
    oracles = [r.oracle for r in rows]
    colors = ["#2a9d4e" if r.passed else "#d43d2a" for r in rows]
    y = range(len(rows))

    fig, ax = plt.subplots(figsize=(8, max(3, 0.28 * len(rows))))
    ax.barh(y, values, color=colors, alpha=0.85, height=0.62)
    ax.plot(oracles, y, "k|", markersize=11, label="oracle")
    ax.set_yticks(list(y), labels)
    ax.invert_yaxis()
    ax.set_xlabel("metric value (bar) vs oracle (tick)")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def render_sweep_figure(rows: Sequence[ResultRow], axis: str,
                        path: str | Path) -> None:
    """Per-metric panels of value and oracle against the swept axis."""
    metrics = sorted({r.metric for r in rows})
    fig, axes = plt.subplots(
        1, len(metrics), figsize=(3.4 * len(metrics), 3.0), squeeze=False)
    for ax, metric in zip(axes[0], metrics):
        pts = [(r, _axis_value(r.experiment)) for r in rows if r.metric == metric]
        pts.sort(key=lambda p: p[1])
        xs = [x for _, x in pts]
        ax.plot(xs, [r.value for r, _ in pts], "o-", label="measured")
        ax.plot(xs, [r.oracle for r, _ in pts], "s--", color="gray",
                label="oracle", alpha=0.8)
        ax.set_xlabel(axis)
        ax.set_title(metric)
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _axis_value(experiment: str) -> float:
    # Sweep experiment ids look like "budget=4096".
    try:
        return float(experiment.split("=", 1)[1])
    except (IndexError, ValueError):
        return 0.0
