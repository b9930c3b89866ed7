"""Render sweep curves and per-domain bar charts from saved reports.

Plots only draw what a report already contains.  Each PNG carries the plotted
series as JSON in its ``icsl-series`` text chunk, so a figure can be checked
(or re-plotted) without reading pixels.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import List, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .errors import DataError  # noqa: E402
from .metrics import MetricsReport  # noqa: E402

SERIES_KEY = "icsl-series"

_RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _require(data: Mapping, key: str, where: str):
    if key not in data:
        raise DataError(f"malformed {where}: missing field {key!r}")
    return data[key]


def _number(value, field: str) -> float:
    if value is None or isinstance(value, bool):
        raise DataError(f"malformed sweep report: field {field!r} is {value!r}, expected a number")
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise DataError(f"malformed sweep report: field {field!r} is {value!r}, expected a number") from None
    if not np.isfinite(out):
        raise DataError(f"malformed sweep report: field {field!r} is not finite")
    return out


def sweep_series(report: Mapping) -> dict:
    """Validated ``{parameter, values, dice, per_class}`` from a sweep report."""
    parameter = _require(report, "parameter", "sweep report")
    rows = _require(report, "rows", "sweep report")
    if not rows:
        raise DataError("sweep report has an empty rows list; nothing to plot")
    values, dice = [], []
    classes = sorted({k[5:] for r in rows for k in r if k.startswith("dice_")})
    per_class = {c: [] for c in classes}
    for i, row in enumerate(rows):
        values.append(_number(_require(row, "value", f"sweep row {i}"), f"rows[{i}].value"))
        dice.append(_number(_require(row, "dice", f"sweep row {i}"), f"rows[{i}].dice"))
        for c in classes:
            per_class[c].append(_number(_require(row, f"dice_{c}", f"sweep row {i}"), f"rows[{i}].dice_{c}"))
    order = np.argsort(values, kind="stable")
    return {
        "kind": "sweep",
        "parameter": str(parameter),
        "values": [values[i] for i in order],
        "dice": [dice[i] for i in order],
        "per_class": {c: [v[i] for i in order] for c, v in per_class.items()},
    }


def domain_series(report: MetricsReport, metric: str = "dice") -> dict:
    domains = [d for d in report.domains if d not in report.failed]
    if not domains:
        raise DataError("report has no evaluated domains; nothing to plot")
    bars = {}
    for c in report.class_names:
        col = []
        for d in domains:
            e = report.entries.get((d, c))
            col.append(None if e is None else getattr(e, metric))
        bars[c] = col
    return {
        "kind": "domains",
        "metric": metric,
        "domains": [str(report.domain_names.get(d, d)) for d in domains],
        "bars": bars,
        "average": {c: report.class_average(c, metric) for c in report.class_names},
        "overall": report.overall(metric),
    }


def _save(fig, path: Path, series: dict) -> Path:
    blob = json.dumps(series, sort_keys=True)
    fig.savefig(path, format="png", metadata={SERIES_KEY: blob})
    plt.close(fig)
    return path


def plot_sweep(report: Mapping, path) -> Path:
    series = sweep_series(report)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        ax.plot(series["values"], series["dice"], "o-", color="k", label="average")
        for c, ys in series["per_class"].items():
            ax.plot(series["values"], ys, ".--", alpha=0.7, label=c)
        ax.set_xlabel(series["parameter"])
        ax.set_ylabel("Dice (%)")
        ax.legend(frameon=False)
        fig.tight_layout()
    return _save(fig, Path(path), series)


def plot_domains(report: MetricsReport, path, metric: str = "dice") -> Path:
    series = domain_series(report, metric)
    labels = series["domains"] + ["Avg."]
    classes = list(series["bars"])
    width = 0.8 / max(len(classes), 1)
    x = np.arange(len(labels))
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(1.1 * len(labels) + 2, 3.0))
        for k, c in enumerate(classes):
            ys = series["bars"][c] + [series["average"][c]]
            ys = [np.nan if v is None else v for v in ys]
            ax.bar(x + (k - (len(classes) - 1) / 2) * width, ys, width, label=c)
        ax.set_xticks(x)
        ax.set_xticklabels(labels)
        ax.set_ylabel("Dice (%)" if metric == "dice" else "ASD (px)")
        if series["overall"] is not None:
            ax.set_title(f"Overall {series['overall']:.2f}")
        ax.legend(frameon=False)
        fig.tight_layout()
    return _save(fig, Path(path), series)


def read_series(path) -> dict:
    """The JSON series embedded in a PNG written by this module."""
    with Image.open(path) as im:
        text = im.text.get(SERIES_KEY) if hasattr(im, "text") else None
    if text is None:
        raise DataError(f"{path}: no {SERIES_KEY} metadata")
    return json.loads(text)


def load_report(path):
    """Parse a report file: a sweep report dict or a MetricsReport."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"report {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"report {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise DataError(f"report {path} must hold a JSON object")
    if data.get("kind") == "sweep" or "rows" in data:
        sweep_series(data)
        return data
    return MetricsReport.from_dict(data)


def plot_reports(paths: Sequence, out_dir) -> List[Path]:
    """One curve per sweep report; dice and asd bars per metrics report."""
    if not paths:
        raise DataError("plot needs at least one report file")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for p in paths:
        report = load_report(p)
        stem = Path(p).stem
        if isinstance(report, MetricsReport):
            written.append(plot_domains(report, out_dir / f"{stem}_dice.png", "dice"))
            if report.overall("asd") is not None:
                written.append(plot_domains(report, out_dir / f"{stem}_asd.png", "asd"))
        else:
            written.append(plot_sweep(report, out_dir / f"{stem}_sweep.png"))
    return written
