"""Aggregate run reports into a variant x type-filter table and a bar chart."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .episodes import EvalResult  # noqa: E402

# config sections that must agree before runs can share a table
_COMPARABLE = ("data", "episodes", "mcpm", "head", "seed", "dtype")


class ReportError(ValueError):
    pass


def load_run(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise FileNotFoundError(f"no report at {path}") from None
    except json.JSONDecodeError as exc:
        raise ReportError(f"unreadable report {path}: {exc}") from None


def _comparable(cfg: dict) -> dict:
    return {k: cfg.get(k) for k in _COMPARABLE}


def build_table(reports: list[dict]) -> tuple[list[str], list[str], dict]:
    """Rows (variants), columns (type filters) and ``{(row, col): EvalResult}``."""
    if not reports:
        raise ReportError("no reports given")
    ref = _comparable(reports[0]["config"])
    rows, cols, cells = [], [], {}
    for rep in reports:
        cfg = _comparable(rep["config"])
        if cfg != ref:
            diff = sorted(k for k in _COMPARABLE if cfg[k] != ref[k])
            raise ReportError(f"incompatible configs: {rep['variant']} differs in {','.join(diff)}")
        if rep["variant"] in rows:
            raise ReportError(f"duplicate variant {rep['variant']}")
        rows.append(rep["variant"])
        for tf, res in rep["results"].items():
            if tf not in cols:
                cols.append(tf)
            cells[rep["variant"], tf] = EvalResult.from_json(res)
    return rows, cols, cells


def write_csv(path, rows, cols, cells) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", *cols])
        for r in rows:
            w.writerow([r, *(cells[r, c].cell() if (r, c) in cells else "" for c in cols)])


def plot_bars(path, rows, cols, cells, title: str = "Few-shot anomaly detection accuracy") -> None:
    fig, ax = plt.subplots(figsize=(1.2 + 1.4 * len(cols) * max(1, len(rows)) / 2, 3.6))
    width = 0.8 / max(1, len(rows))
    x = np.arange(len(cols))
    for i, r in enumerate(rows):
        means = [cells[r, c].mean if (r, c) in cells else np.nan for c in cols]
        stds = [cells[r, c].std if (r, c) in cells else 0.0 for c in cols]
        ax.bar(x + (i - (len(rows) - 1) / 2) * width, means, width, yerr=stds, capsize=3, label=r)
    ax.axhline(0.5, color="0.5", lw=0.8, ls="--")
    ax.set_xticks(x, cols)
    ax.set_ylim(0, 1)
    ax.set_ylabel("accuracy")
    ax.set_title(title)
    ax.legend(fontsize=8, loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def make_report(run_paths, out_dir) -> tuple[Path, Path]:
    rows, cols, cells = build_table([load_run(p) for p in run_paths])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, png_path = out_dir / "table.csv", out_dir / "accuracy.png"
    write_csv(csv_path, rows, cols, cells)
    plot_bars(png_path, rows, cols, cells)
    return csv_path, png_path
