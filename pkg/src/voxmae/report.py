"""Multi-run report assembly: mean±std table, best-per-column marks, paired tests, plots."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .errors import InvalidInputError
from .metrics import mean_std, paired_ttest

LOWER_IS_BETTER = {"mae"}
METRIC_ORDER = ["qwk", "auc", "spec_at_sens80", "sens_at_spec80", "accuracy", "dice", "mae"]
HIDDEN_SUFFIX = "_threshold"
PRIMARY_METRICS = ("qwk", "auc", "dice", "mae")


@dataclass
class Entry:
    model: str
    task: str
    metric: str
    mean: float
    std: Optional[float]
    n_runs: int
    values: List[float]


@dataclass
class Comparison:
    model_a: str
    model_b: str
    task: str
    metric: str
    t: float
    p: float
    degenerate: bool


@dataclass
class OperatingPointRecord:
    model: str
    task: str
    fixed_metric: str
    level: float
    achieved: float
    threshold: float


@dataclass
class MetricsReport:
    entries: List[Entry] = field(default_factory=list)
    comparisons: List[Comparison] = field(default_factory=list)
    operating_points: List[OperatingPointRecord] = field(default_factory=list)
    best: Dict[str, str] = field(default_factory=dict)  # column -> model
    columns: List[str] = field(default_factory=list)
    models: List[str] = field(default_factory=list)

    def cell(self, model, column):
        task, metric = column.split("/", 1)
        for e in self.entries:
            if e.model == model and e.task == task and e.metric == metric:
                return e
        return None

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, float) and not math.isfinite(o):
        return None
    raise TypeError(type(o))


def _metric_key(m):
    return (METRIC_ORDER.index(m) if m in METRIC_ORDER else len(METRIC_ORDER), m)


def primary_metric(metrics):
    for m in PRIMARY_METRICS:
        if m in metrics:
            return m
    return sorted(metrics, key=_metric_key)[0]


def assemble_report(runs: Dict[str, Dict[str, List[Dict[str, float]]]], comparisons=(), level=0.80,
                    all_metrics=False) -> MetricsReport:
    """Build a report from ``runs[model][task] = [test_metrics per run, ...]``.

    ``comparisons`` lists (model_a, model_b) pairs; each is tested with a
    paired t-test over runs on every task's primary metric (on every metric
    with ``all_metrics``).
    """
    if not runs:
        raise InvalidInputError("no runs to report")
    rep = MetricsReport(models=list(runs))
    tasks: List[str] = []
    metrics_by_task: Dict[str, set] = {}
    for model, per_task in runs.items():
        for task, recs in per_task.items():
            if task not in tasks:
                tasks.append(task)
            for r in recs:
                metrics_by_task.setdefault(task, set()).update(
                    k for k in r if not k.endswith(HIDDEN_SUFFIX)
                )
    rep.columns = [f"{t}/{m}" for t in tasks for m in sorted(metrics_by_task[t], key=_metric_key)]

    counts = {len(recs) for per_task in runs.values() for recs in per_task.values()}
    if len(counts) > 1:
        warnings.warn(f"inconsistent run counts across cells: {sorted(counts)}", UserWarning, stacklevel=2)

    for model, per_task in runs.items():
        for task in tasks:
            recs = per_task.get(task, [])
            for m in sorted(metrics_by_task[task], key=_metric_key):
                vals = [float(r[m]) for r in recs if m in r and r[m] is not None and math.isfinite(r[m])]
                if not vals:
                    continue
                mean, std = mean_std(vals)
                rep.entries.append(Entry(model, task, m, mean, std, len(vals), vals))
            for fixed, key in (("spec", "sens_at_spec80"), ("sens", "spec_at_sens80")):
                vals = [r[key] for r in recs if key in r]
                thr = [r.get(key + HIDDEN_SUFFIX, float("nan")) for r in recs if key in r]
                if vals:
                    rep.operating_points.append(
                        OperatingPointRecord(model, task, fixed, level, float(np.mean(vals)), float(np.mean(thr)))
                    )

    for col in rep.columns:
        task, metric = col.split("/", 1)
        cells = [(e.mean, e.model) for e in rep.entries if e.task == task and e.metric == metric]
        if not cells:
            continue
        pick = min if metric in LOWER_IS_BETTER else max
        rep.best[col] = pick(cells, key=lambda c: c[0])[1]

    tested = rep.columns if all_metrics else [f"{t}/{primary_metric(metrics_by_task[t])}" for t in tasks]
    for a, b in comparisons:
        for col in tested:
            ea, eb = rep.cell(a, col), rep.cell(b, col)
            if ea is None or eb is None:
                continue
            if len(ea.values) != len(eb.values) or len(ea.values) < 2:
                continue
            res = paired_ttest(ea.values, eb.values)
            task, metric = col.split("/", 1)
            rep.comparisons.append(Comparison(a, b, task, metric, res.t, res.p, res.degenerate))
    return rep


def format_cell(e: Optional[Entry], bold=False, digits=3):
    if e is None:
        return ""
    s = f"{e.mean:.{digits}f}" if e.std is None else f"{e.mean:.{digits}f}±{e.std:.{digits}f}"
    return f"**{s}**" if bold else s


def write_table_csv(rep: MetricsReport, path, digits=3):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model"] + rep.columns)
        for model in rep.models:
            w.writerow([model] + [format_cell(rep.cell(model, c), rep.best.get(c) == model, digits)
                                  for c in rep.columns])
    return path


def write_comparisons_csv(rep: MetricsReport, path):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model_a", "model_b", "task", "metric", "t", "p", "degenerate"])
        for c in rep.comparisons:
            w.writerow([c.model_a, c.model_b, c.task, c.metric, repr(c.t), repr(c.p), int(c.degenerate)])
    return path


def render_markdown(rep: MetricsReport, digits=3) -> str:
    lines = ["| model | " + " | ".join(rep.columns) + " |", "|---" * (len(rep.columns) + 1) + "|"]
    for model in rep.models:
        cells = [format_cell(rep.cell(model, c), rep.best.get(c) == model, digits) for c in rep.columns]
        lines.append(f"| {model} | " + " | ".join(cells) + " |")
    if rep.comparisons:
        lines += ["", "| A | B | cell | t | p |", "|---|---|---|---|---|"]
        for c in rep.comparisons:
            p = "degenerate" if c.degenerate else f"{c.p:.4g}"
            t = "" if c.degenerate else f"{c.t:.3f}"
            lines.append(f"| {c.model_a} | {c.model_b} | {c.task}/{c.metric} | {t} | {p} |")
    return "\n".join(lines) + "\n"


def plot_curves(curves: Dict[str, list], path, ylabel=None):
    """Data-efficiency plot: one line (mean ± std band) per curve."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, rows in curves.items():
        x = np.array([r["size"] for r in rows])
        y = np.array([r["mean"] for r in rows])
        s = np.array([r["std"] or 0.0 for r in rows])
        ax.plot(x, y, marker="o", label=name)
        ax.fill_between(x, y - s, y + s, alpha=0.2)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("finetuning samples")
    ax.set_ylabel(ylabel or (rows[0]["metric"] if curves else "metric"))
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def write_report(rep: MetricsReport, out_dir, curves=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "table": write_table_csv(rep, out / "table.csv"),
        "comparisons": write_comparisons_csv(rep, out / "comparisons.csv"),
    }
    (out / "summary.json").write_text(rep.to_json())
    (out / "table.md").write_text(render_markdown(rep))
    paths["summary"] = out / "summary.json"
    paths["markdown"] = out / "table.md"
    if curves:
        paths["plot"] = plot_curves(curves, out.parent / "plots" / "data_efficiency.png")
    return paths
