"""Top-1 accuracy, H-score, H2-CV and report aggregation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction


class MetricError(ValueError):
    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(f"{code}: {message}")


def accuracy_known(preds, known: set) -> float:
    """Top-1 accuracy over samples whose true class is known; an UNKNOWN
    prediction counts as wrong."""
    rows = [r for r in preds if r.true_class in known]
    if not rows:
        raise MetricError("no_known_samples", "no samples with a known true class")
    correct = sum(1 for r in rows if r.predicted == r.true_class)
    return correct / len(rows)


def accuracy_unknown(preds, unknown: set) -> float:
    """Fraction of unknown-class samples rejected as UNKNOWN."""
    rows = [r for r in preds if r.true_class in unknown]
    if not rows:
        raise MetricError("no_unknown_samples", "no samples with an unknown true class")
    rejected = sum(1 for r in rows if r.predicted is None)
    return rejected / len(rows)


def h_score(acc_known: float, acc_unknown: float) -> float:
    """Harmonic mean of known accuracy and unknown rejection accuracy."""
    if not (0 <= acc_known <= 1 and 0 <= acc_unknown <= 1):
        raise MetricError("bad_accuracy", "accuracies must lie in [0, 1]")
    if acc_known == 0 or acc_unknown == 0:
        return 0.0
    return 2 * acc_known * acc_unknown / (acc_known + acc_unknown)


@dataclass
class MetricSeries:
    values: list[float]
    level_labels: list[Fraction]


def h2_cv(series: MetricSeries) -> float:
    """Coefficient of variation of the H-score series: population standard
    deviation over mean, times 100."""
    vals = series.values
    if not vals:
        raise MetricError("empty_series", "H-score series is empty")
    mean = sum(vals) / len(vals)
    if mean <= 0:
        raise MetricError("zero_mean", "H-score series mean must be positive")
    var = sum((v - mean) ** 2 for v in vals) / len(vals)
    return math.sqrt(var) / mean * 100.0


@dataclass(frozen=True)
class TaskResult:
    target_domain: str
    level: Fraction
    acc_known: float
    acc_unknown: float
    h_score: float


@dataclass
class EvalReport:
    domains: list[str]
    levels: list[Fraction]
    grid: dict  # (domain, level) -> TaskResult
    level_averages: dict  # level -> {"acc_known", "acc_unknown", "h_score"}
    mean_acc: float
    mean_h: float
    h2_cv: float


def aggregate(results: list[TaskResult]) -> EvalReport:
    """Average each metric over target domains per hybridness level, then
    over levels; H2-CV is taken over the per-level average H-scores."""
    if not results:
        raise MetricError("empty_grid", "no task results to aggregate")
    domains = sorted({r.target_domain for r in results})
    levels = sorted({r.level for r in results})
    grid = {}
    for r in results:
        key = (r.target_domain, r.level)
        if key in grid:
            raise MetricError("duplicate_cell", f"duplicate result for {key}")
        grid[key] = r
    for d in domains:
        for lv in levels:
            if (d, lv) not in grid:
                raise MetricError("missing_cell", f"no result for domain '{d}' at hybridness {lv}")
    level_averages = {}
    for lv in levels:
        cells = [grid[(d, lv)] for d in domains]
        level_averages[lv] = {
            "acc_known": sum(c.acc_known for c in cells) / len(cells),
            "acc_unknown": sum(c.acc_unknown for c in cells) / len(cells),
            "h_score": sum(c.h_score for c in cells) / len(cells),
        }
    mean_acc = sum(level_averages[lv]["acc_known"] for lv in levels) / len(levels)
    mean_h = sum(level_averages[lv]["h_score"] for lv in levels) / len(levels)
    cv = h2_cv(MetricSeries([level_averages[lv]["h_score"] for lv in levels], levels))
    return EvalReport(
        domains=domains,
        levels=levels,
        grid=grid,
        level_averages=level_averages,
        mean_acc=mean_acc,
        mean_h=mean_h,
        h2_cv=cv,
    )


def render_table(report: EvalReport, title: str = "") -> str:
    """Aligned text table: one row per target domain plus an average row,
    metric columns per hybridness level, percentages with 2 decimals."""
    def pct(x):
        return f"{100 * x:6.2f}"

    headers = ["domain"]
    for lv in report.levels:
        headers += [f"Acc@{lv}", f"H@{lv}"]
    headers += ["AvgAcc", "AvgH", "H2-CV"]
    lines = []
    if title:
        lines.append(title)
    rows = []
    for d in report.domains:
        row = [d]
        for lv in report.levels:
            c = report.grid[(d, lv)]
            row += [pct(c.acc_known), pct(c.h_score)]
        accs = [report.grid[(d, lv)].acc_known for lv in report.levels]
        hs = [report.grid[(d, lv)].h_score for lv in report.levels]
        row += [pct(sum(accs) / len(accs)), pct(sum(hs) / len(hs)), ""]
        rows.append(row)
    avg_row = ["Average"]
    for lv in report.levels:
        a = report.level_averages[lv]
        avg_row += [pct(a["acc_known"]), pct(a["h_score"])]
    avg_row += [pct(report.mean_acc), pct(report.mean_h), f"{report.h2_cv:6.2f}"]
    rows.append(avg_row)
    widths = [max(len(h), max(len(r[i]) for r in rows)) for i, h in enumerate(headers)]
    lines.append("  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)))
    for r in rows:
        lines.append("  ".join(r[i].ljust(widths[i]) for i in range(len(headers))))
    return "\n".join(lines)


def report_to_dict(report: EvalReport) -> dict:
    return {
        "domains": report.domains,
        "levels": [str(lv) for lv in report.levels],
        "grid": {
            f"{d}|{lv}": {
                "acc_known": report.grid[(d, lv)].acc_known,
                "acc_unknown": report.grid[(d, lv)].acc_unknown,
                "h_score": report.grid[(d, lv)].h_score,
            }
            for d in report.domains
            for lv in report.levels
        },
        "level_averages": {str(lv): report.level_averages[lv] for lv in report.levels},
        "mean_acc": report.mean_acc,
        "mean_h": report.mean_h,
        "h2_cv": report.h2_cv,
    }


def save_report(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report_to_dict(report), f, indent=2)
        f.write("\n")
