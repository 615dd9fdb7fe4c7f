"""Deterministic report rendering shared by the CLI and the HTTP service.

Every renderer is a pure function from in-memory report objects to a string
ending in exactly one newline. Both front ends call the same function with
the same objects, which is what makes their outputs byte-identical.

Three formats are supported where it makes sense:

``text``
    Fixed-width tables for people. Percentages are rounded to one decimal,
    estimates to two; undefined values print as ``-``.
``json``
    Canonical JSON (sorted keys, compact separators) plus a trailing
    newline. Full float precision.
``csv``
    Comma-separated values with a header row, one record per line
    (LF terminated), minimal quoting. Empty cell for undefined values.

CSV schemas
-----------
Quantification (one row per experiment and scope):

    experiment        experiment identifier
    scope             "BVG-", "BVG+" or "total"
    point_estimate    mean dilution-corrected count over the dishes
    ci_low, ci_high   confidence interval bounds
    confidence_level  e.g. 0.95
    n_dishes          dishes pooled into the row
    per_dish          ";"-joined "image:dilution:count" triples, count taken
                      in the row's scope (":" and ";" are reserved and must
                      not appear in image ids)

    Warnings follow the data rows, one per line, prefixed with "# warning: ".

Parameter search (one row per evaluated configuration, enumeration order):

    score_threshold, dup_iou_threshold, ellipse_shrink, laplace_ci,
    min_instances_for_area_filter    the configuration
    mape_total, mape_bvg_plus        count-error percentages (may be empty)
    map_at_50                        detection mAP at IoU 0.50 (may be empty)
    objective                        search objective for the row
"""

from __future__ import annotations

import csv
import io
import json

from .metrics import (
    CONFUSION_COLS,
    CONFUSION_ROWS,
    VARIABILITY_METRICS,
    EvalReport,
    VariabilityReport,
    normalize_confusion,
)
from .store import canonical_json

SEARCH_CSV_COLUMNS = (
    "score_threshold",
    "dup_iou_threshold",
    "ellipse_shrink",
    "laplace_ci",
    "min_instances_for_area_filter",
    "mape_total",
    "mape_bvg_plus",
    "map_at_50",
    "objective",
)

QUANT_CSV_COLUMNS = (
    "experiment",
    "scope",
    "point_estimate",
    "ci_low",
    "ci_high",
    "confidence_level",
    "n_dishes",
    "per_dish",
)

QUANT_SCOPES = ("BVG-", "BVG+", "total")


class ReportFormatError(ValueError):
    pass


def _check_fmt(fmt: str, allowed: tuple) -> None:
    if fmt not in allowed:
        raise ReportFormatError(f"unknown format {fmt!r}, expected one of {', '.join(allowed)}")


def _pct(v, nd: int = 1) -> str:
    return "-" if v is None else f"{v:.{nd}f}"


def _cell(v) -> str:
    """Machine cell: shortest exact float text, empty for undefined."""
    if v is None:
        return ""
    if isinstance(v, float):
        return json.dumps(v)
    return str(v)


def _text_table(headers: list, rows: list, right_from: int = 1) -> list:
    """Fixed-width table lines. Columns before ``right_from`` are left-aligned."""
    cells = [list(map(str, headers))] + [list(map(str, r)) for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(headers))]
    def fmt(row):
        parts = []
        for i, val in enumerate(row):
            parts.append(val.ljust(widths[i]) if i < right_from else val.rjust(widths[i]))
        return "  ".join(parts).rstrip()
    lines = [fmt(cells[0]), "  ".join("-" * w for w in widths)]
    lines.extend(fmt(row) for row in cells[1:])
    return lines


def _threshold_key(t: float) -> str:
    return f"{t:.2f}"


# ---------------------------------------------------------------- evaluation

def eval_report_to_obj(report: EvalReport, variability: VariabilityReport | None = None) -> dict:
    obj = {
        "map_avg": report.map_avg,
        "map_at": {_threshold_key(t): v for t, v in report.map_at.items()},
        "mape_total": report.mape_total,
        "mape_per_class": dict(report.mape_per_class),
        "confusion": {
            "rows": list(CONFUSION_ROWS),
            "cols": list(CONFUSION_COLS),
            "counts": report.confusion.as_grid(),
            "row_percent": {k: v for k, v in normalize_confusion(report.confusion).items()},
        },
        "per_image_counts": report.per_image_counts,
    }
    if variability is not None:
        obj["variability"] = variability_to_obj(variability)
    return obj


def variability_to_obj(v: VariabilityReport) -> dict:
    pairs = [
        {"reference": ref, "other": other, "mape": dict(metrics)}
        for (ref, other), metrics in sorted(v.pairs.items(), key=lambda kv: (str(kv[0][0]), str(kv[0][1])))
    ]
    return {
        "pairs": pairs,
        "user_to_user": dict(v.user_to_user),
        "user_to_model": dict(v.user_to_model),
    }


def _eval_text(report: EvalReport, variability: VariabilityReport | None) -> str:
    lines = ["Detection benchmark", "==================="]
    thresholds = sorted(report.map_at)
    if len(thresholds) == 1:
        summary = [("mAP @ %s" % _threshold_key(thresholds[0]), _pct(report.map_avg))]
    else:
        summary = [("mAP @ [%s:%s]" % (_threshold_key(thresholds[0]), _threshold_key(thresholds[-1])),
                    _pct(report.map_avg))]
        for t in thresholds:
            summary.append(("mAP @ %s" % _threshold_key(t), _pct(report.map_at[t])))
    summary.append(("count MAPE, total", _pct(report.mape_total)))
    for cls in ("BVG+", "BVG-"):
        summary.append(("count MAPE, %s" % cls, _pct(report.mape_per_class.get(cls))))
    lines.extend(_text_table(["metric", "percent"], summary))

    lines.append("")
    lines.append("Class confusion, counts")
    lines.append("-----------------------")
    grid = report.confusion.as_grid()
    rows = []
    for name, row in zip(CONFUSION_ROWS, grid):
        rows.append([name] + ["-" if v is None else str(v) for v in row])
    lines.extend(_text_table([r"actual \ counted"] + list(CONFUSION_COLS), rows))

    lines.append("")
    lines.append("Class confusion, row percent")
    lines.append("----------------------------")
    percents = normalize_confusion(report.confusion)
    rows = []
    for name in CONFUSION_ROWS:
        if name in percents:
            rows.append([name] + [_pct(v) for v in percents[name]])
        else:
            rows.append([name] + ["-"] * len(CONFUSION_COLS))
    lines.extend(_text_table([r"actual \ counted"] + list(CONFUSION_COLS), rows))

    lines.append("")
    lines.append("Per-image counts")
    lines.append("----------------")
    rows = []
    for rec in report.per_image_counts:
        gt, pred = rec["ground_truth"], rec["predicted"]
        rows.append([
            rec["image_id"],
            gt["BVG-"], gt["BVG+"], gt["BVG-"] + gt["BVG+"],
            pred["BVG-"], pred["BVG+"], pred["BVG-"] + pred["BVG+"],
        ])
    lines.extend(_text_table(
        ["image", "gt BVG-", "gt BVG+", "gt total", "counted BVG-", "counted BVG+", "counted total"],
        rows,
    ))

    if variability is not None:
        lines.append("")
        lines.extend(_variability_lines(variability))
    return "\n".join(lines) + "\n"


def _variability_lines(v: VariabilityReport) -> list:
    lines = ["Counting variability, pairwise MAPE", "-----------------------------------"]
    rows = []
    for (ref, other), metrics in sorted(v.pairs.items(), key=lambda kv: (str(kv[0][0]), str(kv[0][1]))):
        rows.append([f"{ref} vs {other}"] + [_pct(metrics[m]) for m in VARIABILITY_METRICS])
    rows.append(["user vs user"] + [_pct(v.user_to_user[m]) for m in VARIABILITY_METRICS])
    rows.append(["user vs model"] + [_pct(v.user_to_model[m]) for m in VARIABILITY_METRICS])
    lines.extend(_text_table(["pair"] + list(VARIABILITY_METRICS), rows))
    return lines


def render_eval_report(report: EvalReport, fmt: str = "text",
                       variability: VariabilityReport | None = None) -> str:
    _check_fmt(fmt, ("text", "json"))
    if fmt == "json":
        return canonical_json(eval_report_to_obj(report, variability)) + "\n"
    return _eval_text(report, variability)


# ------------------------------------------------------------ quantification

def _estimate_obj(est) -> dict:
    return {
        "point_estimate": est.point_estimate,
        "ci_low": est.ci_low,
        "ci_high": est.ci_high,
        "confidence_level": est.confidence_level,
        "n_dishes": est.n_dishes,
    }


def quant_report_to_obj(report, experiment_id: str, warnings: list | None = None) -> dict:
    estimates = {cls: _estimate_obj(est) for cls, est in report.per_class.items()}
    estimates["total"] = _estimate_obj(report.total)
    return {
        "experiment_id": experiment_id,
        "estimates": estimates,
        "per_dish": report.per_dish,
        "warnings": list(report.warnings) + list(warnings or []),
    }


def _scope_estimate(report, scope: str):
    return report.total if scope == "total" else report.per_class[scope]


def _scope_count(row: dict, scope: str) -> int:
    if scope == "total":
        return sum(row["counts"].values())
    return row["counts"][scope]


def _quant_csv(report, experiment_id: str, warnings: list) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(QUANT_CSV_COLUMNS)
    for scope in QUANT_SCOPES:
        est = _scope_estimate(report, scope)
        per_dish = ";".join(
            f"{row['image_id']}:{_cell(row['dilution'])}:{_scope_count(row, scope)}"
            for row in report.per_dish
        )
        writer.writerow([
            experiment_id, scope,
            _cell(est.point_estimate), _cell(est.ci_low), _cell(est.ci_high),
            _cell(est.confidence_level), est.n_dishes, per_dish,
        ])
    text = buf.getvalue()
    for message in list(report.warnings) + warnings:
        text += f"# warning: {message}\n"
    return text


def _quant_text(report, experiment_id: str, warnings: list) -> str:
    level = report.total.confidence_level
    lines = [
        f"Quantification, experiment {experiment_id}",
        "=" * len(f"Quantification, experiment {experiment_id}"),
        f"Dilution-corrected CFU estimates with {level * 100:g}% confidence intervals.",
        "",
    ]
    rows = []
    for scope in QUANT_SCOPES:
        est = _scope_estimate(report, scope)
        rows.append([
            scope, f"{est.point_estimate:.2f}", f"{est.ci_low:.2f}", f"{est.ci_high:.2f}", est.n_dishes,
        ])
    lines.extend(_text_table(["scope", "estimate", "ci low", "ci high", "dishes"], rows))
    lines.append("")
    lines.append("Per dish")
    lines.append("--------")
    rows = [
        [row["image_id"], _cell(row["dilution"]), row["counts"]["BVG-"], row["counts"]["BVG+"],
         f"{row['scaled']['total']:.2f}"]
        for row in report.per_dish
    ]
    lines.extend(_text_table(["image", "dilution", "BVG-", "BVG+", "scaled total"], rows))
    merged = list(report.warnings) + warnings
    if merged:
        lines.append("")
        lines.append("Warnings")
        lines.append("--------")
        lines.extend(f"- {message}" for message in merged)
    return "\n".join(lines) + "\n"


def render_quant_report(report, experiment_id: str, fmt: str = "csv",
                        warnings: list | None = None) -> str:
    """Quantification export; ``warnings`` are extra lines beyond the report's own."""
    _check_fmt(fmt, ("csv", "text", "json"))
    extra = [str(w) for w in (warnings or [])]
    if fmt == "json":
        return canonical_json(quant_report_to_obj(report, experiment_id, extra)) + "\n"
    if fmt == "csv":
        return _quant_csv(report, experiment_id, extra)
    return _quant_text(report, experiment_id, extra)


# ------------------------------------------------------------------- search

def search_result_to_obj(result) -> dict:
    return {
        "best_config": result.best_config.to_dict(),
        "objective": result.objective,
        "table": [
            {
                "config": row.config.to_dict(),
                "mape_total": row.mape_total,
                "mape_bvg_plus": row.mape_bvg_plus,
                "map_at_50": row.map_at_50,
                "objective": row.objective,
            }
            for row in result.table
        ],
    }


def _search_csv(result) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SEARCH_CSV_COLUMNS)
    for row in result.table:
        cfg = row.config.to_dict()
        writer.writerow(
            [_cell(cfg[k]) for k in SEARCH_CSV_COLUMNS[:5]]
            + [_cell(row.mape_total), _cell(row.mape_bvg_plus), _cell(row.map_at_50), _cell(row.objective)]
        )
    return buf.getvalue()


def _search_text(result) -> str:
    best = result.best_config.to_dict()
    lines = [
        "Parameter search",
        "================",
        "best: " + "  ".join(f"{k}={_cell(best[k])}" for k in SEARCH_CSV_COLUMNS[:4]),
        f"objective: {result.objective:.4f}",
        "",
    ]
    rows = []
    for row in result.table:
        cfg = row.config.to_dict()
        marker = "*" if cfg == best else ""
        rows.append(
            [marker] + [_cell(cfg[k]) for k in SEARCH_CSV_COLUMNS[:4]]
            + [_pct(row.mape_total, 2), _pct(row.mape_bvg_plus, 2), _pct(row.map_at_50, 2), f"{row.objective:.4f}"]
        )
    lines.extend(_text_table(
        ["", "score", "dup iou", "shrink", "area ci", "mape total", "mape BVG+", "mAP@0.50", "objective"],
        rows,
    ))
    return "\n".join(lines) + "\n"


def render_search_result(result, fmt: str = "csv") -> str:
    _check_fmt(fmt, ("csv", "text", "json"))
    if fmt == "json":
        return canonical_json(search_result_to_obj(result)) + "\n"
    if fmt == "csv":
        return _search_csv(result)
    return _search_text(result)
