"""Comparative meta-analysis over model x dataset score tables.

Rank matrices use competition ranking (ties share the best rank, the next
distinct score skips ranks); a dense variant is provided as a robustness
check. Z-scores use the population standard deviation with sigma=0 mapped to
all-zero columns. Reports render as aligned text, CSV, or deterministic SVG
heatmaps.
"""

import csv
import os
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class ScoreTable:
    models: tuple
    datasets: tuple
    values: tuple  # row-major tuples, shape |models| x |datasets|
    direction: str = "maximize"

    def __post_init__(self):
        if not self.models or not self.datasets:
            raise ValidationError("score table must have at least one row and column")
        for row in self.values:
            if len(row) != len(self.datasets):
                raise ValidationError("score table is not rectangular")
            for v in row:
                if v is None or not np.isfinite(v):
                    raise ValidationError(
                        "score table has missing or non-finite cells; "
                        "fill or drop incomplete experiments explicitly"
                    )
        if self.direction not in ("maximize", "minimize"):
            raise ValidationError(f"unknown direction {self.direction!r}")

    def array(self):
        return np.array(self.values, dtype=np.float64)

    def column(self, j):
        return [row[j] for row in self.values]


def make_score_table(models, datasets, values, direction="maximize"):
    return ScoreTable(
        models=tuple(models), datasets=tuple(datasets),
        values=tuple(tuple(float(v) for v in row) for row in values),
        direction=direction,
    )


# ---------------------------------------------------------------------------
# Building tables from results

def _doc_cells(docs):
    cells = {}
    for doc in docs:
        env = doc["envelope"]
        trial = doc["trial"]
        if trial["status"] != "ok":
            continue
        key = (env["model_id"], env["dataset_id"])
        cells.setdefault(key, []).append(doc)
    return cells


def _trial_goal_value(trial):
    if trial["best_epoch"] is None or not trial["epoch_history"]:
        return None
    return trial["epoch_history"][trial["best_epoch"]][1]


def best_trial_doc(docs_for_cell):
    """The trial the search would select: best goal value, ties to the
    lowest trial index."""
    direction = docs_for_cell[0]["envelope"]["context"]["direction"]
    sign = -1.0 if direction == "maximize" else 1.0

    def sort_key(doc):
        value = _trial_goal_value(doc["trial"])
        return (sign * value, doc["trial"]["trial_index"])

    return min(docs_for_cell, key=sort_key)


def score_table_from_docs(docs, metric="accuracy", direction="maximize"):
    """Best-trial test `metric` per (model, dataset); holes are an error."""
    cells = _doc_cells(docs)
    if not cells:
        raise ValidationError("no successful trials to tabulate")
    models = sorted({m for m, _ in cells})
    datasets = sorted({d for _, d in cells})
    values = []
    for m in models:
        row = []
        for d in datasets:
            if (m, d) not in cells:
                raise ValidationError(f"missing cell ({m}, {d}); cannot build score table")
            best = best_trial_doc(cells[(m, d)])
            tm = best["trial"]["test_metrics"]
            if metric not in tm:
                raise ValidationError(
                    f"metric {metric!r} absent from test metrics of ({m}, {d})"
                )
            row.append(tm[metric])
        values.append(row)
    return make_score_table(models, datasets, values, direction)


def score_table_from_csv(path, direction="maximize"):
    """CSV score-table input: header `model,<dataset1>,<dataset2>,...`."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty score table")
        if len(header) < 2 or header[0] != "model":
            raise ValidationError(f"{path}: expected header `model,<dataset>,...`")
        datasets = header[1:]
        models, values = [], []
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise ValidationError(f"{path}: row {reader.line_num} has wrong arity")
            models.append(row[0])
            try:
                values.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise ValidationError(f"{path}: row {reader.line_num}: {exc}")
    if not models:
        raise ValidationError(f"{path}: no data rows")
    return make_score_table(models, datasets, values, direction)


# ---------------------------------------------------------------------------
# Rank analyses

@dataclass(frozen=True)
class RankMatrix:
    models: tuple
    datasets: tuple
    ranks: tuple  # integer ranks >= 1, row-major


def rank_matrix(table, method="competition"):
    """Per-column ranks under the table's direction.

    competition: tied scores share the best rank and the next distinct score
    skips ranks (1, 1, 3); dense: no skipping (1, 1, 2).
    """
    if method not in ("competition", "dense"):
        raise ValidationError(f"unknown ranking method {method!r}")
    better = (lambda a, b: a > b) if table.direction == "maximize" else (lambda a, b: a < b)
    n_models = len(table.models)
    ranks = [[0] * len(table.datasets) for _ in range(n_models)]
    for j in range(len(table.datasets)):
        col = table.column(j)
        for i, x in enumerate(col):
            if method == "competition":
                ranks[i][j] = 1 + sum(1 for y in col if better(y, x))
            else:
                distinct = {y for y in col if better(y, x)}
                ranks[i][j] = 1 + len(distinct)
    return RankMatrix(models=table.models, datasets=table.datasets,
                      ranks=tuple(tuple(r) for r in ranks))


def mrr(rank_mat):
    """Mean reciprocal rank per model across datasets."""
    return {
        m: float(np.mean([1.0 / r for r in rank_mat.ranks[i]]))
        for i, m in enumerate(rank_mat.models)
    }


def top_rank_counts(rank_mat):
    """Datasets where each model holds rank 1 (ties count for all tied)."""
    return {
        m: int(sum(1 for r in rank_mat.ranks[i] if r == 1))
        for i, m in enumerate(rank_mat.models)
    }


def zscores(table):
    """Per-column standardization with population sigma; sigma=0 -> zeros."""
    if len(table.models) < 2:
        raise ValidationError("zscores requires at least 2 models")
    arr = table.array()
    mu = arr.mean(axis=0)
    sigma = arr.std(axis=0)
    out = np.zeros_like(arr)
    nonzero = sigma > 0
    out[:, nonzero] = (arr[:, nonzero] - mu[nonzero]) / sigma[nonzero]
    return out


def gaps(table):
    """Per-dataset best-minus-worst score."""
    arr = table.array()
    return {
        d: float(arr[:, j].max() - arr[:, j].min())
        for j, d in enumerate(table.datasets)
    }


def gaps_ranked(table):
    """Datasets ordered by gap size descending (ties by name)."""
    g = gaps(table)
    return sorted(g.items(), key=lambda kv: (-kv[1], kv[0]))


# ---------------------------------------------------------------------------
# Pareto and correlation

@dataclass(frozen=True)
class ParetoPoint:
    model_id: str
    coordinates: tuple
    dominated: bool


def _dominates(a, b, directions):
    """a weakly better everywhere and strictly better somewhere."""
    strictly = False
    for x, y, d in zip(a, b, directions):
        if d == "maximize":
            if x < y:
                return False
            if x > y:
                strictly = True
        else:
            if x > y:
                return False
            if x < y:
                strictly = True
    return strictly


def pareto_front(points, directions):
    """Non-dominated points under the per-coordinate directions.

    `points` is a list of (model_id, coordinates). Exact duplicates are both
    kept on the front (weak dominance does not remove ties). Output is
    ordered by model id.
    """
    if not points:
        raise ValidationError("pareto_front requires at least one point")
    dim = len(points[0][1])
    if len(directions) != dim or any(len(c) != dim for _, c in points):
        raise ValidationError("inconsistent dimensionality across points/directions")
    out = []
    for m, coords in points:
        dominated = any(
            _dominates(other, coords, directions)
            for om, other in points
            if not (om == m and tuple(other) == tuple(coords))
        )
        out.append(ParetoPoint(model_id=m, coordinates=tuple(coords), dominated=dominated))
    return sorted(out, key=lambda p: p.model_id)


@dataclass(frozen=True)
class CorrelationResult:
    pearson: float
    spearman: float
    reason: str = None  # set when the correlation is undefined


def _average_ranks(xs):
    order = np.argsort(xs, kind="stable")
    ranks = np.empty(len(xs), dtype=np.float64)
    i = 0
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and xs[order[j + 1]] == xs[order[i]]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def correlate(xs, ys):
    """(pearson_r, spearman_rho); undefined when either side is constant."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if len(xs) != len(ys) or len(xs) < 3:
        raise ValidationError("correlate requires two equal-length vectors, n >= 3")
    if np.std(xs) == 0 or np.std(ys) == 0:
        return CorrelationResult(None, None, reason="zero variance")
    pearson = float(np.corrcoef(xs, ys)[0, 1])
    rx, ry = _average_ranks(xs), _average_ranks(ys)
    spearman = float(np.corrcoef(rx, ry)[0, 1])
    return CorrelationResult(pearson=pearson, spearman=spearman)


# ---------------------------------------------------------------------------
# Convergence

def convergence_table(docs):
    """Best trial's best_epoch per (model, dataset); None for empty cells."""
    cells = _doc_cells(docs)
    models = sorted({m for m, _ in cells})
    datasets = sorted({d for _, d in cells})
    out = {}
    for m in models:
        for d in datasets:
            if (m, d) in cells:
                best = best_trial_doc(cells[(m, d)])
                out[(m, d)] = best["trial"]["best_epoch"]
            else:
                out[(m, d)] = None
    return out


# ---------------------------------------------------------------------------
# Rendering

@dataclass(frozen=True)
class TableReport:
    """A rectangular report: shown numbers plus optional separate color values
    (e.g. numbers are accuracy while the heatmap color encodes MRR)."""

    title: str
    row_labels: tuple
    col_labels: tuple
    values: tuple
    color_values: tuple = None
    fmt: str = "{:.4f}"


def _format_cell(report, value):
    if value is None:
        return "-"
    return report.fmt.format(value)


def render_text(report):
    rows = [[""] + list(report.col_labels)]
    for label, row in zip(report.row_labels, report.values):
        rows.append([label] + [_format_cell(report, v) for v in row])
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    lines = [report.title, ""]
    for r in rows:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())
    return "\n".join(lines) + "\n"


def render_csv_text(report):
    import io

    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["model"] + list(report.col_labels))
    for label, row in zip(report.row_labels, report.values):
        w.writerow([label] + ["" if v is None else repr(float(v)) for v in row])
    return buf.getvalue()


_CELL_W, _CELL_H, _LEFT, _TOP = 88, 30, 150, 60


def _heat_color(t):
    """Linear white -> dark blue scale over t in [0, 1]."""
    start, end = (255, 255, 255), (8, 48, 107)
    r, g, b = (round(s + (e - s) * t) for s, e in zip(start, end))
    return f"#{r:02x}{g:02x}{b:02x}"


def render_svg_heatmap(report):
    """Byte-deterministic SVG: one annotated rectangle per cell.

    Color encodes color_values (or the shown values) min-max normalized over
    the whole table; darker means a larger value.
    """
    color_vals = report.color_values if report.color_values is not None else report.values
    flat = [v for row in color_vals for v in row if v is not None]
    if not flat:
        raise ValidationError("nothing to render")
    lo, hi = min(flat), max(flat)
    span = (hi - lo) or 1.0

    n_rows, n_cols = len(report.row_labels), len(report.col_labels)
    width = _LEFT + n_cols * _CELL_W + 20
    height = _TOP + n_rows * _CELL_H + 20
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f"<desc>{report.title}; color scale: white #ffffff (min {report.fmt.format(lo)}) "
        f"to dark blue #08306b (max {report.fmt.format(hi)})</desc>",
        f'<text x="{_LEFT}" y="24" font-family="monospace" font-size="16">{report.title}</text>',
    ]
    for j, col in enumerate(report.col_labels):
        x = _LEFT + j * _CELL_W + _CELL_W // 2
        parts.append(
            f'<text x="{x}" y="{_TOP - 10}" font-family="monospace" font-size="12" '
            f'text-anchor="middle">{col}</text>'
        )
    for i, row_label in enumerate(report.row_labels):
        y = _TOP + i * _CELL_H
        parts.append(
            f'<text x="{_LEFT - 8}" y="{y + 20}" font-family="monospace" font-size="12" '
            f'text-anchor="end">{row_label}</text>'
        )
        for j in range(n_cols):
            v = report.values[i][j]
            cv = color_vals[i][j]
            x = _LEFT + j * _CELL_W
            fill = "#dddddd" if cv is None else _heat_color((cv - lo) / span)
            parts.append(
                f'<rect x="{x}" y="{y}" width="{_CELL_W}" height="{_CELL_H}" '
                f'fill="{fill}" stroke="#555555"/>'
            )
            dark = cv is not None and (cv - lo) / span > 0.6
            color = "#ffffff" if dark else "#000000"
            parts.append(
                f'<text x="{x + _CELL_W // 2}" y="{y + 20}" font-family="monospace" '
                f'font-size="12" text-anchor="middle" fill="{color}">'
                f"{_format_cell(report, v)}</text>"
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_report(report, kind, path):
    """Write one report in the requested format; returns the path."""
    if not report.row_labels or not report.col_labels:
        raise ValidationError("nothing to render")
    if kind == "text":
        content = render_text(report)
    elif kind == "csv":
        content = render_csv_text(report)
    elif kind == "svg_heatmap":
        content = render_svg_heatmap(report)
    else:
        raise ValidationError(f"unknown report kind {kind!r}")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(content)
    return path
