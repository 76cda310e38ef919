"""Run persistence and static reports.

The metrics CSV is the canonical delimited output: one row per report, a
pinned header, fractions at 6 decimal places, LF endings, fully
deterministic bytes (the run_id column is derived from the plan, never from
the clock — wall-clock timestamps exist only in the run manifest).

Plots come in two forms, rendered from the same parsed series:

* a hand-assembled, self-contained SVG whose node structure is stable and
  countable (one ``polyline.series`` per group, one ``circle.marker`` per
  point, one ``g.legend-entry`` per group), suitable for byte-level diffs;
* a conventional matplotlib PNG alongside it for eyeballing.

Grouping conventions: group_by=batch_size plots metric vs edits_so_far with
one line per batch size; group_by=layer plots metric vs layer with one line
per run_id; group_by=lambda plots metric vs the lambda tag that sweep runs
append to their run_id (``...-lam<value>``), one line per base run_id, on an
ordinal axis so spreads over decades stay readable.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib.metadata import PackageNotFoundError, version

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .errors import InvalidConfig, SchemaMismatch
from .harness import ExperimentPlan, MetricsReport

CSV_HEADER = (
    "run_id,algorithm,layer,batch_size,batch_index,edits_so_far,"
    "es,ps,ns,s,preservation,memorization,delta_fro,seed"
)
_CSV_FIELDS = CSV_HEADER.split(",")

METRIC_NAMES = ("es", "ps", "ns", "s")
GROUP_BY_NAMES = ("batch_size", "lambda", "layer")

_PALETTE = (
    "#1f77b4",
    "#d62728",
    "#2ca02c",
    "#9467bd",
    "#ff7f0e",
    "#8c564b",
    "#e377c2",
    "#17becf",
)


def tool_version() -> str:
    try:
        return version("pmedit")
    except PackageNotFoundError:
        return "0+unknown"


def seed_hash(seed: int) -> str:
    return hashlib.sha256(str(int(seed)).encode("ascii")).hexdigest()[:12]


def group_run_id(plan: ExperimentPlan) -> str:
    """Stable per-plan identifier used in the CSV (clock-free by design).

    Deliberately excludes the strategy: a one-batch sequential run and the
    equivalent batched run produce identical rows.
    """
    return f"{plan.algorithm}-{seed_hash(plan.seed)}"


def _utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


@dataclass
class RunManifest:
    """Bookkeeping for one CLI invocation; the only artifact with timestamps."""

    run_id: str
    plan: dict
    tool_version: str = field(default_factory=tool_version)
    started: str = field(default_factory=_utc_now)
    finished: str | None = None
    output_paths: list[str] = field(default_factory=list)

    @classmethod
    def begin(cls, plan: ExperimentPlan) -> "RunManifest":
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
        return cls(run_id=f"{stamp}-{seed_hash(plan.seed)}", plan=plan.to_dict())

    def finalize(self, output_paths: list[str]) -> None:
        self.finished = _utc_now()
        self.output_paths = list(output_paths)

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "plan": self.plan,
            "tool_version": self.tool_version,
            "started": self.started,
            "finished": self.finished,
            "output_paths": self.output_paths,
        }


def _atomic_write_text(path: str, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_manifest(manifest: RunManifest, path: str) -> None:
    _atomic_write_text(path, json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")


@dataclass(frozen=True)
class MetricsRow:
    """One CSV row: a report plus the plan context it was measured under."""

    run_id: str
    algorithm: str
    layer: int
    batch_size: int
    seed: int
    report: MetricsReport


def metrics_rows(
    run_id: str,
    plan: ExperimentPlan,
    reports: list[MetricsReport],
    layer: int | None = None,
) -> list[MetricsRow]:
    return [
        MetricsRow(
            run_id=run_id,
            algorithm=plan.algorithm,
            layer=plan.layer if layer is None else layer,
            batch_size=plan.batch_size,
            seed=plan.seed,
            report=r,
        )
        for r in reports
    ]


def write_metrics_csv(rows: list[MetricsRow], path: str) -> None:
    """Write rows under the pinned header; byte-deterministic, atomic."""
    if not rows:
        raise InvalidConfig("write_metrics_csv requires at least one row")
    lines = [CSV_HEADER]
    for row in rows:
        rep = row.report
        pres = rep.objective.preservation if rep.objective is not None else 0.0
        mem = rep.objective.memorization if rep.objective is not None else 0.0
        lines.append(
            ",".join(
                (
                    row.run_id,
                    row.algorithm,
                    str(int(row.layer)),
                    str(int(row.batch_size)),
                    str(int(rep.batch_index)),
                    str(int(rep.edits_so_far)),
                    f"{rep.es:.6f}",
                    f"{rep.ps:.6f}",
                    f"{rep.ns:.6f}",
                    f"{rep.s:.6f}",
                    repr(float(pres)),
                    repr(float(mem)),
                    repr(float(rep.delta_fro)),
                    str(int(row.seed)),
                )
            )
        )
    _atomic_write_text(path, "\n".join(lines) + "\n")


def read_metrics_csv(path: str) -> list[dict]:
    """Parse a metrics CSV back into typed dicts, validating the schema."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != _CSV_FIELDS:
            raise SchemaMismatch(f"{path}: header does not match the metrics schema")
        raw_rows = [rec for rec in reader if rec]
    rows = []
    for lineno, rec in enumerate(raw_rows, start=2):
        if len(rec) != len(_CSV_FIELDS):
            raise SchemaMismatch(f"{path}:{lineno}: expected {len(_CSV_FIELDS)} fields")
        d = dict(zip(_CSV_FIELDS, rec))
        try:
            for name in ("layer", "batch_size", "batch_index", "edits_so_far", "seed"):
                d[name] = int(d[name])
            for name in ("es", "ps", "ns", "s", "preservation", "memorization", "delta_fro"):
                d[name] = float(d[name])
        except ValueError as exc:
            raise SchemaMismatch(f"{path}:{lineno}: {exc}") from None
        rows.append(d)
    return rows


@dataclass(frozen=True)
class _Series:
    label: str
    xs: tuple[float, ...]
    ys: tuple[float, ...]


def _split_lambda_tag(run_id: str) -> tuple[str, float]:
    if "-lam" not in run_id:
        raise SchemaMismatch(
            f"run_id {run_id!r} carries no lambda tag; group_by=lambda needs "
            "rows from a lambda sweep"
        )
    base, _, tag = run_id.rpartition("-lam")
    try:
        return base, float(tag)
    except ValueError:
        raise SchemaMismatch(f"run_id {run_id!r} has a malformed lambda tag") from None


def _build_series(
    rows: list[dict], metric: str, group_by: str
) -> tuple[list[_Series], str, list[float] | None]:
    """Group rows into plot series.

    Returns (series, x-axis label, ordinal x values or None).  When the x
    axis is ordinal (lambda), series xs are positions 0..n-1 and the third
    element lists the value labels.
    """
    if metric not in METRIC_NAMES:
        raise InvalidConfig(f"metric must be one of {METRIC_NAMES}, got {metric!r}")
    if group_by not in GROUP_BY_NAMES:
        raise InvalidConfig(f"group_by must be one of {GROUP_BY_NAMES}, got {group_by!r}")
    if not rows:
        raise SchemaMismatch("metrics CSV contains no data rows")

    grouped: dict = {}
    if group_by == "batch_size":
        xlabel = "edits_so_far"
        for d in rows:
            grouped.setdefault(d["batch_size"], []).append(
                (float(d["edits_so_far"]), d[metric])
            )
        keyed = sorted(grouped.items())
        series = [
            _Series(f"batch_size={key}", *_sorted_points(pts)) for key, pts in keyed
        ]
        return series, xlabel, None
    if group_by == "layer":
        xlabel = "layer"
        for d in rows:
            grouped.setdefault(d["run_id"], []).append((float(d["layer"]), d[metric]))
        keyed = sorted(grouped.items())
        series = [_Series(key, *_sorted_points(pts)) for key, pts in keyed]
        return series, xlabel, None
    # group_by == "lambda": ordinal axis over the swept values
    xlabel = "lambda"
    lambdas = set()
    for d in rows:
        base, lam = _split_lambda_tag(d["run_id"])
        lambdas.add(lam)
        grouped.setdefault(base, []).append((lam, d[metric]))
    ordinal = sorted(lambdas)
    position = {lam: float(i) for i, lam in enumerate(ordinal)}
    series = []
    for key, pts in sorted(grouped.items()):
        pts = sorted(pts, key=lambda p: p[0])
        series.append(
            _Series(
                key,
                tuple(position[lam] for lam, _ in pts),
                tuple(y for _, y in pts),
            )
        )
    return series, xlabel, ordinal


def _sorted_points(pts: list[tuple[float, float]]) -> tuple[tuple, tuple]:
    pts = sorted(pts, key=lambda p: p[0])
    return tuple(p[0] for p in pts), tuple(p[1] for p in pts)


def _axis_bounds(values) -> tuple[float, float]:
    lo, hi = min(values), max(values)
    if lo == hi:
        return lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def emit_plot_svg(csv_path: str, metric: str, group_by: str, out_path: str) -> None:
    """Render one self-contained SVG chart from a metrics CSV.

    Node contract: one <polyline class="series"> per group, one
    <circle class="marker"> per data point, one <g class="legend-entry">
    per group.  No external references; bytes are deterministic.
    """
    rows = read_metrics_csv(csv_path)
    series, xlabel, ordinal = _build_series(rows, metric, group_by)

    width, height = 640.0, 420.0
    left, right, top, bottom = 62.0, width - 178.0, 34.0, height - 52.0

    all_x = [x for s in series for x in s.xs]
    all_y = [y for s in series for y in s.ys]
    x_lo, x_hi = _axis_bounds(all_x)
    y_lo, y_hi = _axis_bounds(all_y)

    def px(x: float) -> float:
        return left + (x - x_lo) / (x_hi - x_lo) * (right - left)

    def py(y: float) -> float:
        return bottom - (y - y_lo) / (y_hi - y_lo) * (bottom - top)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" '
        f'height="{height:.0f}" viewBox="0 0 {width:.0f} {height:.0f}">',
        f'<rect x="0" y="0" width="{width:.0f}" height="{height:.0f}" fill="#ffffff"/>',
        f'<text x="{(left + right) / 2:.2f}" y="20" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{metric} vs {xlabel}</text>',
        f'<line x1="{left:.2f}" y1="{bottom:.2f}" x2="{right:.2f}" y2="{bottom:.2f}" '
        'stroke="#333333" stroke-width="1"/>',
        f'<line x1="{left:.2f}" y1="{top:.2f}" x2="{left:.2f}" y2="{bottom:.2f}" '
        'stroke="#333333" stroke-width="1"/>',
    ]

    if ordinal is None:
        x_tick_vals = _ticks(x_lo, x_hi)
        x_tick_pairs = [(v, f"{v:.4g}") for v in x_tick_vals]
    else:
        x_tick_pairs = [(float(i), f"{lam:g}") for i, lam in enumerate(ordinal)]
    for v, label in x_tick_pairs:
        x = px(v)
        parts.append(
            f'<line x1="{x:.2f}" y1="{bottom:.2f}" x2="{x:.2f}" y2="{bottom + 4:.2f}" '
            'stroke="#333333" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{x:.2f}" y="{bottom + 17:.2f}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="10">{label}</text>'
        )
    for v in _ticks(y_lo, y_hi):
        y = py(v)
        parts.append(
            f'<line x1="{left - 4:.2f}" y1="{y:.2f}" x2="{left:.2f}" y2="{y:.2f}" '
            'stroke="#333333" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{left - 7:.2f}" y="{y + 3:.2f}" text-anchor="end" '
            f'font-family="sans-serif" font-size="10">{v:.4g}</text>'
        )
    parts.append(
        f'<text x="{(left + right) / 2:.2f}" y="{height - 14:.2f}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12">{xlabel}</text>'
    )
    parts.append(
        f'<text x="18" y="{(top + bottom) / 2:.2f}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 18 {(top + bottom) / 2:.2f})">{metric}</text>'
    )

    for i, s in enumerate(series):
        color = _PALETTE[i % len(_PALETTE)]
        points = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(s.xs, s.ys))
        parts.append(
            f'<polyline class="series" points="{points}" fill="none" '
            f'stroke="{color}" stroke-width="1.5"/>'
        )
        for x, y in zip(s.xs, s.ys):
            parts.append(
                f'<circle class="marker" cx="{px(x):.2f}" cy="{py(y):.2f}" r="3" '
                f'fill="{color}"/>'
            )

    legend_x = right + 12.0
    parts.append('<g class="legend">')
    for i, s in enumerate(series):
        color = _PALETTE[i % len(_PALETTE)]
        y = top + 8.0 + 18.0 * i
        parts.append(
            '<g class="legend-entry">'
            f'<rect x="{legend_x:.2f}" y="{y:.2f}" width="12" height="12" fill="{color}"/>'
            f'<text x="{legend_x + 17:.2f}" y="{y + 10:.2f}" font-family="sans-serif" '
            f'font-size="11">{s.label}</text>'
            "</g>"
        )
    parts.append("</g>")
    parts.append("</svg>")
    _atomic_write_text(out_path, "\n".join(parts) + "\n")


def render_plot_png(csv_path: str, metric: str, group_by: str, out_path: str) -> None:
    """Render the same chart as a matplotlib PNG (for human consumption)."""
    rows = read_metrics_csv(csv_path)
    series, xlabel, ordinal = _build_series(rows, metric, group_by)
    fig = Figure(figsize=(6.4, 4.2), dpi=120)
    canvas = FigureCanvasAgg(fig)
    ax = fig.add_subplot(111)
    for i, s in enumerate(series):
        ax.plot(
            s.xs,
            s.ys,
            marker="o",
            markersize=4,
            linewidth=1.5,
            color=_PALETTE[i % len(_PALETTE)],
            label=s.label,
        )
    if ordinal is not None:
        ax.set_xticks(range(len(ordinal)))
        ax.set_xticklabels([f"{lam:g}" for lam in ordinal])
    ax.set_xlabel(xlabel)
    ax.set_ylabel(metric)
    ax.set_title(f"{metric} vs {xlabel}")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    tmp = f"{out_path}.tmp"
    with open(tmp, "wb") as fh:
        canvas.print_png(fh)
    os.replace(tmp, out_path)
