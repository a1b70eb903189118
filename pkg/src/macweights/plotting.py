"""Deterministic SVG line plots from CSV rows (no plotting dependency).

Three layouts: magnitude_by_layer (one polyline per state kind, log10 y,
values clipped at 1e-12 before the log), metric_by_k, and p_by_step.
Identical input rows always produce identical SVG bytes.
"""

from __future__ import annotations

import math

from .errors import InputError

PLOT_KINDS = ("magnitude_by_layer", "metric_by_k", "p_by_step")

_WIDTH, _HEIGHT = 640, 400
_MARGIN = 50
_LOG_CLIP = 1e-12
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _require_columns(rows: list[dict], columns: tuple[str, ...]):
    if not rows:
        raise InputError("no data rows to plot")
    for col in columns:
        if col not in rows[0]:
            raise InputError(f"CSV is missing required column {col!r}")


def _series_for(rows: list[dict], kind: str) -> tuple[list, str, str, bool]:
    if kind == "magnitude_by_layer":
        _require_columns(rows, ("layer", "state_kind", "top1"))
        series = {}
        for r in rows:
            series.setdefault(r["state_kind"], []).append((float(r["layer"]), float(r["top1"])))
        out = [(name, sorted(pts)) for name, pts in sorted(series.items())]
        return out, "layer", "log10 top1 magnitude", True
    if kind == "metric_by_k":
        _require_columns(rows, ("k", "metric"))
        pts = sorted((float(r["k"]), float(r["metric"])) for r in rows)
        return [("metric", pts)], "k", "metric", False
    if kind == "p_by_step":
        _require_columns(rows, ("step", "p"))
        pts = sorted((float(r["step"]), float(r["p"])) for r in rows)
        return [("p", pts)], "step", "dropout probability", False
    raise InputError(f"unknown plot kind {kind!r}, expected one of {PLOT_KINDS}")


def render_svg(rows: list[dict], kind: str) -> str:
    series, xlabel, ylabel, log_y = _series_for(rows, kind)
    xs = [x for _, pts in series for x, _ in pts]
    ys = []
    for _, pts in series:
        for _, y in pts:
            ys.append(math.log10(max(y, _LOG_CLIP)) if log_y else y)
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0

    def sx(x):
        return _MARGIN + (x - x_lo) / (x_hi - x_lo) * (_WIDTH - 2 * _MARGIN)

    def sy(y):
        return _HEIGHT - _MARGIN - (y - y_lo) / (y_hi - y_lo) * (_HEIGHT - 2 * _MARGIN)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" height="{_HEIGHT}" '
        f'viewBox="0 0 {_WIDTH} {_HEIGHT}">',
        f'<rect width="{_WIDTH}" height="{_HEIGHT}" fill="white"/>',
        f'<line x1="{_MARGIN}" y1="{_HEIGHT - _MARGIN}" x2="{_WIDTH - _MARGIN}" '
        f'y2="{_HEIGHT - _MARGIN}" stroke="black"/>',
        f'<line x1="{_MARGIN}" y1="{_MARGIN}" x2="{_MARGIN}" y2="{_HEIGHT - _MARGIN}" stroke="black"/>',
        f'<text x="{_WIDTH // 2}" y="{_HEIGHT - 12}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="14" y="{_HEIGHT // 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {_HEIGHT // 2})">{ylabel}</text>',
    ]
    for i, (name, pts) in enumerate(series):
        coords = []
        for x, y in pts:
            yv = math.log10(max(y, _LOG_CLIP)) if log_y else y
            coords.append(f"{sx(x):.2f},{sy(yv):.2f}")
        color = _COLORS[i % len(_COLORS)]
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{" ".join(coords)}"/>'
        )
        parts.append(
            f'<text x="{_WIDTH - _MARGIN + 4}" y="{_MARGIN + 14 * i + 10}" font-size="10" '
            f'fill="{color}">{name}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
