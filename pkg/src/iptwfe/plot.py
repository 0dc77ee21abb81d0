"""Static SVG small multiples for simulation summaries.

The grid has one row per metric and one column per configuration (estimand,
heterogeneity ``a``, covariate count ``p``, trimming). Within a panel the
x-axis is ``n``, colours distinguish estimators and marker shapes
distinguish ``rho``. Output depends only on the input rows, so identical
inputs give identical bytes.
"""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

PANEL_W = 220
PANEL_H = 150
MARGIN_L = 70
MARGIN_T = 60
GAP_X = 30
GAP_Y = 40
LEGEND_H = 40

METRIC_LABELS = {"bias": "Bias", "mean_se": "Std. Error", "sd": "Empirical SD",
                 "coverage": "Coverage", "rmse": "RMSE"}
DEFAULT_METRICS = ("bias", "mean_se", "coverage")
PALETTE = ("#1b6ca8", "#d1495b", "#2e933c", "#edae49", "#6a4c93", "#3d3d3d")
SHAPES = ("circle", "square", "triangle", "diamond")


def _num(v: float) -> str:
    return f"{v:.2f}"


def _marker(shape: str, x: float, y: float, color: str) -> str:
    r = 3.5
    if shape == "circle":
        return f'<circle cx="{_num(x)}" cy="{_num(y)}" r="{r}" fill="{color}"/>'
    if shape == "square":
        return (f'<rect x="{_num(x - r)}" y="{_num(y - r)}" width="{2 * r}" height="{2 * r}" '
                f'fill="{color}"/>')
    if shape == "triangle":
        pts = [(x, y - r - 1), (x - r - 0.5, y + r), (x + r + 0.5, y + r)]
    else:
        pts = [(x, y - r - 1), (x + r + 1, y), (x, y + r + 1), (x - r - 1, y)]
    return f'<polygon points="{" ".join(f"{_num(a)},{_num(b)}" for a, b in pts)}" fill="{color}"/>'


def _nice_ticks(lo: float, hi: float, count: int = 4) -> list[float]:
    if hi - lo <= 0:
        lo, hi = lo - 0.5, hi + 0.5
    raw = (hi - lo) / count
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step - 1e-9) * step
    ticks = []
    v = start
    while v <= hi + 1e-9 * step:
        ticks.append(round(v, 10))
        v += step
    return ticks


def _column_key(row: dict) -> tuple:
    return (row.get("estimand", ""), row.get("a", ""), row.get("p", ""), row.get("trimming", ""))


def _float(v) -> float:
    try:
        return float(v)
    except (TypeError, ValueError):
        return math.nan


def _sort_key(v):
    f = _float(v)
    return (0, f, "") if math.isfinite(f) else (1, 0.0, str(v))


def render_grid(rows: list[dict], metrics=DEFAULT_METRICS, nominal: float = 0.90,
                title: str = "") -> str:
    """Render tidy result rows (as written by the simulation CSV) to SVG text."""
    rows = [r for r in rows if r.get("metric") in metrics]
    order = {"tau_F": 0, "tau_C": 1}
    columns = sorted({_column_key(r) for r in rows},
                     key=lambda k: (order.get(k[0], 2),) + tuple(_sort_key(v) for v in k))
    estimators = sorted({r["estimator"] for r in rows})
    rhos = sorted({r.get("rho", "") for r in rows}, key=_sort_key)
    metrics = [m for m in metrics if any(r["metric"] == m for r in rows)]
    ns = sorted({_float(r.get("n")) for r in rows if math.isfinite(_float(r.get("n")))})

    width = MARGIN_L + len(columns) * (PANEL_W + GAP_X) + 10
    height = MARGIN_T + len(metrics) * (PANEL_H + GAP_Y) + LEGEND_H
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{width / 2:.2f}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>')

    if ns:
        x_lo, x_hi = ns[0], ns[-1]
    else:
        x_lo, x_hi = 0.0, 1.0
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 1, x_hi + 1

    for ci, col in enumerate(columns):
        estimand, a, p, trimming = col
        x0 = MARGIN_L + ci * (PANEL_W + GAP_X)
        label = f"{estimand}  a={a}  p={p}" + (f"  {trimming}" if trimming else "")
        out.append(f'<text x="{_num(x0 + PANEL_W / 2)}" y="{MARGIN_T - 12}" text-anchor="middle">'
                   f'{escape(label)}</text>')

    for mi, metric in enumerate(metrics):
        y0 = MARGIN_T + mi * (PANEL_H + GAP_Y)
        out.append(f'<text x="14" y="{_num(y0 + PANEL_H / 2)}" text-anchor="middle" '
                   f'transform="rotate(-90 14 {_num(y0 + PANEL_H / 2)})">{METRIC_LABELS.get(metric, metric)}</text>')
        values = [_float(r["value"]) for r in rows if r["metric"] == metric]
        values = [v for v in values if math.isfinite(v)]
        ref = {"bias": 0.0, "coverage": nominal}.get(metric)
        if ref is not None:
            values.append(ref)
        lo, hi = (min(values), max(values)) if values else (0.0, 1.0)
        pad = 0.08 * (hi - lo) if hi > lo else 0.5
        lo, hi = lo - pad, hi + pad
        ticks = _nice_ticks(lo, hi)

        for ci, col in enumerate(columns):
            x0 = MARGIN_L + ci * (PANEL_W + GAP_X)

            def sx(v, x0=x0):
                return x0 + 10 + (v - x_lo) / (x_hi - x_lo) * (PANEL_W - 20)

            def sy(v, y0=y0, lo=lo, hi=hi):
                return y0 + PANEL_H - (v - lo) / (hi - lo) * PANEL_H

            out.append(f'<rect x="{x0}" y="{y0}" width="{PANEL_W}" height="{PANEL_H}" '
                       f'fill="none" stroke="#999"/>')
            if ci == 0:
                for t in ticks:
                    out.append(f'<text x="{x0 - 4}" y="{_num(sy(t) + 4)}" text-anchor="end">{t:g}</text>')
            if mi == len(metrics) - 1:
                for n in ns:
                    out.append(f'<text x="{_num(sx(n))}" y="{y0 + PANEL_H + 14}" '
                               f'text-anchor="middle">{n:g}</text>')
            if ref is not None:
                out.append(f'<line x1="{x0}" x2="{x0 + PANEL_W}" y1="{_num(sy(ref))}" '
                           f'y2="{_num(sy(ref))}" stroke="#777" stroke-dasharray="4 3"/>')
            cell = [r for r in rows if r["metric"] == metric and _column_key(r) == col]
            for ei, est in enumerate(estimators):
                color = PALETTE[ei % len(PALETTE)]
                for ri, rho in enumerate(rhos):
                    pts = sorted(
                        (_float(r["n"]), _float(r["value"]))
                        for r in cell if r["estimator"] == est and r.get("rho", "") == rho
                    )
                    pts = [(n, v) for n, v in pts if math.isfinite(n) and math.isfinite(v)]
                    if len(pts) > 1:
                        path = " ".join(f"{_num(sx(n))},{_num(sy(v))}" for n, v in pts)
                        out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
                    for n, v in pts:
                        out.append(_marker(SHAPES[ri % len(SHAPES)], sx(n), sy(v), color))

    ly = height - LEGEND_H / 2
    lx = MARGIN_L
    for ei, est in enumerate(estimators):
        color = PALETTE[ei % len(PALETTE)]
        out.append(f'<line x1="{lx}" x2="{lx + 18}" y1="{_num(ly)}" y2="{_num(ly)}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 22}" y="{_num(ly + 4)}">{escape(est)}</text>')
        lx += 30 + 7 * len(est)
    lx += 20
    for ri, rho in enumerate(rhos):
        out.append(_marker(SHAPES[ri % len(SHAPES)], lx + 4, ly, "#333"))
        out.append(f'<text x="{lx + 12}" y="{_num(ly + 4)}">rho={escape(str(rho))}</text>')
        lx += 60
    out.append(f'<text x="{_num(MARGIN_L + len(columns) * (PANEL_W + GAP_X) / 2)}" '
               f'y="{_num(height - 4)}" text-anchor="middle">n</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path, rows: list[dict], **kwargs) -> str:
    text = render_grid(rows, **kwargs)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return text
