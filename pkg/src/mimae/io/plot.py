"""Dependency-free SVG line charts for metrics CSVs."""
from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

from mimae.errors import FormatError
from mimae.io.metrics import read_metrics

WIDTH, HEIGHT = 640, 400
MARGIN = {"left": 72, "right": 24, "top": 40, "bottom": 56}
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")
PLOTTED = ("rec", "max_mi", "min_mi", "approx", "lr", "gate_open", "probe_acc")


def nice_ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    """Round tick values covering [lo, hi]."""
    if hi <= lo:
        pad = abs(lo) * 0.1 or 1.0
        lo, hi = lo - pad, hi + pad
    raw = (hi - lo) / max(1, count)
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw)
    start = math.floor(lo / step) * step
    ticks = []
    v = start
    while v <= hi + step * 1e-9:
        ticks.append(round(v, 12))
        v += step
    if ticks[-1] < hi:
        ticks.append(round(v, 12))
    return ticks


def _fmt(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-3:
        return f"{v:.1e}"
    return f"{v:.4g}"


def line_chart(series: dict, *, title: str, xlabel: str, ylabel: str, hline: float | None = None,
               hline_label: str = "") -> str:
    """SVG text for one chart; ``series`` maps a label to (xs, ys)."""
    pts = [(x, y) for xs, ys in series.values() for x, y in zip(xs, ys) if y is not None and math.isfinite(y)]
    if not pts:
        raise FormatError(f"no finite values to plot for {ylabel}")
    xs_all = [p[0] for p in pts]
    ys_all = [p[1] for p in pts] + ([hline] if hline is not None else [])
    xt = nice_ticks(min(xs_all), max(xs_all))
    yt = nice_ticks(min(ys_all), max(ys_all))
    x0, x1, y0, y1 = xt[0], xt[-1], yt[0], yt[-1]
    L, T = MARGIN["left"], MARGIN["top"]
    pw, ph = WIDTH - L - MARGIN["right"], HEIGHT - T - MARGIN["bottom"]

    def sx(x):
        return L + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return T + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
           f'<title>{escape(title)}</title>',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>']
    out.append('<g class="axes" stroke="black" stroke-width="1">'
               f'<line x1="{L}" y1="{T + ph}" x2="{L + pw}" y2="{T + ph}"/>'
               f'<line x1="{L}" y1="{T}" x2="{L}" y2="{T + ph}"/></g>')
    for t in xt:
        x = sx(t)
        out.append(f'<line x1="{x:.2f}" y1="{T + ph}" x2="{x:.2f}" y2="{T + ph + 5}" stroke="black"/>'
                   f'<text x="{x:.2f}" y="{T + ph + 18}" text-anchor="middle">{_fmt(t)}</text>')
    for t in yt:
        y = sy(t)
        out.append(f'<line x1="{L - 5}" y1="{y:.2f}" x2="{L}" y2="{y:.2f}" stroke="black"/>'
                   f'<line x1="{L}" y1="{y:.2f}" x2="{L + pw}" y2="{y:.2f}" stroke="#e5e5e5"/>'
                   f'<text x="{L - 8}" y="{y + 4:.2f}" text-anchor="end">{_fmt(t)}</text>')
    out.append(f'<text x="{L + pw / 2:.1f}" y="{HEIGHT - 14}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{T + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {T + ph / 2:.1f})">{escape(ylabel)}</text>')
    if hline is not None:
        y = sy(hline)
        out.append(f'<line class="threshold" x1="{L}" y1="{y:.2f}" x2="{L + pw}" y2="{y:.2f}" '
                   f'stroke="#555" stroke-dasharray="6 4" data-value="{hline!r}"/>')
        if hline_label:
            out.append(f'<text x="{L + pw - 4}" y="{y - 5:.2f}" text-anchor="end" fill="#555">'
                       f'{escape(hline_label)}</text>')
    for i, (label, (xs, ys)) in enumerate(series.items()):
        color = COLORS[i % len(COLORS)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys)
                          if y is not None and math.isfinite(y))
        out.append(f'<polyline class="series" fill="none" stroke="{color}" stroke-width="1.8" '
                   f'points="{coords}"><title>{escape(label)}</title></polyline>')
        if len(series) > 1:
            ly = T + 14 + 16 * i
            out.append(f'<line x1="{L + 10}" y1="{ly}" x2="{L + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>'
                       f'<text x="{L + 36}" y="{ly + 4}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _number(v):
    return None if v is None or v == "" else float(v)


def plot_runs(runs: dict, out_dir, threshold: float = 0.5) -> list[Path]:
    """One SVG per metric; ``runs`` maps a run label to its metrics rows.

    Several runs are overlaid as separate series (e.g. a masking-ratio
    sweep). The reconstruction chart carries a dashed line at ``threshold``.
    """
    for label, rows in runs.items():
        if not rows:
            raise FormatError(f"metrics for {label!r} contain a header but no data rows")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for metric in PLOTTED:
        series = {label: ([r["epoch"] for r in rows], [_number(r.get(metric)) for r in rows])
                  for label, rows in runs.items()}
        if not any(y is not None for _, ys in series.values() for y in ys):
            continue
        svg = line_chart(series, title=f"{metric} per epoch", xlabel="epoch", ylabel=metric,
                         hline=threshold if metric == "rec" else None,
                         hline_label=f"gate threshold {threshold:g}" if metric == "rec" else "")
        path = out_dir / f"{metric}.svg"
        path.write_text(svg, encoding="utf-8")
        written.append(path)
    return written


def plot_metrics(paths, out_dir, threshold: float = 0.5) -> list[Path]:
    """Read one or more metrics CSVs and plot them."""
    paths = [Path(p) for p in ([paths] if isinstance(paths, (str, Path)) else paths)]
    runs = {}
    for p in paths:
        label = p.parent.name or p.stem
        while label in runs:
            label += "'"
        runs[label] = read_metrics(p)
    return plot_runs(runs, out_dir, threshold)
