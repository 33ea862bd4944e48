"""Minimal SVG charts for report, sweep and plan-breakdown CSVs.

Every data mark carries its source values as ``data-*`` attributes, so a
chart can be checked against the CSV it came from without rasterising.
"""

from __future__ import annotations

import csv
import io
from xml.sax.saxutils import escape

W, H = 640, 400
MARGIN = dict(left=70, right=20, top=40, bottom=90)


def _frame(title: str, ylabel: str, ymax: float) -> list[str]:
    x0, y0 = MARGIN["left"], H - MARGIN["bottom"]
    x1, y1 = W - MARGIN["right"], MARGIN["top"]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="24" text-anchor="middle" font-size="15" font-family="sans-serif">{escape(title)}</text>',
        f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
        f'<text x="16" y="{(y0 + y1) / 2:.1f}" font-size="12" font-family="sans-serif" '
        f'transform="rotate(-90 16 {(y0 + y1) / 2:.1f})" text-anchor="middle">{escape(ylabel)}</text>',
    ]
    for k in range(5):
        v = ymax * k / 4
        y = _ypix(v, ymax)
        out.append(f'<line x1="{x0 - 4}" y1="{y:.1f}" x2="{x0}" y2="{y:.1f}" stroke="black"/>')
        out.append(f'<text x="{x0 - 8}" y="{y + 4:.1f}" font-size="11" text-anchor="end" '
                   f'font-family="sans-serif">{v:.2f}</text>')
    return out


def _ypix(v: float, ymax: float) -> float:
    y0, y1 = H - MARGIN["bottom"], MARGIN["top"]
    return y0 - (v / ymax) * (y0 - y1) if ymax > 0 else y0


def bar_chart(labels, values, errors=None, title: str = "", ylabel: str = "success rate",
              ymax: float | None = None) -> str:
    values = [float(v) for v in values]
    errors = [0.0] * len(values) if errors is None else [float(e) for e in errors]
    top = max([v + e for v, e in zip(values, errors)] + [1e-9])
    ymax = ymax if ymax is not None else max(1.0, top)
    out = _frame(title, ylabel, ymax)
    n = max(len(values), 1)
    span = W - MARGIN["left"] - MARGIN["right"]
    slot = span / n
    bw = slot * 0.6
    for i, (lab, v, e) in enumerate(zip(labels, values, errors)):
        cx = MARGIN["left"] + slot * (i + 0.5)
        y = _ypix(v, ymax)
        base = _ypix(0.0, ymax)
        out.append(f'<rect class="bar" data-label="{escape(str(lab))}" data-value="{v!r}" data-error="{e!r}" '
                   f'x="{cx - bw / 2:.1f}" y="{y:.1f}" width="{bw:.1f}" height="{base - y:.1f}" fill="#4a7bb7"/>')
        if e > 0:
            out.append(f'<line x1="{cx:.1f}" y1="{_ypix(v - e, ymax):.1f}" x2="{cx:.1f}" '
                       f'y2="{_ypix(v + e, ymax):.1f}" stroke="black"/>')
        out.append(f'<text x="{cx:.1f}" y="{base + 14:.1f}" font-size="10" font-family="sans-serif" '
                   f'text-anchor="end" transform="rotate(-35 {cx:.1f} {base + 14:.1f})">{escape(str(lab))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def line_chart(xs, ys, errors=None, title: str = "", xlabel: str = "phi", ylabel: str = "success rate",
               ymax: float | None = None) -> str:
    xs = [float(x) for x in xs]
    ys = [float(y) for y in ys]
    errors = [0.0] * len(ys) if errors is None else [float(e) for e in errors]
    ymax = ymax if ymax is not None else max([1.0] + [y + e for y, e in zip(ys, errors)])
    out = _frame(title, ylabel, ymax)
    lo, hi = (min(xs), max(xs)) if xs else (0.0, 1.0)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    span = W - MARGIN["left"] - MARGIN["right"]

    def xpix(x):
        return MARGIN["left"] + 20 + (x - lo) / (hi - lo) * (span - 40)

    pts = " ".join(f"{xpix(x):.1f},{_ypix(y, ymax):.1f}" for x, y in zip(xs, ys))
    out.append(f'<polyline points="{pts}" fill="none" stroke="#4a7bb7" stroke-width="2"/>')
    base = H - MARGIN["bottom"]
    for x, y, e in zip(xs, ys, errors):
        px, py = xpix(x), _ypix(y, ymax)
        if e > 0:
            out.append(f'<line x1="{px:.1f}" y1="{_ypix(y - e, ymax):.1f}" x2="{px:.1f}" '
                       f'y2="{_ypix(y + e, ymax):.1f}" stroke="grey"/>')
        out.append(f'<circle class="point" data-x="{x!r}" data-y="{y!r}" data-error="{e!r}" '
                   f'cx="{px:.1f}" cy="{py:.1f}" r="4" fill="#4a7bb7"/>')
        out.append(f'<text x="{px:.1f}" y="{base + 16:.1f}" font-size="11" text-anchor="middle" '
                   f'font-family="sans-serif">{x:g}</text>')
    out.append(f'<text x="{W / 2:.1f}" y="{H - 30}" font-size="12" text-anchor="middle" '
               f'font-family="sans-serif">{escape(xlabel)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def csv_kind(text: str) -> str:
    header = text.splitlines()[0].strip() if text.strip() else ""
    if header.startswith("method,"):
        return "report"
    if header.startswith("phi,"):
        return "sweep"
    if header.startswith("candidate,"):
        return "plan"
    raise ValueError(f"unrecognised CSV header: {header!r}")


def plot_csv(text: str, title: str | None = None, rate: str = "raw_rate") -> str:
    """SVG for any CSV written by the evaluation or planning code."""
    kind = csv_kind(text)
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise ValueError("CSV has no data rows")
    if kind == "report":
        labels = [r["method"] + (f" phi={r['phi']}" if r["phi"] and r["method"] == "hybrid" else "")
                  + f" [{r['environment']}]" for r in rows]
        return bar_chart(labels, [r[rate] for r in rows], [r["ci"] for r in rows],
                         title or f"success ({rate})", ylabel=rate)
    if kind == "sweep":
        return line_chart([r["phi"] for r in rows], [r[rate] for r in rows], [r["ci"] for r in rows],
                          title or "hybrid success vs phi", ylabel=rate)
    # plan breakdown: total cost per candidate, capped for legibility
    labels = [r["candidate"] + ("*" if r["chosen"] == "1" else "") for r in rows]
    return bar_chart(labels, [r["total"] for r in rows], None, title or "candidate cost", ylabel="total cost")
