"""Deterministic CSV / JSON / SVG emitters for experiment outputs.

Byte-determinism is a contract here: identical data must serialize to
identical bytes, so dict keys are sorted, floats go through ``repr`` (via
``json``) or fixed-precision formats, and nothing timestamps itself.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from xml.sax.saxutils import escape

__all__ = [
    "render_table",
    "write_csv",
    "write_json",
    "write_svg_line_chart",
]

# fixed series palette, one entry per model variant
PALETTE = {
    "cheby": "#1f77b4",
    "krawtchouk": "#2ca02c",
    "hyb_v3": "#d62728",
    "hyb_v4": "#17becf",
}


def write_csv(path: str | Path, header: list[str], rows: list[list[str]]) -> str:
    """RFC-4180 CSV; returns the text that was written."""
    buf = io.StringIO()
    writer = csv.writer(buf, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
    writer.writerow(header)
    writer.writerows(rows)
    text = buf.getvalue()
    Path(path).write_text(text, encoding="utf-8")
    return text


def write_json(path: str | Path, payload: dict) -> str:
    text = json.dumps(payload, sort_keys=True, indent=2)
    Path(path).write_text(text + "\n", encoding="utf-8")
    return text


def render_table(header: list[str], rows: list[list[str]]) -> str:
    """Fixed-width console table using exactly the CSV cell strings."""
    widths = [len(h) for h in header]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    lines = []
    lines.append("  ".join(h.ljust(widths[i]) for i, h in enumerate(header)))
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)))
    return "\n".join(lines)


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def write_svg_line_chart(
    path: str | Path,
    series: list[tuple[str, list[tuple[float, float, bool]]]],
    title: str,
    xlabel: str,
    ylabel: str,
) -> str:
    """Accuracy-vs-K line chart, SVG 1.1.

    ``series`` maps a name to (x, y, collapsed) points; collapsed points are
    marked with an X on top of the polyline.  Output is deterministic for
    identical inputs.
    """
    width, height = 640.0, 440.0
    ml, mr, mt, mb = 60.0, 150.0, 40.0, 50.0
    pw, ph = width - ml - mr, height - mt - mb

    xs = sorted({x for _, pts in series for x, _, _ in pts})
    if not xs:
        raise ValueError("chart needs at least one point")
    x_lo, x_hi = min(xs), max(xs)
    x_span = max(x_hi - x_lo, 1e-9)
    y_lo, y_hi = 0.0, 100.0

    def px(x: float) -> float:
        return ml + pw * (x - x_lo) / x_span

    def py(y: float) -> float:
        return mt + ph * (1.0 - (y - y_lo) / (y_hi - y_lo))

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{_fmt(width)}" height="{_fmt(height)}" '
        f'viewBox="0 0 {_fmt(width)} {_fmt(height)}">',
        f'<rect x="0" y="0" width="{_fmt(width)}" height="{_fmt(height)}" fill="#ffffff"/>',
        f'<text x="{_fmt(ml + pw / 2)}" y="22" text-anchor="middle" '
        f'font-family="sans-serif" font-size="15">{escape(title)}</text>',
    ]
    # axes
    parts.append(
        f'<line x1="{_fmt(ml)}" y1="{_fmt(mt + ph)}" x2="{_fmt(ml + pw)}" '
        f'y2="{_fmt(mt + ph)}" stroke="#000000" stroke-width="1"/>'
    )
    parts.append(
        f'<line x1="{_fmt(ml)}" y1="{_fmt(mt)}" x2="{_fmt(ml)}" '
        f'y2="{_fmt(mt + ph)}" stroke="#000000" stroke-width="1"/>'
    )
    for x in xs:
        parts.append(
            f'<line x1="{_fmt(px(x))}" y1="{_fmt(mt + ph)}" x2="{_fmt(px(x))}" '
            f'y2="{_fmt(mt + ph + 4)}" stroke="#000000" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{_fmt(px(x))}" y="{_fmt(mt + ph + 18)}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="11">{_fmt(x).rstrip("0").rstrip(".")}</text>'
        )
    for yv in range(0, 101, 20):
        parts.append(
            f'<line x1="{_fmt(ml - 4)}" y1="{_fmt(py(yv))}" x2="{_fmt(ml)}" '
            f'y2="{_fmt(py(yv))}" stroke="#000000" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{_fmt(ml - 8)}" y="{_fmt(py(yv) + 4)}" text-anchor="end" '
            f'font-family="sans-serif" font-size="11">{yv}</text>'
        )
    parts.append(
        f'<text x="{_fmt(ml + pw / 2)}" y="{_fmt(height - 12)}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12">{escape(xlabel)}</text>'
    )
    parts.append(
        f'<text x="16" y="{_fmt(mt + ph / 2)}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 16 {_fmt(mt + ph / 2)})">{escape(ylabel)}</text>'
    )

    legend_y = mt + 10
    for name, pts in series:
        color = PALETTE.get(name, "#888888")
        coords = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y, _ in pts)
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>'
        )
        for x, y, collapsed in pts:
            cx, cy = px(x), py(y)
            parts.append(f'<circle cx="{_fmt(cx)}" cy="{_fmt(cy)}" r="2.5" fill="{color}"/>')
            if collapsed:
                for dx1, dy1, dx2, dy2 in ((-6, -6, 6, 6), (-6, 6, 6, -6)):
                    parts.append(
                        f'<line x1="{_fmt(cx + dx1)}" y1="{_fmt(cy + dy1)}" '
                        f'x2="{_fmt(cx + dx2)}" y2="{_fmt(cy + dy2)}" '
                        f'stroke="{color}" stroke-width="2"/>'
                    )
        lx = ml + pw + 12
        parts.append(
            f'<line x1="{_fmt(lx)}" y1="{_fmt(legend_y)}" x2="{_fmt(lx + 22)}" '
            f'y2="{_fmt(legend_y)}" stroke="{color}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{_fmt(lx + 28)}" y="{_fmt(legend_y + 4)}" '
            f'font-family="sans-serif" font-size="12">{escape(name)}</text>'
        )
        legend_y += 18

    parts.append("</svg>")
    text = "\n".join(parts) + "\n"
    Path(path).write_text(text, encoding="utf-8")
    return text
