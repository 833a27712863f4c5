"""Standalone SVG bar charts with CI whiskers, plus CSV/JSON tables."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from xml.sax.saxutils import escape

from .analysis import GroupStat

PALETTE = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860")


def _fmt(x):
    return f"{x:.3f}"


def render_svg(stats: list[GroupStat], title="", y_label="mean LOR", width=None, height=360) -> str:
    """Grouped bars: one group per key along x, one bar per comparison."""
    if not stats:
        raise ValueError("nothing to plot")
    keys = list(dict.fromkeys(s.key for s in stats))
    series = list(dict.fromkeys(s.comparison for s in stats))
    cell = {(s.key, s.comparison): s for s in stats}

    bar_w = 18.0
    gap = 14.0
    group_w = bar_w * len(series) + gap
    left, right, top, bottom = 64.0, 16.0, 36.0, 96.0
    legend_h = 16.0 * len(series)
    plot_w = group_w * len(keys)
    width = width or left + plot_w + right
    plot_h = height - top - bottom
    total_h = height + legend_h

    lo = min(0.0, min(s.ci_low for s in stats))
    hi = max(0.0, max(s.ci_high for s in stats))
    if hi - lo <= 0:
        hi = lo + 1.0
    scale = plot_h / (hi - lo)

    def y(v):
        return top + (hi - v) * scale

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_fmt(width)}" height="{_fmt(total_h)}" '
        f'viewBox="0 0 {_fmt(width)} {_fmt(total_h)}" data-scale="{scale!r}">',
        f'<rect x="0" y="0" width="{_fmt(width)}" height="{_fmt(total_h)}" fill="white"/>',
        f'<text x="{_fmt(width / 2)}" y="20" text-anchor="middle" font-family="sans-serif" font-size="13">{escape(title)}</text>',
        f'<line class="axis" x1="{_fmt(left)}" y1="{_fmt(top)}" x2="{_fmt(left)}" y2="{_fmt(top + plot_h)}" stroke="black"/>',
        f'<line class="zero" x1="{_fmt(left)}" y1="{_fmt(y(0))}" x2="{_fmt(left + plot_w)}" y2="{_fmt(y(0))}" stroke="black"/>',
        f'<text x="14" y="{_fmt(top + plot_h / 2)}" transform="rotate(-90 14 {_fmt(top + plot_h / 2)})" '
        f'text-anchor="middle" font-family="sans-serif" font-size="11">{escape(y_label)}</text>',
    ]
    for t in range(5):
        v = lo + (hi - lo) * t / 4
        out.append(f'<text x="{_fmt(left - 4)}" y="{_fmt(y(v) + 4)}" text-anchor="end" '
                   f'font-family="sans-serif" font-size="9">{v:.2f}</text>')
        out.append(f'<line x1="{_fmt(left - 3)}" y1="{_fmt(y(v))}" x2="{_fmt(left)}" y2="{_fmt(y(v))}" stroke="black"/>')

    for gi, key in enumerate(keys):
        x0 = left + gi * group_w + gap / 2
        for si, comp in enumerate(series):
            s = cell.get((key, comp))
            if s is None:
                continue
            x = x0 + si * bar_w
            top_y, bot_y = (y(s.mean), y(0)) if s.mean >= 0 else (y(0), y(s.mean))
            cx = x + bar_w / 2
            out.append(
                f'<rect class="bar" data-key="{escape(key)}" data-comparison="{escape(comp)}" '
                f'data-mean="{s.mean!r}" x="{_fmt(x + 1)}" y="{_fmt(top_y)}" width="{_fmt(bar_w - 2)}" '
                f'height="{_fmt(bot_y - top_y)}" fill="{PALETTE[si % len(PALETTE)]}">'
                f'<title>{escape(key)} / {escape(comp)}: mean {s.mean:.4f} [{s.ci_low:.4f}, {s.ci_high:.4f}] n={s.count}</title></rect>'
            )
            out.append(
                f'<path class="whisker" data-low="{s.ci_low!r}" data-high="{s.ci_high!r}" '
                f'd="M{_fmt(cx)} {_fmt(y(s.ci_low))} V{_fmt(y(s.ci_high))} '
                f'M{_fmt(cx - 4)} {_fmt(y(s.ci_low))} H{_fmt(cx + 4)} '
                f'M{_fmt(cx - 4)} {_fmt(y(s.ci_high))} H{_fmt(cx + 4)}" stroke="black" fill="none"/>'
            )
        lx = x0 + (bar_w * len(series)) / 2
        ly = top + plot_h + 10
        out.append(f'<text x="{_fmt(lx)}" y="{_fmt(ly)}" transform="rotate(45 {_fmt(lx)} {_fmt(ly)})" '
                   f'font-family="sans-serif" font-size="10">{escape(key)}</text>')
    for si, comp in enumerate(series):
        ly = height + 16.0 * si
        out.append(f'<rect x="{_fmt(left)}" y="{_fmt(ly - 9)}" width="10" height="10" fill="{PALETTE[si % len(PALETTE)]}"/>')
        out.append(f'<text x="{_fmt(left + 14)}" y="{_fmt(ly)}" font-family="sans-serif" font-size="10">{escape(comp)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_tables(stats: list[GroupStat], stem) -> tuple[Path, Path]:
    stem = Path(stem)
    csv_path = stem.with_suffix(".csv")
    json_path = stem.with_suffix(".json")
    fields = ["dimension", "key", "comparison", "count", "mean", "ci_low", "ci_high"]
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for s in stats:
            d = s.to_dict()
            w.writerow([format(d[f], ".17g") if isinstance(d[f], float) else d[f] for f in fields])
    json_path.write_text(json.dumps([s.to_dict() for s in stats], indent=1) + "\n", encoding="utf-8")
    return csv_path, json_path


def render(stats: list[GroupStat], out_stem, title="") -> dict:
    """Write ``<stem>.svg``, ``<stem>.csv`` and ``<stem>.json``."""
    out_stem = Path(out_stem)
    svg = out_stem.with_suffix(".svg")
    svg.write_text(render_svg(stats, title=title), encoding="utf-8")
    csv_path, json_path = write_tables(stats, out_stem)
    return {"svg": svg, "csv": csv_path, "json": json_path}
