"""Dependency-free SVG line charts and patch-drop figures.

Output is a pure function of the input rows, so reruns are byte-identical.
"""

from __future__ import annotations

import csv
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from lotus.errors import UsageError

KINDS = ("line_by_epoch", "line_by_sparsity")
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")

WIDTH, HEIGHT = 480, 320
LEFT, RIGHT, TOP, BOTTOM = 60, 150, 20, 45


def _num(v: float) -> str:
    return f"{v:.6g}"


def _coord(v: float) -> str:
    return f"{v:.2f}"


def read_series(csv_path, kind: str, metric: str = "accuracy", split: str | None = None) -> dict:
    """Group metric rows into ``{label: [(x, y), ...]}`` sorted by x.

    ``line_by_epoch`` keys series by ``experiment/split`` with epoch on x;
    ``line_by_sparsity`` keys by ``experiment`` over eval rows with sparsity
    on x. ``split`` keeps only rows of that split.
    """
    if kind not in KINDS:
        raise UsageError(f"unknown plot kind {kind!r}; expected one of {KINDS}")
    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    series: dict = {}
    for r in rows:
        if r.get(metric, "") == "" or (split is not None and r["split"] != split):
            continue
        if kind == "line_by_epoch":
            key, x = f"{r['experiment']}/{r['split']}", r["epoch"]
        else:
            if r["split"] != "eval" or r["sparsity"] == "":
                continue
            key, x = r["experiment"], r["sparsity"]
        series.setdefault(key, []).append((float(x), float(r[metric])))
    return {k: sorted(v) for k, v in series.items()}


def render_line_svg(series: dict, x_label: str, y_label: str, title: str = "") -> str:
    if not series or not any(series.values()):
        raise UsageError("nothing to plot")
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    # keep degenerate ranges drawable
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def px(x):
        return LEFT + (x - x0) / (x1 - x0) * pw

    def py(y):
        return TOP + ph - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]
    if title:
        out.append(f'<title>{escape(title)}</title>')
    bx, by = LEFT, TOP + ph
    out.append(f'<line x1="{bx}" y1="{by}" x2="{bx + pw}" y2="{by}" stroke="black"/>')
    out.append(f'<line x1="{bx}" y1="{TOP}" x2="{bx}" y2="{by}" stroke="black"/>')
    out.append(f'<text x="{bx}" y="{by + 15}" text-anchor="middle">{_num(x0)}</text>')
    out.append(f'<text x="{bx + pw}" y="{by + 15}" text-anchor="middle">{_num(x1)}</text>')
    out.append(f'<text x="{bx - 5}" y="{by}" text-anchor="end">{_num(y0)}</text>')
    out.append(f'<text x="{bx - 5}" y="{TOP + 4}" text-anchor="end">{_num(y1)}</text>')
    out.append(f'<text x="{bx + pw / 2:.1f}" y="{HEIGHT - 8}" text-anchor="middle">{escape(x_label)}</text>')
    out.append(f'<text x="14" y="{TOP + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {TOP + ph / 2:.1f})">{escape(y_label)}</text>')
    for i, (label, pts) in enumerate(sorted(series.items())):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{_coord(px(x))},{_coord(py(y))}" for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        ly = TOP + 12 + 16 * i
        lx = LEFT + pw + 12
        out.append(f'<rect x="{lx}" y="{ly - 8}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{lx + 14}" y="{ly + 1}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plot(csv_path, kind: str, out_path, metric: str = "accuracy", title: str = "",
              split: str | None = None) -> Path:
    """Render ``csv_path`` as an SVG line chart at ``out_path``.

    Raises :class:`UsageError` (and writes nothing) when the CSV has no
    plottable rows.
    """
    series = read_series(csv_path, kind, metric, split)
    x_label = "epoch" if kind == "line_by_epoch" else "sparsity"
    svg = render_line_svg(series, x_label, metric, title)
    out = Path(out_path)
    out.write_text(svg)
    return out


def patch_drop_svg(image: np.ndarray, kept, patch_size: int, scale: int = 8) -> str:
    """Draw a ``[C, H, W]`` image with every patch not in ``kept`` grayed out."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise UsageError(f"expected a [C, H, W] image, got shape {img.shape}")
    c, h, w = img.shape
    rgb = img[:3] if c >= 3 else np.repeat(img[:1], 3, axis=0)
    rgb = np.clip(np.rint(rgb * 255), 0, 255).astype(int)
    grid = w // patch_size
    kept_set = {int(k) for k in kept}
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w * scale}" height="{h * scale}" '
           f'viewBox="0 0 {w * scale} {h * scale}" shape-rendering="crispEdges">']
    for r in range(h):
        for col in range(w):
            red, green, blue = rgb[:, r, col]
            out.append(f'<rect x="{col * scale}" y="{r * scale}" width="{scale}" height="{scale}" '
                       f'fill="#{red:02x}{green:02x}{blue:02x}"/>')
    side = patch_size * scale
    for idx in range(grid * (h // patch_size)):
        if idx in kept_set:
            continue
        pr, pc = divmod(idx, grid)
        out.append(f'<rect x="{pc * side}" y="{pr * side}" width="{side}" height="{side}" '
                   f'fill="#808080" fill-opacity="0.85"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
