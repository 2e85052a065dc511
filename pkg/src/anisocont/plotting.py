"""Static SVG branch plots; deterministic output for identical input."""
from __future__ import annotations

import csv

_WIDTH, _HEIGHT = 800.0, 600.0
_ML, _MR, _MT, _MB = 80.0, 25.0, 25.0, 60.0


def _read_branch_csv(path):
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or "param_value" not in reader.fieldnames:
            raise ValueError(f"{path}: not a branch CSV (missing header)")
        for line in reader:
            rows.append((float(line["param_value"]), float(line["l2"]),
                         line.get("flag", "") or ""))
    return rows


def plot_branch(csv_path, svg_path):
    """Render param vs L2 norm with BP/FP markers into a fixed-viewport SVG."""
    rows = _read_branch_csv(csv_path)
    xs = [r[0] for r in rows]
    ys = [r[1] for r in rows]
    if xs:
        x_lo, x_hi = min(xs), max(xs)
        y_lo, y_hi = min(ys), max(ys)
    else:
        x_lo, x_hi, y_lo, y_hi = 0.0, 1.0, 0.0, 1.0
    if x_hi - x_lo < 1e-15:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
    if y_hi - y_lo < 1e-15:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    pad_x = 0.05 * (x_hi - x_lo)
    pad_y = 0.05 * (y_hi - y_lo)
    x_lo, x_hi = x_lo - pad_x, x_hi + pad_x
    y_lo, y_hi = y_lo - pad_y, y_hi + pad_y

    def sx(x):
        return _ML + (x - x_lo) / (x_hi - x_lo) * (_WIDTH - _ML - _MR)

    def sy(y):
        return _HEIGHT - _MB - (y - y_lo) / (y_hi - y_lo) * (_HEIGHT - _MT - _MB)

    parts = []
    parts.append(f'<svg xmlns="http://www.w3.org/2000/svg" '
                 f'viewBox="0 0 {_WIDTH:.0f} {_HEIGHT:.0f}" '
                 f'width="{_WIDTH:.0f}" height="{_HEIGHT:.0f}">')
    parts.append(f'<rect x="0" y="0" width="{_WIDTH:.0f}" height="{_HEIGHT:.0f}" '
                 'fill="white"/>')
    # axes
    parts.append(f'<line x1="{_ML:.3f}" y1="{_HEIGHT - _MB:.3f}" '
                 f'x2="{_WIDTH - _MR:.3f}" y2="{_HEIGHT - _MB:.3f}" '
                 'stroke="black" stroke-width="1"/>')
    parts.append(f'<line x1="{_ML:.3f}" y1="{_MT:.3f}" x2="{_ML:.3f}" '
                 f'y2="{_HEIGHT - _MB:.3f}" stroke="black" stroke-width="1"/>')
    for k in range(5):
        x = x_lo + k * (x_hi - x_lo) / 4.0
        y = y_lo + k * (y_hi - y_lo) / 4.0
        parts.append(f'<line x1="{sx(x):.3f}" y1="{_HEIGHT - _MB:.3f}" '
                     f'x2="{sx(x):.3f}" y2="{_HEIGHT - _MB + 5:.3f}" '
                     'stroke="black" stroke-width="1"/>')
        parts.append(f'<text x="{sx(x):.3f}" y="{_HEIGHT - _MB + 20:.3f}" '
                     f'font-size="12" text-anchor="middle">{x:.4g}</text>')
        parts.append(f'<line x1="{_ML - 5:.3f}" y1="{sy(y):.3f}" '
                     f'x2="{_ML:.3f}" y2="{sy(y):.3f}" '
                     'stroke="black" stroke-width="1"/>')
        parts.append(f'<text x="{_ML - 8:.3f}" y="{sy(y) + 4:.3f}" '
                     f'font-size="12" text-anchor="end">{y:.4g}</text>')
    parts.append(f'<text x="{(_ML + _WIDTH - _MR) / 2:.3f}" '
                 f'y="{_HEIGHT - 15:.3f}" font-size="14" '
                 'text-anchor="middle">parameter</text>')
    parts.append(f'<text x="18" y="{(_MT + _HEIGHT - _MB) / 2:.3f}" '
                 'font-size="14" text-anchor="middle" '
                 f'transform="rotate(-90 18 {(_MT + _HEIGHT - _MB) / 2:.3f})">'
                 'L2 norm</text>')
    if len(rows) >= 2:
        pts = " ".join(f"{sx(x):.3f},{sy(y):.3f}" for x, y, _ in rows)
        parts.append(f'<polyline points="{pts}" fill="none" stroke="#1f4e9c" '
                     'stroke-width="1.5"/>')
    for x, y, flag in rows:
        if flag == "BP":
            parts.append(f'<circle cx="{sx(x):.3f}" cy="{sy(y):.3f}" r="5" '
                         'fill="#c22" stroke="black" stroke-width="0.8" '
                         'class="marker-bp"/>')
        elif flag == "FP":
            parts.append(f'<rect x="{sx(x) - 4:.3f}" y="{sy(y) - 4:.3f}" '
                         'width="8" height="8" fill="#2a2" stroke="black" '
                         'stroke-width="0.8" class="marker-fp"/>')
    parts.append("</svg>")
    with open(svg_path, "w") as f:
        f.write("\n".join(parts) + "\n")
