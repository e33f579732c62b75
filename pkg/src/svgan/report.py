"""Dependency-free figures: SVG loss curves and PPM segmentation overlays."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import ValidationError
from .trainer import LOG_FIELDS

LOSS_TERMS = ("adv_d", "adv_g", "seg_ce", "cls_l1", "total")

# class 0 is left transparent; 1 red, 2 blue, 3 green, then extras
CLASS_COLOURS = np.array([
    [0, 0, 0], [230, 25, 25], [30, 80, 230], [25, 200, 60],
    [240, 200, 20], [200, 40, 220], [20, 200, 220], [250, 130, 20],
], dtype=np.float64)


def read_log(path):
    """Parse a training log CSV into ``{column: list}``; errors carry the line number."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ValidationError(f"{path}: no such log") from None
    reader = csv.reader(text.splitlines())
    try:
        header = next(reader)
    except StopIteration:
        raise ValidationError(f"{path}: empty log") from None
    missing = [c for c in ("step", *LOSS_TERMS) if c not in header]
    if missing:
        raise ValidationError(f"{path}, line 1: header lacks columns {missing}")
    columns = {name: [] for name in header}
    for row in reader:
        line = reader.line_num
        if not row:
            continue
        if len(row) != len(header):
            raise ValidationError(f"{path}, line {line}: expected {len(header)} fields, got {len(row)}")
        for name, value in zip(header, row):
            try:
                number = float(value)
            except ValueError:
                raise ValidationError(f"{path}, line {line}: {name}={value!r} is not a number") from None
            if not math.isfinite(number):
                raise ValidationError(f"{path}, line {line}: {name} is not finite")
            columns[name].append(number)
    if not columns["step"]:
        raise ValidationError(f"{path}: log has no rows")
    return columns


def _ticks(lo, hi, count=5):
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (count - 1) for i in range(count)]


def loss_curve_svg(steps, values, title, width=480, height=300):
    """A standalone line chart as an SVG string."""
    margin_l, margin_r, margin_t, margin_b = 60, 15, 30, 40
    pw, ph = width - margin_l - margin_r, height - margin_t - margin_b
    x0, x1 = min(steps), max(steps)
    y0, y1 = min(values), max(values)
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    if x1 == x0:
        x1 = x0 + 1

    def sx(x):
        return margin_l + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return margin_t + (1 - (y - y0) / (y1 - y0)) * ph

    points = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(steps, values))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<rect x="{margin_l}" y="{margin_t}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>',
    ]
    for t in _ticks(y0, y1):
        parts.append(f'<text x="{margin_l - 5}" y="{sy(t) + 4:.1f}" text-anchor="end">{t:.3g}</text>')
        parts.append(f'<line x1="{margin_l}" x2="{margin_l + pw}" y1="{sy(t):.1f}" y2="{sy(t):.1f}" stroke="#eee"/>')
    for t in _ticks(x0, x1):
        parts.append(f'<text x="{sx(t):.1f}" y="{margin_t + ph + 15}" text-anchor="middle">{t:.0f}</text>')
    parts.append(f'<text x="{margin_l + pw / 2:.1f}" y="{height - 5}" text-anchor="middle">step</text>')
    parts.append(f'<polyline fill="none" stroke="#1f5fbf" stroke-width="1.5" points="{points}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def summary_table(columns, tail=50):
    """Markdown table with first, last, min and trailing mean per loss term."""
    lines = ["| term | first | last | min | mean (last %d) |" % tail, "|---|---|---|---|---|"]
    for term in LOSS_TERMS:
        v = columns[term]
        lines.append(f"| {term} | {v[0]:.5f} | {v[-1]:.5f} | {min(v):.5f} | {np.mean(v[-tail:]):.5f} |")
    return "\n".join(lines) + "\n"


def write_report(log_path, out_dir):
    columns = read_log(log_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for term in LOSS_TERMS:
        path = out / f"loss_{term}.svg"
        _atomic_write_text(path, loss_curve_svg(columns["step"], columns[term], term))
        written.append(path)
    path = out / "summary.md"
    _atomic_write_text(path, summary_table(columns))
    written.append(path)
    return written


def _atomic_write_text(path, text):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def overlay_rgb(image, labels, alpha=0.5):
    """Greyscale image with class colours blended over non-background pixels."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = image.min(), image.max()
    grey = (image - lo) / (hi - lo) * 255 if hi > lo else np.zeros_like(image)
    rgb = np.repeat(grey[..., None], 3, axis=-1)
    labels = np.asarray(labels)
    colours = CLASS_COLOURS[labels % len(CLASS_COLOURS)]
    fg = (labels > 0)[..., None]
    rgb = np.where(fg, (1 - alpha) * rgb + alpha * colours, rgb)
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def side_by_side(image, truth, pred, gap=2):
    """Ground-truth overlay and prediction overlay next to each other."""
    left, right = overlay_rgb(image, truth), overlay_rgb(image, pred)
    spacer = np.full((left.shape[0], gap, 3), 255, dtype=np.uint8)
    return np.concatenate([left, spacer, right], axis=1)


def encode_ppm(rgb):
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValidationError(f"PPM needs an [H, W, 3] array, got {rgb.shape}")
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes()


def decode_ppm(payload):
    magic, dims, maxval, body = payload.split(b"\n", 3)
    if magic != b"P6" or maxval != b"255":
        raise ValidationError("not a binary 8-bit PPM")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)


def write_ppm(path, rgb):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_ppm(rgb))
    tmp.replace(path)
    return path
