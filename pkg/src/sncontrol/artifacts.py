"""Deterministic, atomic artifact writers: CSV tables, JSON summaries and
small dependency-free SVG line plots.  Every artifact carries the config
hash.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from importlib import resources


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    if hasattr(v, "item"):  # numpy scalar
        return _fmt(v.item())
    return str(v)


def atomic_write(path, text: str) -> str:
    """Write to a temporary file in the target directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_csv(path, columns, rows, config_hash: str) -> str:
    """CSV with a leading ``# config_hash=...`` comment line."""
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        if isinstance(row, dict):
            row = [row[c] for c in columns]
        writer.writerow([_fmt(v) for v in row])
    return atomic_write(path, buf.getvalue())


def read_csv(path):
    """(config_hash, columns, rows as lists of strings)."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
        reader = csv.reader(fh)
        columns = next(reader)
        rows = list(reader)
    return first.split("=", 1)[1], columns, rows


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if hasattr(obj, "item"):
        return _clean(obj.item())
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def write_json(path, payload: dict, config_hash: str) -> str:
    data = {"config_hash": config_hash, **_clean(payload)}
    return atomic_write(path, json.dumps(data, indent=2, sort_keys=True) + "\n")


def write_svg(path, series, config_hash: str, title="", xlabel="", ylabel="", logx=False, logy=False,
              note="") -> str:
    """Line plot of ``series`` = [(label, xs, ys), ...]."""
    W, H, pad = 640, 420, 60
    tx = (lambda v: math.log10(v)) if logx else float
    ty = (lambda v: math.log10(v)) if logy else float
    pts = [[(tx(x), ty(y)) for x, y in zip(xs, ys) if (x > 0 or not logx) and (y > 0 or not logy)]
           for _, xs, ys in series]
    allx = [p[0] for s in pts for p in s] or [0.0, 1.0]
    ally = [p[1] for s in pts for p in s] or [0.0, 1.0]
    x0, x1 = min(allx), max(allx)
    y0, y1 = min(ally), max(ally)
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0

    def px(v):
        return pad + (v - x0) / (x1 - x0) * (W - 2 * pad)

    def py(v):
        return H - pad - (v - y0) / (y1 - y0) * (H - 2 * pad)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f"<!-- config_hash={config_hash} -->",
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<rect x="{pad}" y="{pad}" width="{W - 2 * pad}" height="{H - 2 * pad}" fill="none" stroke="black"/>',
        f'<text x="{W / 2}" y="{pad / 2}" text-anchor="middle" font-size="14">{title}</text>',
        f'<text x="{W / 2}" y="{H - 15}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="15" y="{H / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 15 {H / 2})">{ylabel}</text>',
    ]
    for v, anchor in ((x0, "start"), (x1, "end")):
        label = f"1e{v:.3g}" if logx else f"{v:.3g}"
        out.append(f'<text x="{px(v):.2f}" y="{H - pad + 16}" text-anchor="{anchor}" font-size="10">{label}</text>')
    for v in (y0, y1):
        label = f"1e{v:.3g}" if logy else f"{v:.3g}"
        out.append(f'<text x="{pad - 4}" y="{py(v):.2f}" text-anchor="end" font-size="10">{label}</text>')
    for k, ((label, _, _), s) in enumerate(zip(series, pts)):
        if not s:
            continue
        c = colors[k % len(colors)]
        points = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in s)
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{points}"/>')
        for a, b in s:
            out.append(f'<circle cx="{px(a):.2f}" cy="{py(b):.2f}" r="2.5" fill="{c}"/>')
        out.append(f'<text x="{W - pad - 4}" y="{pad + 16 + 14 * k}" text-anchor="end" font-size="11" '
                   f'fill="{c}">{label}</text>')
    if note:
        out.append(f'<text x="{pad + 6}" y="{H - pad - 8}" font-size="11">{note}</text>')
    out.append("</svg>")
    return atomic_write(path, "\n".join(out) + "\n")


def load_schema() -> dict:
    """Column documentation for every CSV artifact."""
    text = resources.files("sncontrol").joinpath("artifact_schema.json").read_text(encoding="utf-8")
    return json.loads(text)
