"""PNG, CSV and JSON writers. Everything here is deterministic byte-for-byte."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
from PIL import Image, ImageDraw


def to_png_array(x) -> np.ndarray:
    """[-1, 1] CHW or HWC float image(s) -> uint8 HWC via round(255 (x+1)/2)."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 3 and a.shape[0] in (1, 3) and a.shape[-1] not in (1, 3):
        a = a.transpose(1, 2, 0)
    return np.clip(np.round(255.0 * (a + 1.0) / 2.0), 0, 255).astype(np.uint8)


def from_png_array(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float64) / 255.0 * 2.0 - 1.0


def write_png(path, img_uint8: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(img_uint8), mode="RGB").save(path, format="PNG", optimize=False)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def upscale(img: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize of a uint8 HWC image to (size, size)."""
    if img.shape[0] == size:
        return img
    return np.asarray(Image.fromarray(img).resize((size, size), Image.NEAREST))


def grid(rows: Sequence[Sequence[np.ndarray]], pad: int = 2, cell: int = 0) -> np.ndarray:
    """Tile uint8 HWC images row by row on a white background."""
    cell = cell or max(im.shape[0] for row in rows for im in row)
    ncol = max(len(r) for r in rows)
    H = len(rows) * (cell + pad) + pad
    W = ncol * (cell + pad) + pad
    out = np.full((H, W, 3), 255, dtype=np.uint8)
    for i, row in enumerate(rows):
        for j, im in enumerate(row):
            y, x = pad + i * (cell + pad), pad + j * (cell + pad)
            out[y : y + cell, x : x + cell] = upscale(im, cell)
    return out


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def line_plot(series: Dict[str, Sequence[float]], xs: Sequence[float] = None, size=(480, 320), title: str = "") -> np.ndarray:
    """Rasterize one or more polylines with axes ticks at the data range."""
    W, H = size
    left, right, top, bottom = 56, 12, 24, 28
    im = Image.new("RGB", size, "white")
    d = ImageDraw.Draw(im)
    colors = [(31, 119, 180), (214, 39, 40), (44, 160, 44), (148, 103, 189), (255, 127, 14)]
    all_y = np.concatenate([np.asarray(v, dtype=np.float64) for v in series.values()])
    all_y = all_y[np.isfinite(all_y)]
    lo, hi = (float(all_y.min()), float(all_y.max())) if len(all_y) else (0.0, 1.0)
    if hi == lo:
        hi = lo + 1.0
    n = max(len(v) for v in series.values())
    xs = np.arange(n, dtype=np.float64) if xs is None else np.asarray(xs, dtype=np.float64)
    x0, x1 = float(xs.min()), float(xs.max()) if len(xs) > 1 else float(xs.min()) + 1.0
    px = lambda x: left + (x - x0) / (x1 - x0) * (W - left - right)
    py = lambda y: H - bottom - (y - lo) / (hi - lo) * (H - top - bottom)
    d.rectangle([left, top, W - right, H - bottom], outline=(0, 0, 0))
    d.text((4, top - 4), f"{hi:.3g}", fill=(0, 0, 0))
    d.text((4, H - bottom - 8), f"{lo:.3g}", fill=(0, 0, 0))
    d.text((left, H - bottom + 6), f"{x0:.4g}", fill=(0, 0, 0))
    d.text((W - right - 40, H - bottom + 6), f"{x1:.4g}", fill=(0, 0, 0))
    if title:
        d.text((left, 4), title, fill=(0, 0, 0))
    for k, (name, ys) in enumerate(series.items()):
        ys = np.asarray(ys, dtype=np.float64)
        pts = [(px(x), py(y)) for x, y in zip(xs, ys) if np.isfinite(y)]
        c = colors[k % len(colors)]
        if len(pts) > 1:
            d.line(pts, fill=c, width=1)
        d.text((W - right - 110, top + 4 + 12 * k), name, fill=c)
    return np.asarray(im)


def moving_average(x: Sequence[float], k: int) -> List[float]:
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0 or k <= 1:
        return list(x)
    c = np.cumsum(np.insert(x, 0, 0.0))
    out = [(c[i + 1] - c[max(0, i + 1 - k)]) / min(k, i + 1) for i in range(len(x))]
    return out
