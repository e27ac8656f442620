"""Portable pixmap/graymap output and a small deterministic chart renderer.

P5/P6 binary images avoid codec dependencies and are byte-identical across
platforms.  Heatmaps record their value range as header comments; charts
are simple polylines over an axes box, with the plotted series also
emitted as tidy CSV by the callers.
"""

from __future__ import annotations

import numpy as np

# Series colours: blue, orange, green, red, purple, grey.
PALETTE = (
    (31, 119, 180),
    (255, 127, 14),
    (44, 160, 44),
    (214, 39, 40),
    (148, 103, 189),
    (127, 127, 127),
)


def write_pgm(path: str, values: np.ndarray, comment: str | None = None) -> None:
    """Grayscale P5 image scaled to [min, max]; the scale is recorded as a comment."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("graymap data must be 2-d")
    lo, hi = float(values.min()), float(values.max())
    scale = (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
    data = np.round(scale * 255.0).astype(np.uint8)
    header = f"P5\n# min={lo:.9g} max={hi:.9g}\n"
    if comment:
        header += f"# {comment}\n"
    header += f"{values.shape[1]} {values.shape[0]}\n255\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(data.tobytes())


def write_ppm(path: str, rgb: np.ndarray, comment: str | None = None) -> None:
    """Colour P6 image from a (h, w, 3) uint8 array."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("pixmap data must be (h, w, 3)")
    header = "P6\n"
    if comment:
        header += f"# {comment}\n"
    header += f"{rgb.shape[1]} {rgb.shape[0]}\n255\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(rgb.tobytes())


def read_pnm(path: str) -> np.ndarray:
    """Read back P5/P6 files written by this module (testing aid)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    fields = []
    idx = 0
    while len(fields) < 4:
        end = blob.index(b"\n", idx)
        line = blob[idx : end].strip()
        idx = end + 1
        if line.startswith(b"#") or not line:
            continue
        fields.extend(line.split())
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    data = np.frombuffer(blob[idx:], dtype=np.uint8)
    if magic == b"P5":
        return data.reshape(h, w)
    if magic == b"P6":
        return data.reshape(h, w, 3)
    raise ValueError(f"unsupported magic {magic!r}")


def _draw_line(img: np.ndarray, x0: int, y0: int, x1: int, y1: int, colour) -> None:
    """Integer line rasterisation."""
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    h, w = img.shape[:2]
    x, y = x0, y0
    while True:
        if 0 <= y < h and 0 <= x < w:
            img[y, x] = colour
        if x == x1 and y == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x += sx
        if e2 <= dx:
            err += dx
            y += sy


def render_line_chart(
    series: dict[str, tuple[np.ndarray, np.ndarray]],
    width: int = 640,
    height: int = 400,
    log_x: bool = False,
) -> np.ndarray:
    """Polyline chart of named (x, y) series on shared axes.

    Returns an (h, w, 3) uint8 canvas: white background, black axes box,
    one palette colour per series, and a legend swatch per series in the
    top-right corner (names travel in the accompanying CSV).
    """
    if not series:
        raise ValueError("no series to plot")
    img = np.full((height, width, 3), 255, dtype=np.uint8)
    margin = 40
    x0, x1 = margin, width - margin // 2
    y0, y1 = height - margin, margin // 2

    xs_all = np.concatenate([np.asarray(x, dtype=np.float64) for x, _ in series.values()])
    ys_all = np.concatenate([np.asarray(y, dtype=np.float64) for _, y in series.values()])
    if log_x:
        xs_all = np.log10(np.maximum(xs_all, 1e-300))
    xmin, xmax = float(xs_all.min()), float(xs_all.max())
    ymin, ymax = float(ys_all.min()), float(ys_all.max())
    xspan = (xmax - xmin) or 1.0
    yspan = (ymax - ymin) or 1.0

    def to_px(x, y):
        if log_x:
            x = np.log10(max(x, 1e-300))
        px = int(round(x0 + (x - xmin) / xspan * (x1 - x0)))
        py = int(round(y0 - (y - ymin) / yspan * (y0 - y1)))
        return px, py

    black = (0, 0, 0)
    _draw_line(img, x0, y0, x1, y0, black)
    _draw_line(img, x0, y0, x0, y1, black)
    for si, (name, (xs, ys)) in enumerate(series.items()):
        colour = PALETTE[si % len(PALETTE)]
        pts = [to_px(float(x), float(y)) for x, y in zip(xs, ys)]
        for (ax, ay), (bx, by) in zip(pts, pts[1:]):
            _draw_line(img, ax, ay, bx, by, colour)
        for px, py in pts:
            img[max(py - 1, 0) : py + 2, max(px - 1, 0) : px + 2] = colour
        # legend swatch
        ly = y1 + 12 * si
        img[ly : ly + 6, x1 - 30 : x1 - 10] = colour
    return img
