"""Sampled 2D fields, bilinear sampling and image gradients.

A scalar field is a 2D float64 array indexed ``[row, col]``; a multi-channel
field is a ``(C, H, W)`` array. Points are ``(x, y)`` with ``x`` the column
and ``y`` the row, origin at the centre of pixel (0, 0).
"""
from __future__ import annotations

from typing import Iterable

import numpy as np

# tie-break for the cell choice at integer coordinates
CELL_NUDGE = 1e-9


class OutOfBoundsError(ValueError):
    """A sample point fell outside the sampled grid."""


def as_field(a, name: str = "field") -> np.ndarray:
    f = np.asarray(a, dtype=np.float64)
    if f.ndim != 2:
        raise ValueError(f"{name} must be 2D, got shape {f.shape}")
    if f.shape[0] < 1 or f.shape[1] < 1:
        raise ValueError(f"{name} must be non-empty")
    if not np.all(np.isfinite(f)):
        raise ValueError(f"{name} contains non-finite samples")
    return f


def as_channels(a) -> np.ndarray:
    """View a scalar or multi-channel field as ``(C, H, W)``."""
    f = np.asarray(a, dtype=np.float64)
    if f.ndim == 2:
        return f[None]
    if f.ndim != 3 or f.shape[0] < 1:
        raise ValueError(f"expected (H, W) or (C, H, W) field, got shape {f.shape}")
    return f


def in_bounds(shape, xs, ys) -> np.ndarray:
    h, w = shape[-2], shape[-1]
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    return (xs >= 0.0) & (xs <= w - 1) & (ys >= 0.0) & (ys <= h - 1)


def _cell(coord, size):
    c0 = np.floor(coord + CELL_NUDGE).astype(np.int64)
    if size >= 2:
        c0 = np.clip(c0, 0, size - 2)
    else:
        c0 = np.zeros_like(c0)
    return c0


def sample(field, xs, ys, padding: str = "strict", with_grad: bool = False):
    """Bilinear samples of ``field`` at points ``(xs, ys)``.

    ``field`` may be ``(H, W)`` or ``(C, H, W)``; the output has shape
    ``field.shape[:-2] + xs.shape``. Padding modes:

    * ``strict``: any point outside ``[0, W-1] x [0, H-1]`` raises
      :class:`OutOfBoundsError`.
    * ``border``: points are clamped into the grid first (for rendering).
    * ``zeros``: each of the four neighbours outside the grid reads 0.

    With ``with_grad`` the partial derivatives w.r.t. x and y are returned as
    well, ``(values, d_dx, d_dy)``.
    """
    f = np.asarray(field, dtype=np.float64)
    h, w = f.shape[-2], f.shape[-1]
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    xs, ys = np.broadcast_arrays(xs, ys)

    if padding == "strict":
        if not np.all(in_bounds(f.shape, xs, ys)):
            raise OutOfBoundsError("sample point outside the grid")
    elif padding == "border":
        xs = np.clip(xs, 0.0, w - 1)
        ys = np.clip(ys, 0.0, h - 1)
    elif padding != "zeros":
        raise ValueError(f"unknown padding mode {padding!r}")

    if padding == "zeros":
        x0 = np.floor(xs + CELL_NUDGE).astype(np.int64)
        y0 = np.floor(ys + CELL_NUDGE).astype(np.int64)
    else:
        x0 = _cell(xs, w)
        y0 = _cell(ys, h)
    x1 = x0 + 1
    y1 = y0 + 1
    fx = xs - x0
    fy = ys - y0

    def read(yy, xx):
        ok = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
        v = f[..., np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        if padding == "zeros" or w == 1 or h == 1:
            v = np.where(ok, v, 0.0)
        return v

    f00 = read(y0, x0)
    f01 = read(y0, x1)
    f10 = read(y1, x0)
    f11 = read(y1, x1)
    if w == 1:
        fx = np.zeros_like(fx)
    if h == 1:
        fy = np.zeros_like(fy)

    top = f00 + fx * (f01 - f00)
    bot = f10 + fx * (f11 - f10)
    vals = top + fy * (bot - top)
    if not with_grad:
        return vals
    d_dx = (1.0 - fy) * (f01 - f00) + fy * (f11 - f10)
    d_dy = bot - top
    return vals, d_dx, d_dy


def bilinear_sample(field, p) -> float:
    """Bilinear interpolation of a scalar field at point ``p = (x, y)``."""
    f = as_field(field)
    x, y = float(p[0]), float(p[1])
    return float(sample(f, x, y, padding="strict"))


def bilinear_sample_jacobian(field, p) -> tuple[float, float]:
    """Analytic ``(d/dx, d/dy)`` of :func:`bilinear_sample` at ``p``.

    On cell boundaries the derivative of the cell containing ``p + 1e-9`` is
    used.
    """
    f = as_field(field)
    x, y = float(p[0]), float(p[1])
    _, gx, gy = sample(f, x, y, padding="strict", with_grad=True)
    return float(gx), float(gy)


def spatial_gradient(field) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference gradients ``(gx, gy)`` with replicated borders."""
    f = np.asarray(field, dtype=np.float64)
    if f.ndim < 2 or f.shape[-1] < 3 or f.shape[-2] < 3:
        raise ValueError("spatial_gradient needs a field of at least 3x3")
    pad = [(0, 0)] * (f.ndim - 2) + [(1, 1), (1, 1)]
    g = np.pad(f, pad, mode="edge")
    gx = 0.5 * (g[..., 1:-1, 2:] - g[..., 1:-1, :-2])
    gy = 0.5 * (g[..., 2:, 1:-1] - g[..., :-2, 1:-1])
    return gx, gy


# --- raster container -------------------------------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def format_pf2(field) -> str:
    f = as_field(field)
    h, w = f.shape
    lines = [f"PF2 {w} {h}"]
    lines += [" ".join(_fmt(v) for v in row) for row in f]
    return "\n".join(lines) + "\n"


def parse_pf2(lines: Iterable[str]) -> np.ndarray:
    it = iter(lines)
    header = next(it).split()
    if len(header) != 3 or header[0] != "PF2":
        raise ValueError(f"bad PF2 header: {' '.join(header)!r}")
    w, h = int(header[1]), int(header[2])
    rows = [next(it) for _ in range(h)]
    data = np.array(" ".join(rows).split(), dtype=np.float64)
    if data.size != w * h:
        raise ValueError(f"PF2 payload has {data.size} samples, expected {w * h}")
    return data.reshape(h, w)


def write_pf2(path, field) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(format_pf2(field))


def read_pf2(path) -> np.ndarray:
    with open(path) as fh:
        return parse_pf2(fh.read().splitlines())


def format_flow(u, v) -> str:
    return "FLOW\n" + format_pf2(u) + format_pf2(v)


def parse_flow(text: str) -> tuple[np.ndarray, np.ndarray]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "FLOW":
        raise ValueError("missing FLOW prefix")
    u = parse_pf2(lines[1:])
    v = parse_pf2(lines[2 + u.shape[0]:])
    if u.shape != v.shape:
        raise ValueError("flow components differ in shape")
    return u, v


def write_flow(path, u, v) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(format_flow(u, v))


def read_flow(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path) as fh:
        return parse_flow(fh.read())
