"""Tiny numpy landmark detectors with hand-written backprop.

Shared trunk on a ``S x S`` crop (``S = 32`` by default)::

    conv3x3(1 -> c1) + ReLU -> avgpool 2 -> conv3x3(c1 -> c2) + ReLU

followed by either

* a regression head: fully connected, ``2K`` outputs read as ``(x, y)`` crop
  pixels, or
* a heatmap head: conv3x3(c2 -> K) and ``exp``, giving ``K`` maps at half the
  crop resolution. Heatmap pixel ``h`` sits at crop pixel ``2 h + 0.5``.

All parameters live in one flat float64 vector; :class:`Layout` maps names
to slices of it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MODES = ("regression", "heatmap")


@dataclass(frozen=True)
class ArchConfig:
    mode: str = "regression"
    K: int = 5
    crop: int = 32
    c1: int = 8
    c2: int = 16

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.K < 1 or self.crop < 4 or self.crop % 2:
            raise ValueError("need K >= 1 and an even crop of at least 4")

    @property
    def map_size(self) -> int:
        return self.crop // 2


class Layout:
    def __init__(self, arch: ArchConfig):
        h = arch.map_size
        shapes = [
            ("conv1_w", (arch.c1, 1, 3, 3)), ("conv1_b", (arch.c1,)),
            ("conv2_w", (arch.c2, arch.c1, 3, 3)), ("conv2_b", (arch.c2,)),
        ]
        if arch.mode == "regression":
            shapes += [("fc_w", (2 * arch.K, arch.c2 * h * h)), ("fc_b", (2 * arch.K,))]
        else:
            shapes += [("hm_w", (arch.K, arch.c2, 3, 3)), ("hm_b", (arch.K,))]
        self.shapes = dict(shapes)
        self.slices = {}
        off = 0
        for name, shp in shapes:
            n = int(np.prod(shp))
            self.slices[name] = slice(off, off + n)
            off += n
        self.size = off

    def view(self, flat, name):
        return flat[self.slices[name]].reshape(self.shapes[name])


def init_params(arch: ArchConfig, rng) -> np.ndarray:
    """He-initialised weights; the regression bias starts at the crop centre."""
    lay = Layout(arch)
    p = np.zeros(lay.size)
    for name in ("conv1_w", "conv2_w", "hm_w"):
        if name in lay.shapes:
            shp = lay.shapes[name]
            fan_in = shp[1] * 9
            p[lay.slices[name]] = rng.normal(scale=np.sqrt(2.0 / fan_in), size=int(np.prod(shp)))
    if arch.mode == "regression":
        shp = lay.shapes["fc_w"]
        p[lay.slices["fc_w"]] = rng.normal(scale=1e-2 / np.sqrt(shp[1]), size=int(np.prod(shp)))
        p[lay.slices["fc_b"]] = (arch.crop - 1) / 2.0
    else:
        p[lay.slices["hm_b"]] = -2.0
    return p


def normalize_crops(crops) -> np.ndarray:
    """Per-crop zero mean, unit variance (makes the net blind to intensity scale)."""
    x = np.asarray(crops, dtype=np.float64)
    mu = x.mean(axis=(-2, -1), keepdims=True)
    sd = x.std(axis=(-2, -1), keepdims=True)
    return (x - mu) / (sd + 1e-6)


# --- layers ------------------------------------------------------------------

def _im2col(x):
    """``(N, C, H, W)`` -> ``(N, H, W, C * 9)`` patches of a zero-padded 3x3 conv."""
    N, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((N, H, W, C, 9))
    for i in range(3):
        for j in range(3):
            cols[..., i * 3 + j] = xp[:, :, i:i + H, j:j + W].transpose(0, 2, 3, 1)
    return cols.reshape(N, H, W, C * 9)


def _col2im(dcols, shape):
    N, C, H, W = shape
    d = dcols.reshape(N, H, W, C, 9)
    dxp = np.zeros((N, C, H + 2, W + 2))
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + H, j:j + W] += d[..., i * 3 + j].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1]


def _conv_fwd(x, w, b):
    cols = _im2col(x)
    y = cols @ w.reshape(w.shape[0], -1).T + b
    return y.transpose(0, 3, 1, 2), cols


def _conv_bwd(dy, cols, w, x_shape, need_dx=True):
    dyr = dy.transpose(0, 2, 3, 1).reshape(-1, w.shape[0])
    dw = (dyr.T @ cols.reshape(-1, cols.shape[-1])).reshape(w.shape)
    db = dyr.sum(axis=0)
    dx = None
    if need_dx:
        dcols = dyr @ w.reshape(w.shape[0], -1)
        dx = _col2im(dcols, x_shape)
    return dx, dw, db


def _pool_fwd(x):
    N, C, H, W = x.shape
    return x.reshape(N, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))


def _pool_bwd(dy):
    return np.repeat(np.repeat(dy, 2, axis=2), 2, axis=3) * 0.25


@dataclass
class Cache:
    x: np.ndarray
    cols1: np.ndarray
    a1: np.ndarray
    p1: np.ndarray
    cols2: np.ndarray
    a2: np.ndarray
    head: dict = field(default_factory=dict)


def forward(params, crops, arch: ArchConfig):
    """Batched forward pass.

    ``crops`` is ``(N, S, S)`` (already normalised). Returns ``(out, cache)``
    with ``out`` of shape ``(N, K, 2)`` crop coordinates (regression) or
    ``(N, K, S/2, S/2)`` heatmaps.
    """
    lay = Layout(arch)
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (lay.size,):
        raise ValueError(f"expected {lay.size} parameters, got {params.shape}")
    x = np.asarray(crops, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1:] != (arch.crop, arch.crop):
        raise ValueError(f"crops must be {arch.crop}x{arch.crop}, got {x.shape[1:]}")
    x = x[:, None]
    z1, cols1 = _conv_fwd(x, lay.view(params, "conv1_w"), lay.view(params, "conv1_b"))
    a1 = np.maximum(z1, 0.0)
    p1 = _pool_fwd(a1)
    z2, cols2 = _conv_fwd(p1, lay.view(params, "conv2_w"), lay.view(params, "conv2_b"))
    a2 = np.maximum(z2, 0.0)
    cache = Cache(x, cols1, a1, p1, cols2, a2)
    N = x.shape[0]
    if arch.mode == "regression":
        f = a2.reshape(N, -1)
        out = f @ lay.view(params, "fc_w").T + lay.view(params, "fc_b")
        return out.reshape(N, arch.K, 2), cache
    z3, cols3 = _conv_fwd(a2, lay.view(params, "hm_w"), lay.view(params, "hm_b"))
    maps = np.exp(z3)
    cache.head = {"cols3": cols3, "maps": maps}
    return maps, cache


def backward(params, cache: Cache, grad_out, arch: ArchConfig) -> np.ndarray:
    """Gradient of ``sum(grad_out * out)`` w.r.t. the flat parameters."""
    lay = Layout(arch)
    g = np.zeros(lay.size)
    N = cache.x.shape[0]
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if arch.mode == "regression":
        go = grad_out.reshape(N, 2 * arch.K)
        f = cache.a2.reshape(N, -1)
        g[lay.slices["fc_w"]] = (go.T @ f).ravel()
        g[lay.slices["fc_b"]] = go.sum(axis=0)
        da2 = (go @ lay.view(params, "fc_w")).reshape(cache.a2.shape)
    else:
        dz3 = grad_out * cache.head["maps"]
        da2, dw, db = _conv_bwd(dz3, cache.head["cols3"], lay.view(params, "hm_w"), cache.a2.shape)
        g[lay.slices["hm_w"]] = dw.ravel()
        g[lay.slices["hm_b"]] = db
    dz2 = da2 * (cache.a2 > 0)
    dp1, dw, db = _conv_bwd(dz2, cache.cols2, lay.view(params, "conv2_w"), cache.p1.shape)
    g[lay.slices["conv2_w"]] = dw.ravel()
    g[lay.slices["conv2_b"]] = db
    dz1 = _pool_bwd(dp1) * (cache.a1 > 0)
    _, dw, db = _conv_bwd(dz1, cache.cols1, lay.view(params, "conv1_w"), cache.x.shape, need_dx=False)
    g[lay.slices["conv1_w"]] = dw.ravel()
    g[lay.slices["conv1_b"]] = db
    return g


def forward_regression(image, params, arch: ArchConfig):
    """``(K, 2)`` crop coordinates for one crop, plus the cache."""
    if arch.mode != "regression":
        raise ValueError("architecture is not a regression detector")
    out, cache = forward(params, np.asarray(image)[None], arch)
    return out[0], cache


def forward_heatmap(image, params, arch: ArchConfig):
    """``(K, S/2, S/2)`` heatmaps for one crop, plus the cache."""
    if arch.mode != "heatmap":
        raise ValueError("architecture is not a heatmap detector")
    out, cache = forward(params, np.asarray(image)[None], arch)
    return out[0], cache


# --- heatmap utilities -------------------------------------------------------

def soft_argmax(hmap, temperature: float = 1.0, with_jac: bool = False):
    """Softmax-weighted mean of the grid coordinates of ``hmap``.

    Accepts ``(..., H, W)``; returns ``(..., 2)`` points as ``(x, y)``. With
    ``with_jac`` also returns ``(..., 2, H, W)`` derivatives w.r.t. the map.
    """
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    m = np.asarray(hmap, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise ValueError("heatmap has non-finite values")
    H, W = m.shape[-2:]
    z = m / temperature
    z = z - z.max(axis=(-2, -1), keepdims=True)
    w = np.exp(z)
    w /= w.sum(axis=(-2, -1), keepdims=True)
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    px = np.sum(w * xs, axis=(-2, -1))
    py = np.sum(w * ys, axis=(-2, -1))
    pt = np.stack([px, py], axis=-1)
    if not with_jac:
        return pt
    jx = w * (xs - px[..., None, None]) / temperature
    jy = w * (ys - py[..., None, None]) / temperature
    return pt, np.stack([jx, jy], axis=-3)


def gaussian_map(coord, sigma: float, dims) -> np.ndarray:
    """Unnormalised Gaussian (peak 1) at ``coord``; no bounds check."""
    h, w = dims
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    c = np.asarray(coord, dtype=np.float64)
    return np.exp(-((xs - c[..., 0, None, None]) ** 2 + (ys - c[..., 1, None, None]) ** 2) / (2 * sigma ** 2))


def gt_heatmap(coord, sigma: float = 1.5, dims=(16, 16)) -> np.ndarray:
    """Ground-truth target map: a peak-1 Gaussian of std ``sigma`` at ``coord``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    x, y = float(coord[0]), float(coord[1])
    if not (0 <= x <= dims[1] - 1 and 0 <= y <= dims[0] - 1):
        raise ValueError(f"coordinate {coord} outside a {dims} map")
    return gaussian_map(np.array([x, y]), sigma, dims)


def crop_to_map(pts):
    return (np.asarray(pts, dtype=np.float64) - 0.5) / 2.0


def map_to_crop(pts):
    return np.asarray(pts, dtype=np.float64) * 2.0 + 0.5


# --- optimiser ---------------------------------------------------------------

@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params, grads, state: AdamState, cfg: AdamConfig = AdamConfig()):
    """One bias-corrected Adam update; returns ``(params, state)`` as new arrays."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("parameter, gradient and state shapes differ")
    t = state.t + 1
    m = cfg.beta1 * state.m + (1 - cfg.beta1) * grads
    v = cfg.beta2 * state.v + (1 - cfg.beta2) * grads * grads
    mhat = m / (1 - cfg.beta1 ** t)
    vhat = v / (1 - cfg.beta2 ** t)
    return params - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps), AdamState(m, v, t)
