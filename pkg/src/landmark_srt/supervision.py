"""Detection, registration (SBR) and triangulation (SBT) losses.

Coordinates are ``(K, 2)`` arrays, heatmap stacks ``(K, H, W)`` arrays and
masks ``(K,)`` arrays of 0/1. Every loss returns its value together with the
analytic gradients w.r.t. each differentiable argument. Masks are data: they
never receive gradients.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import CELL_NUDGE


@dataclass(frozen=True)
class LossWeights:
    w_sbr: float = 0.0
    w_sbt: float = 0.0

    def __post_init__(self):
        for w in (self.w_sbr, self.w_sbt):
            if not np.isfinite(w) or w < 0:
                raise ValueError("loss weights must be finite and non-negative")


@dataclass(frozen=True)
class Thresholds:
    """Rejection thresholds as fractions of sqrt(bounding-box area)."""

    t_fb_frac: float = 0.01
    t_d_frac: float = 0.01
    t_tri_frac: float = 0.01

    def __post_init__(self):
        if min(self.t_fb_frac, self.t_d_frac, self.t_tri_frac) <= 0:
            raise ValueError("thresholds must be positive")


def _coords(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 2:
        raise ValueError(f"landmark sets differ: {a.shape} vs {b.shape}")
    return a, b


def _maps(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3:
        raise ValueError(f"heatmap stacks differ: {a.shape} vs {b.shape}")
    return a, b


def _mask(mask, k):
    if mask is None:
        return np.ones(k)
    m = np.asarray(mask, dtype=np.float64).reshape(-1)
    if m.size != k:
        raise ValueError(f"mask has {m.size} entries for {k} landmarks")
    return m


def _masked_l1(a, b, mask):
    diff = a - b
    m = _mask(mask, a.shape[0])[:, None]
    loss = float(np.sum(m * np.abs(diff)))
    # subgradient 0 at ties
    g = m * np.sign(diff)
    return loss, g


def _frobenius_rows(R, mask):
    """sum_k mask_k ||R_k||_F with gradient R_k / ||R_k|| (0 for a zero map)."""
    k = R.shape[0]
    m = _mask(mask, k)
    norms = np.sqrt(np.sum(R.reshape(k, -1) ** 2, axis=1))
    loss = float(np.sum(m * norms))
    scale = np.divide(m, norms, out=np.zeros(k), where=norms > 0)
    return loss, R * scale[:, None, None]


def detection_loss_regression(pred, gt):
    """``sum_k |pred_k - gt_k|_1``; returns ``(loss, d loss / d pred)``."""
    pred, gt = _coords(pred, gt)
    return _masked_l1(pred, gt, None)


def detection_loss_heatmap(pred, gt):
    """``sum_k ||M_k - M*_k||_F``; returns ``(loss, d loss / d pred)``."""
    pred, gt = _maps(pred, gt)
    return _frobenius_rows(pred - gt, None)


def sbr_loss_coords(det_curr, tracked, mask):
    """Masked L1 between detections and tracked points.

    Returns ``(loss, grad_det, grad_tracked)``.
    """
    det_curr, tracked = _coords(det_curr, tracked)
    loss, g = _masked_l1(det_curr, tracked, mask)
    return loss, g, -g


def sbr_loss_heatmap(maps_curr, warped_prev, mask):
    """Masked Frobenius distance to the flow-warped previous heatmaps.

    Returns ``(loss, grad_curr, grad_warped)``.
    """
    maps_curr, warped_prev = _maps(maps_curr, warped_prev)
    loss, g = _frobenius_rows(maps_curr - warped_prev, mask)
    return loss, g, -g


def sbt_reliability(det, reproj, bbox_scale: float, th: Thresholds = Thresholds()) -> np.ndarray:
    """``0`` where the reprojection is further than ``t_tri`` from the detection."""
    det, reproj = _coords(det, reproj)
    dist = np.linalg.norm(reproj - det, axis=1)
    with np.errstate(invalid="ignore"):
        ok = dist <= th.t_tri_frac * bbox_scale
    return ok.astype(np.int8)


def sbt_loss_coords(det, reproj, mask):
    """Masked L1 between detections and reprojections.

    Returns ``(loss, grad_det, grad_reproj)``; the caller chains
    ``grad_reproj`` through the reprojection Jacobian to every view.
    """
    det, reproj = _coords(det, reproj)
    loss, g = _masked_l1(det, reproj, mask)
    return loss, g, -g


def _read_shift(a, ny: int, nx: int) -> np.ndarray:
    """``out[r, c] = a[r + ny, c + nx]``, 0 off the grid."""
    h, w = a.shape
    out = np.zeros_like(a)
    if abs(ny) >= h or abs(nx) >= w:
        return out
    out[max(0, -ny):h - max(0, ny), max(0, -nx):w - max(0, nx)] = \
        a[max(0, ny):h - max(0, -ny), max(0, nx):w - max(0, -nx)]
    return out


def _split_shift(d):
    # source offset s = -d split into integer cell n and fraction f, with the
    # same cell tie-break as bilinear sampling
    s = -np.asarray(d, dtype=np.float64)
    n = np.floor(s + CELL_NUDGE)
    return n.astype(int), s - n


def translate_maps(maps, disp, with_grad: bool = False):
    """Shift every map ``k`` by ``disp[k]``: ``out_k(x) = maps_k(x - disp_k)``.

    Bilinear, off-grid reads are 0. With ``with_grad`` also returns the
    partials of the output w.r.t. ``disp`` as two stacks ``(d_ddx, d_ddy)``.
    """
    maps = np.asarray(maps, dtype=np.float64)
    disp = np.asarray(disp, dtype=np.float64)
    out = np.empty_like(maps)
    gx = np.empty_like(maps)
    gy = np.empty_like(maps)
    for i in range(maps.shape[0]):
        (nx, ny), (fx, fy) = _split_shift(disp[i])
        f00 = _read_shift(maps[i], ny, nx)
        f01 = _read_shift(maps[i], ny, nx + 1)
        f10 = _read_shift(maps[i], ny + 1, nx)
        f11 = _read_shift(maps[i], ny + 1, nx + 1)
        top = f00 + fx * (f01 - f00)
        bot = f10 + fx * (f11 - f10)
        out[i] = top + fy * (bot - top)
        # d out / d disp = - d out / d s
        gx[i] = -((1.0 - fy) * (f01 - f00) + fy * (f11 - f10))
        gy[i] = -(bot - top)
    if with_grad:
        return out, gx, gy
    return out


def translate_maps_adjoint(grad_out, disp) -> np.ndarray:
    """Transpose of :func:`translate_maps` as a linear map of the heatmaps."""
    g = np.asarray(grad_out, dtype=np.float64)
    disp = np.asarray(disp, dtype=np.float64)
    out = np.empty_like(g)
    for i in range(g.shape[0]):
        (nx, ny), (fx, fy) = _split_shift(disp[i])
        out[i] = ((1 - fx) * (1 - fy) * _read_shift(g[i], -ny, -nx)
                  + fx * (1 - fy) * _read_shift(g[i], -ny, -nx - 1)
                  + (1 - fx) * fy * _read_shift(g[i], -ny - 1, -nx)
                  + fx * fy * _read_shift(g[i], -ny - 1, -nx - 1))
    return out


def sbt_loss_heatmap(maps, det, reproj, mask):
    """Masked Frobenius distance between heatmaps and their shifted copies.

    ``M^_k`` is ``maps_k`` translated by ``reproj_k - det_k`` (heatmap pixel
    units). Returns ``(loss, grad_maps, grad_det, grad_reproj)``; the maps
    receive gradient through both ``M`` and ``M^``.
    """
    det, reproj = _coords(det, reproj)
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim != 3 or maps.shape[0] != det.shape[0]:
        raise ValueError(f"heatmaps {maps.shape} do not match {det.shape[0]} landmarks")
    disp = reproj - det
    shifted, dsx, dsy = translate_maps(maps, disp, with_grad=True)
    loss, G = _frobenius_rows(maps - shifted, mask)
    grad_maps = G - translate_maps_adjoint(G, disp)
    grad_disp = -np.stack([np.sum(G * dsx, axis=(1, 2)), np.sum(G * dsy, axis=(1, 2))], axis=1)
    return loss, grad_maps, -grad_disp, grad_disp


def total_loss(det_loss: float, sbr_loss: float, sbt_loss: float, w: LossWeights) -> float:
    return det_loss + w.w_sbr * sbr_loss + w.w_sbt * sbt_loss


def sbt_loss_multiview(cameras, dets, bbox_scales, th: Thresholds = Thresholds()):
    """SBT over all views of one timestamp, coordinate form.

    ``cameras`` ``(M, 3, 4)``, ``dets`` ``(M, K, 2)`` full-image detections,
    ``bbox_scales`` ``(M,)``. Every landmark is triangulated from all views and
    reprojected; ``beta`` is computed on the detached reprojections. A landmark
    whose triangulation is degenerate or lands behind a camera gets ``beta = 0``
    in every view.

    Returns ``(loss, grad (M, K, 2), beta (M, K), reproj (M, K, 2))``. The
    gradient of each view's term reaches every view through the
    triangulation.
    """
    import warnings

    from .camera_geometry import CheiralityWarning, DegenerateGeometryError, reprojection_jacobian

    cams = np.asarray(cameras, dtype=np.float64)
    dets = np.asarray(dets, dtype=np.float64)
    M, K = dets.shape[:2]
    scales = np.broadcast_to(np.asarray(bbox_scales, dtype=np.float64), (M,))
    grad = np.zeros_like(dets)
    beta = np.zeros((M, K), dtype=np.int8)
    reproj = np.full_like(dets, np.nan)
    loss = 0.0
    for k in range(K):
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error", CheiralityWarning)
                rp, jac = reprojection_jacobian(cams, dets[:, k])
        except (DegenerateGeometryError, CheiralityWarning, ValueError):
            continue
        reproj[:, k] = rp
        b = np.array([sbt_reliability(dets[m, k][None], rp[m][None], scales[m], th)[0] for m in range(M)])
        beta[:, k] = b
        lk, g_det, g_rep = sbt_loss_coords(dets[:, k], rp, b)
        loss += lk
        grad[:, k] += g_det + np.einsum("ia,iajb->jb", g_rep, jac)
    return loss, grad, beta, reproj
