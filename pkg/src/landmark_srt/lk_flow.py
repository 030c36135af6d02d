"""Inverse-compositional Lucas-Kanade point tracking and flow utilities.

The warp family is pure translation, ``W(x; p) = x + p``. A template is cut
from the previous frame around the start point once (values, gradients,
Gaussian weights, Jacobian and regularised Hessian); every iteration then
samples the current frame at ``x + p``, solves for ``dp`` and updates
``p <- p - dp``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_core import (
    OutOfBoundsError,
    as_channels,
    in_bounds,
    sample,
    spatial_gradient,
)


@dataclass(frozen=True)
class PatchSpec:
    side: int = 13
    sigma: float | None = None  # None -> side / 4
    max_iterations: int = 20
    convergence_eps: float = 1e-6
    hessian_eps: float = 1e-8

    def __post_init__(self):
        if self.side < 3 or self.side % 2 == 0:
            raise ValueError("patch side must be odd and >= 3")
        if self.sigma is not None and self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.convergence_eps <= 0 or self.hessian_eps <= 0:
            raise ValueError("eps values must be positive")

    @property
    def weight_sigma(self) -> float:
        return self.side / 4.0 if self.sigma is None else float(self.sigma)

    def offsets(self) -> np.ndarray:
        h = self.side // 2
        oy, ox = np.mgrid[-h:h + 1, -h:h + 1]
        return np.stack([ox.ravel(), oy.ravel()], axis=1).astype(np.float64)


@dataclass
class Template:
    """Pre-computed quantities of one LK track.

    ``values`` is ``(C, N)``; ``jac`` is ``(N, C, 2)`` (one ``C x 2`` block per
    patch location, stacked this is the ``C|Omega| x 2`` Jacobian); ``weights``
    is ``(N,)``; ``hessian`` is the regularised ``J^T A J``.
    """

    center: np.ndarray
    offsets: np.ndarray
    values: np.ndarray
    jac: np.ndarray
    weights: np.ndarray
    hessian: np.ndarray
    hessian_inv: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.hessian_inv is None:
            self.hessian_inv = np.linalg.inv(self.hessian)


@dataclass(frozen=True)
class TrackResult:
    point: np.ndarray
    converged: bool
    iterations: int
    valid: bool


class InvalidTemplateError(ValueError):
    """The template patch does not fit inside the previous frame."""


class TrackingError(ValueError):
    """A requested track derivative is not available (invalid or unconverged)."""


def precompute_template(F_prev, x, spec: PatchSpec = PatchSpec()) -> Template:
    F = as_channels(F_prev)
    c = np.asarray(x, dtype=np.float64)
    offs = spec.offsets()
    pts = c + offs
    h, w = F.shape[-2:]
    # one pixel of margin keeps every sampled gradient a central difference
    ok = (pts[:, 0] >= 1) & (pts[:, 0] <= w - 2) & (pts[:, 1] >= 1) & (pts[:, 1] <= h - 2)
    if not np.all(ok):
        raise InvalidTemplateError("template patch leaves the frame")
    gx, gy = spatial_gradient(F)
    values = sample(F, pts[:, 0], pts[:, 1])
    jx = sample(gx, pts[:, 0], pts[:, 1])
    jy = sample(gy, pts[:, 0], pts[:, 1])
    jac = np.stack([jx.T, jy.T], axis=-1)  # (N, C, 2)
    sig = spec.weight_sigma
    weights = np.exp(-np.sum(offs ** 2, axis=1) / (2.0 * sig ** 2))
    H = np.einsum("n,nca,ncb->ab", weights, jac, jac) + spec.hessian_eps * np.eye(2)
    return Template(center=c, offsets=offs, values=values, jac=jac, weights=weights, hessian=H)


def solve_delta_p(template: Template, F_curr, p) -> np.ndarray:
    """One Gauss-Newton step ``dp = H^-1 sum_x J(x)^T a_x (F_curr(x + p) - T(x))``."""
    F = as_channels(F_curr)
    pts = template.center + template.offsets + np.asarray(p, dtype=np.float64)
    cur = sample(F, pts[:, 0], pts[:, 1])  # raises OutOfBoundsError
    resid = cur - template.values  # (C, N)
    b = np.einsum("n,nca,cn->a", template.weights, template.jac, resid)
    return template.hessian_inv @ b


def track_landmark_lk(F_prev, F_curr, x, spec: PatchSpec = PatchSpec()) -> TrackResult:
    x = np.asarray(x, dtype=np.float64)
    try:
        tpl = precompute_template(F_prev, x, spec)
    except InvalidTemplateError:
        return TrackResult(point=x.copy(), converged=False, iterations=0, valid=False)
    p = np.zeros(2)
    for it in range(1, spec.max_iterations + 1):
        try:
            dp = solve_delta_p(tpl, F_curr, p)
        except OutOfBoundsError:
            return TrackResult(point=x + p, converged=False, iterations=it, valid=False)
        p = p - dp
        if not np.all(np.isfinite(p)):
            return TrackResult(point=x.copy(), converged=False, iterations=it, valid=False)
        if np.hypot(dp[0], dp[1]) < spec.convergence_eps:
            valid = bool(np.all(in_bounds(as_channels(F_curr).shape, *(x + p + tpl.offsets).T)))
            return TrackResult(point=x + p, converged=True, iterations=it, valid=valid)
    valid = bool(np.all(in_bounds(as_channels(F_curr).shape, *(x + p + tpl.offsets).T)))
    return TrackResult(point=x + p, converged=False, iterations=spec.max_iterations, valid=valid)


def track_gradient_lk(F_prev, F_curr, x, spec: PatchSpec = PatchSpec(), result: TrackResult | None = None):
    """``(2, 2)`` derivative of the converged LK track w.r.t. the start point.

    At convergence the normal-equation residual

        g(x, p) = sum_n a_n J_n(x)^T (F_curr(x + o_n + p) - F_prev(x + o_n))

    vanishes; the implicit function theorem gives
    ``dp/dx = -(dg/dp)^-1 dg/dx`` and the track ``x + p`` has derivative
    ``I + dp/dx``.
    """
    if result is None:
        result = track_landmark_lk(F_prev, F_curr, x, spec)
    if not (result.valid and result.converged):
        raise TrackingError("track did not converge to a valid point")
    F0 = as_channels(F_prev)
    F1 = as_channels(F_curr)
    x = np.asarray(x, dtype=np.float64)
    p = result.point - x
    offs = spec.offsets()
    q0 = x + offs
    q1 = q0 + p
    gx, gy = spatial_gradient(F0)
    _, f0x, f0y = sample(F0, q0[:, 0], q0[:, 1], with_grad=True)
    f1, f1x, f1y = sample(F1, q1[:, 0], q1[:, 1], with_grad=True)
    t0 = sample(F0, q0[:, 0], q0[:, 1])
    jx, jxx, jxy = sample(gx, q0[:, 0], q0[:, 1], with_grad=True)
    jy, jyx, jyy = sample(gy, q0[:, 0], q0[:, 1], with_grad=True)
    a = np.exp(-np.sum(offs ** 2, axis=1) / (2.0 * spec.weight_sigma ** 2))
    r = f1 - t0  # (C, N)
    J = np.stack([jx, jy], axis=-1)  # (C, N, 2)
    dF1 = np.stack([f1x, f1y], axis=-1)
    dF0 = np.stack([f0x, f0y], axis=-1)
    dJ = np.stack([np.stack([jxx, jxy], -1), np.stack([jyx, jyy], -1)], axis=-2)  # (C, N, 2, 2)
    dg_dp = np.einsum("n,cna,cnb->ab", a, J, dF1)
    dg_dx = np.einsum("n,cnab,cn->ab", a, dJ, r) + np.einsum("n,cna,cnb->ab", a, J, dF1 - dF0)
    dp_dx = -np.linalg.solve(dg_dp, dg_dx)
    return np.eye(2) + dp_dx


# --- pre-computed flow fields ----------------------------------------------

def track_landmark_interp(u, v, x) -> np.ndarray:
    """Track ``x`` by bilinear lookup in a dense flow field ``(u, v)``."""
    x = np.asarray(x, dtype=np.float64)
    du = sample(u, x[..., 0], x[..., 1])
    dv = sample(v, x[..., 0], x[..., 1])
    return x + np.stack([du, dv], axis=-1)


def track_gradient_interp(u, v, x) -> np.ndarray:
    """``I + d(flow)/dx`` at ``x``; ``(..., 2, 2)`` for a batch of points."""
    x = np.asarray(x, dtype=np.float64)
    _, ux, uy = sample(u, x[..., 0], x[..., 1], with_grad=True)
    _, vx, vy = sample(v, x[..., 0], x[..., 1], with_grad=True)
    jac = np.stack([np.stack([ux, uy], -1), np.stack([vx, vy], -1)], axis=-2)
    return jac + np.eye(2)


def _warp_sources(shape, u, v):
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return xs - u, ys - v


def warp_field_by_flow(field, u, v) -> np.ndarray:
    """Backward warp ``out(x) = field(x - flow(x))``, reading 0 off-grid.

    ``field`` may carry leading channel axes.
    """
    f = np.asarray(field, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if f.shape[-2:] != u.shape or u.shape != v.shape:
        raise ValueError("field and flow dimensions differ")
    sx, sy = _warp_sources(u.shape, u, v)
    return sample(f, sx, sy, padding="zeros")


def warp_field_adjoint(grad_out, u, v) -> np.ndarray:
    """Transpose of :func:`warp_field_by_flow` (linear in the field).

    Scatters ``grad_out`` back onto the four source neighbours with the
    bilinear weights, giving d(loss)/d(field).
    """
    g = np.asarray(grad_out, dtype=np.float64)
    h, w = u.shape
    sx, sy = _warp_sources(u.shape, np.asarray(u, np.float64), np.asarray(v, np.float64))
    x0 = np.floor(sx + 1e-9).astype(np.int64)
    y0 = np.floor(sy + 1e-9).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    lead = g.shape[:-2]
    gf = g.reshape((-1, h, w))
    out = np.zeros_like(gf)
    for dy, dx, wgt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                        (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        xx = x0 + dx
        yy = y0 + dy
        ok = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
        idx = (yy[ok] * w + xx[ok])
        for c in range(gf.shape[0]):
            np.add.at(out[c].reshape(-1), idx, (gf[c] * wgt)[ok])
    return out.reshape(lead + (h, w))


def lk_dense_flow(F_prev, F_curr, spec: PatchSpec = PatchSpec(), step: int = 4):
    """Dense flow from LK tracks on a coarse grid, bilinearly upsampled.

    Grid nodes whose track fails take the flow of the nearest valid node
    (zero when none is valid).
    """
    F0 = as_channels(F_prev)
    h, w = F0.shape[-2:]
    margin = spec.side // 2 + 1
    gxs = np.arange(margin, w - margin, step, dtype=np.float64)
    gys = np.arange(margin, h - margin, step, dtype=np.float64)
    if gxs.size == 0 or gys.size == 0:
        raise ValueError("frame too small for the coarse flow grid")
    cu = np.full((gys.size, gxs.size), np.nan)
    cv = np.full_like(cu, np.nan)
    for i, yy in enumerate(gys):
        for j, xx in enumerate(gxs):
            res = track_landmark_lk(F_prev, F_curr, (xx, yy), spec)
            if res.valid:
                cu[i, j], cv[i, j] = res.point - (xx, yy)
    bad = ~np.isfinite(cu)
    if bad.all():
        cu[:] = 0.0
        cv[:] = 0.0
    elif bad.any():
        gi, gj = np.nonzero(~bad)
        for i, j in zip(*np.nonzero(bad)):
            k = np.argmin((gi - i) ** 2 + (gj - j) ** 2)
            cu[i, j], cv[i, j] = cu[gi[k], gj[k]], cv[gi[k], gj[k]]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    cx = (xs - gxs[0]) / step
    cy = (ys - gys[0]) / step
    return sample(cu, cx, cy, padding="border"), sample(cv, cx, cy, padding="border")


# --- forward-backward reliability --------------------------------------------

def reliability_rule(L_prev, L_tracked, L_back, L_det, t_fb: float, t_d: float,
                     image_shape, bbox=None, track_ok=True) -> np.ndarray:
    """Vectorised three-part check; returns 1 for reliable tracks, 0 otherwise.

    Arrays are ``(..., 2)``. ``bbox`` is ``(x0, y0, x1, y1)``.
    """
    L_prev = np.asarray(L_prev, np.float64)
    L_tracked = np.asarray(L_tracked, np.float64)
    L_back = np.asarray(L_back, np.float64)
    L_det = np.asarray(L_det, np.float64)
    h, w = image_shape[-2], image_shape[-1]
    ok = np.asarray(track_ok, dtype=bool) & np.all(np.isfinite(L_back), axis=-1)
    with np.errstate(invalid="ignore"):
        ok &= np.linalg.norm(L_prev - L_back, axis=-1) <= t_fb
        ok &= np.linalg.norm(L_tracked - L_det, axis=-1) <= t_d
    for pt in (L_tracked, L_det):
        ok &= in_bounds((h, w), pt[..., 0], pt[..., 1])
        if bbox is not None:
            x0, y0, x1, y1 = bbox
            ok &= (pt[..., 0] >= x0) & (pt[..., 0] <= x1) & (pt[..., 1] >= y0) & (pt[..., 1] <= y1)
    return ok.astype(np.int8)


def forward_backward_check(F_prev, F_curr, L_prev, L_tracked, L_det_curr, bbox_scale: float,
                           spec: PatchSpec = PatchSpec(), bbox=None,
                           t_fb_frac: float = 0.01, t_d_frac: float = 0.01) -> int:
    """SBR reliability flag for one landmark using the LK tracker backwards."""
    if not bbox_scale > 0:
        return 0
    L_tracked = np.asarray(L_tracked, np.float64)
    if not (np.all(np.isfinite(L_tracked)) and np.all(np.isfinite(L_det_curr))):
        return 0
    back = track_landmark_lk(F_curr, F_prev, L_tracked, spec)
    return int(reliability_rule(L_prev, L_tracked, back.point, L_det_curr,
                                t_fb_frac * bbox_scale, t_d_frac * bbox_scale,
                                as_channels(F_prev).shape, bbox, track_ok=back.valid))
