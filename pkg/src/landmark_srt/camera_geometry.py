"""Linear (DLT) triangulation, projection and their analytic Jacobians.

Cameras are 3x4 projection matrices. Triangulation stacks the two linear
constraints of every view,

    u_m = P_m[0] - x_m * P_m[2]
    v_m = P_m[1] - y_m * P_m[2]

into ``B = [u_1 .. u_M, v_1 .. v_M]^T`` and solves the 3x3 normal equations
``B3^T B3 X = -B3^T b`` where ``B3 = B[:, :3]`` and ``b = B[:, 3]``.
"""
from __future__ import annotations

import warnings

import numpy as np

# normal matrices above this condition number are treated as degenerate
MAX_CONDITION = 1e12
# |q[2]| at or below this is a point at infinity
MIN_DEPTH = 1e-12


class DegenerateGeometryError(ValueError):
    """The views do not constrain the 3D point (parallel rays, duplicates)."""


class PointAtInfinityError(ValueError):
    """The point projects to infinity (zero homogeneous depth)."""


class CheiralityWarning(UserWarning):
    """A triangulated point lies behind at least one contributing camera."""


def as_camera(P) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    if P.shape != (3, 4):
        raise ValueError(f"camera must be 3x4, got {P.shape}")
    if not np.all(np.isfinite(P)):
        raise ValueError("camera has non-finite entries")
    if abs(np.linalg.det(P[:, :3])) <= 1e-12:
        raise ValueError("camera's left 3x3 block is singular")
    return P


def _observations(cameras, points):
    cams = np.asarray(cameras, dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64)
    if cams.ndim != 3 or cams.shape[1:] != (3, 4):
        raise ValueError(f"cameras must be (M, 3, 4), got {cams.shape}")
    if pts.shape != (cams.shape[0], 2):
        raise ValueError(f"points must be ({cams.shape[0]}, 2), got {pts.shape}")
    if cams.shape[0] < 2:
        raise ValueError("triangulation needs at least 2 views")
    if not (np.all(np.isfinite(cams)) and np.all(np.isfinite(pts))):
        raise ValueError("non-finite cameras or points")
    return cams, pts


def constraint_matrix(cameras, points) -> np.ndarray:
    """The stacked ``(2M, 4)`` constraint matrix B."""
    cams, pts = _observations(cameras, points)
    u = cams[:, 0, :] - cams[:, 2, :] * pts[:, :1]
    v = cams[:, 1, :] - cams[:, 2, :] * pts[:, 1:]
    return np.concatenate([u, v], axis=0)


def _solve(B):
    B3 = B[:, :3]
    A = B3.T @ B3
    if not np.all(np.isfinite(A)) or np.linalg.cond(A) > MAX_CONDITION:
        raise DegenerateGeometryError("triangulation normal matrix is rank deficient")
    X = np.linalg.solve(A, -B3.T @ B[:, 3])
    return X, A


def _check_cheirality(cams, X):
    depth = cams[:, 2, :3] @ X + cams[:, 2, 3]
    if np.any(depth <= 0):
        warnings.warn("triangulated point is behind a camera", CheiralityWarning, stacklevel=3)


def triangulate_dlt(cameras, points) -> np.ndarray:
    """Least-squares 3D point from ``M >= 2`` views.

    ``cameras`` is ``(M, 3, 4)``, ``points`` is ``(M, 2)`` pixel coordinates.
    """
    cams, pts = _observations(cameras, points)
    X, _ = _solve(constraint_matrix(cams, pts))
    _check_cheirality(cams, X)
    return X


def project(camera, X) -> np.ndarray:
    P = np.asarray(camera, dtype=np.float64)
    q = P[:, :3] @ np.asarray(X, dtype=np.float64) + P[:, 3]
    if abs(q[2]) <= MIN_DEPTH:
        raise PointAtInfinityError("point projects to infinity")
    return q[:2] / q[2]


def project_jacobian(camera, X) -> np.ndarray:
    """``(2, 3)`` derivative of :func:`project` w.r.t. the 3D point."""
    P = np.asarray(camera, dtype=np.float64)
    q = P[:, :3] @ np.asarray(X, dtype=np.float64) + P[:, 3]
    if abs(q[2]) <= MIN_DEPTH:
        raise PointAtInfinityError("point projects to infinity")
    return (P[:2, :3] * q[2] - np.outer(q[:2], P[2, :3])) / q[2] ** 2


def triangulation_jacobian(cameras, points) -> np.ndarray:
    """``(M, 3, 2)`` derivatives of the triangulated point w.r.t. each view's 2D point.

    Differentiates the normal equations ``B3^T (B3 X + b) = 0``: moving ``x_m``
    changes only row ``m`` of B (by ``-P_m[2]``) and moving ``y_m`` only row
    ``M + m``, so for the affected row ``i`` with change ``d``

        dX = -A^-1 (d[:3] * r_i + B3[i] * (d . [X, 1]))

    where ``r = B3 X + b`` is the algebraic residual.
    """
    cams, pts = _observations(cameras, points)
    M = cams.shape[0]
    B = constraint_matrix(cams, pts)
    X, A = _solve(B)
    Xh = np.append(X, 1.0)
    r = B @ Xh
    B3 = B[:, :3]
    Ainv = np.linalg.inv(A)
    jac = np.empty((M, 3, 2))
    for m in range(M):
        d = -cams[m, 2, :]
        dXh = d @ Xh
        for c, row in enumerate((m, M + m)):
            jac[m, :, c] = -Ainv @ (d[:3] * r[row] + B3[row] * dXh)
    return jac


def reproject_all(cameras, points) -> np.ndarray:
    """Triangulate, then project the 3D point back into each view: ``(M, 2)``."""
    cams = np.asarray(cameras, dtype=np.float64)
    X = triangulate_dlt(cams, points)
    return np.stack([project(P, X) for P in cams])


def reprojection_jacobian(cameras, points):
    """Reprojections and their derivatives.

    Returns ``(reproj, jac)`` with ``reproj`` of shape ``(M, 2)`` and ``jac``
    of shape ``(M, 2, M, 2)``: ``jac[i, :, j, :]`` is d reproj_i / d point_j.
    """
    cams, pts = _observations(cameras, points)
    X = triangulate_dlt(cams, pts)
    dX = triangulation_jacobian(cams, pts)
    reproj = np.stack([project(P, X) for P in cams])
    dproj = np.stack([project_jacobian(P, X) for P in cams])
    jac = np.einsum("iab,jbc->iajc", dproj, dX)
    return reproj, jac


def format_camera(P) -> str:
    """One manifest line: the 12 entries of P, row-major, 17 significant digits."""
    P = np.asarray(P, dtype=np.float64).reshape(-1)
    return " ".join(format(float(v), ".17g") for v in P)


def parse_camera(line: str) -> np.ndarray:
    vals = np.array(line.split(), dtype=np.float64)
    if vals.size != 12:
        raise ValueError(f"camera line has {vals.size} values, expected 12")
    return vals.reshape(3, 4)


def look_at_camera(position, target=(0.0, 0.0, 0.0), focal: float = 500.0,
                   principal=(320.0, 240.0), up=(0.0, -1.0, 0.0)) -> np.ndarray:
    """Pinhole camera at ``position`` looking at ``target`` (image y points down)."""
    c = np.asarray(position, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - c
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    K = np.array([[focal, 0.0, principal[0]], [0.0, focal, principal[1]], [0.0, 0.0, 1.0]])
    return K @ np.hstack([R, (-R @ c)[:, None]])
