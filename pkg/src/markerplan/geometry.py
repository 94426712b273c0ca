"""Low-level geometric primitives shared across the package.

Conventions used everywhere:

* The world frame is right-handed with z up; cameras and markers live on the
  horizontal plane z = eye_height.
* A camera looks along the +x axis of its body frame (+z up), so a planar
  camera with yaw ``t`` has rotation ``rot_z(t)``.
* Pose tangent vectors are ordered (rotation-vector, translation); rotations
  perturb on the right (``R @ exp_so3(w)``), translations additively in the
  world frame.
"""

from __future__ import annotations

import math
from typing import List, Optional, Sequence, Tuple

import numpy as np

_EPS = 1e-12


def wrap_angle(a: float) -> float:
    """Wrap an angle to the interval (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


def rot_z(yaw: float) -> np.ndarray:
    """Rotation matrix about the world z axis."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def hat(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that hat(w) @ v == np.cross(w, v)."""
    return np.array(
        [
            [0.0, -w[2], w[1]],
            [w[2], 0.0, -w[0]],
            [-w[1], w[0], 0.0],
        ]
    )


def exp_so3(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula mapping a rotation vector to a rotation matrix."""
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    K = hat(w)
    if theta < 1e-8:
        # Second-order series keeps the result orthonormal to machine precision.
        return np.eye(3) + K + 0.5 * (K @ K)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def log_so3(R: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix (inverse of :func:`exp_so3`)."""
    trace = float(np.trace(R))
    cos_theta = max(-1.0, min(1.0, 0.5 * (trace - 1.0)))
    theta = math.acos(cos_theta)
    if theta < 1e-8:
        return 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta > math.pi - 1e-6:
        # Near pi the off-diagonal formula degrades; fall back to the outer
        # product form, fixing signs from the largest diagonal element.
        A = 0.5 * (R + np.eye(3))
        axis = np.sqrt(np.maximum(np.diag(A), 0.0))
        k = int(np.argmax(axis))
        if axis[k] < _EPS:
            return np.zeros(3)
        axis = A[:, k] / axis[k]
        axis = axis / np.linalg.norm(axis)
        # Resolve the overall sign with the skew part (can vanish exactly at pi).
        skew = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        if np.dot(skew, axis) < 0.0:
            axis = -axis
        return theta * axis
    factor = theta / (2.0 * math.sin(theta))
    return factor * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])


def unit(v: np.ndarray) -> np.ndarray:
    """Normalize a vector, raising on near-zero input."""
    n = float(np.linalg.norm(v))
    if n < _EPS:
        raise ValueError("cannot normalize a near-zero vector")
    return np.asarray(v, dtype=float) / n


def rot90_ccw(v: np.ndarray) -> np.ndarray:
    """Rotate a 2D vector by +90 degrees."""
    return np.array([-v[1], v[0]])


# ---------------------------------------------------------------------------
# 2D polyline / segment helpers
# ---------------------------------------------------------------------------


def close_polyline(points: np.ndarray) -> np.ndarray:
    """Return a copy of the polyline with an explicit closing vertex."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
        raise ValueError("polyline must be an (n, 2) array with n >= 3")
    if not np.allclose(pts[0], pts[-1], atol=1e-12):
        pts = np.vstack([pts, pts[0]])
    return pts


def polyline_segments(points: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Consecutive (a, b) segment endpoints of a closed polyline."""
    pts = close_polyline(points)
    return [(pts[i], pts[i + 1]) for i in range(len(pts) - 1)]


def point_in_free_space(point: Sequence[float], walls: Sequence[np.ndarray]) -> bool:
    """Even-odd test of a point against the union of closed wall polylines.

    Free space is the set of points with odd crossing parity, which handles an
    outer boundary with interior obstacle loops without labelling which is
    which.
    """
    px, py = float(point[0]), float(point[1])
    inside = False
    for poly in walls:
        pts = close_polyline(poly)
        x = pts[:, 0]
        y = pts[:, 1]
        for i in range(len(pts) - 1):
            x1, y1, x2, y2 = x[i], y[i], x[i + 1], y[i + 1]
            if (y1 > py) != (y2 > py):
                x_cross = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
                if px < x_cross:
                    inside = not inside
    return inside


def segment_intersection_params(
    p0: np.ndarray, p1: np.ndarray, a: np.ndarray, b: np.ndarray
) -> Optional[Tuple[float, float]]:
    """Parameters (t, u) where p0 + t*(p1-p0) == a + u*(b-a), or None if parallel."""
    r = np.asarray(p1, dtype=float) - np.asarray(p0, dtype=float)
    s = np.asarray(b, dtype=float) - np.asarray(a, dtype=float)
    denom = r[0] * s[1] - r[1] * s[0]
    if abs(denom) < _EPS:
        return None
    d = np.asarray(a, dtype=float) - np.asarray(p0, dtype=float)
    t = (d[0] * s[1] - d[1] * s[0]) / denom
    u = (d[0] * r[1] - d[1] * r[0]) / denom
    return float(t), float(u)


def segment_hits_open_rect(
    a: Sequence[float],
    b: Sequence[float],
    lo: Sequence[float],
    hi: Sequence[float],
    shrink: float = 1e-9,
) -> bool:
    """Whether segment a-b intersects the open interior of an axis-aligned rect.

    The rectangle is shrunk by ``shrink`` on every side so that segments lying
    exactly on a cell edge do not count as crossing either neighbour.
    """
    x0, y0 = float(lo[0]) + shrink, float(lo[1]) + shrink
    x1, y1 = float(hi[0]) - shrink, float(hi[1]) - shrink
    if x0 >= x1 or y0 >= y1:
        return False
    ax, ay = float(a[0]), float(a[1])
    bx, by = float(b[0]), float(b[1])
    # Liang-Barsky clipping.
    t0, t1 = 0.0, 1.0
    dx, dy = bx - ax, by - ay
    for p, q in (
        (-dx, ax - x0),
        (dx, x1 - ax),
        (-dy, ay - y0),
        (dy, y1 - ay),
    ):
        if abs(p) < _EPS:
            if q < 0.0:
                return False
            continue
        r = q / p
        if p < 0.0:
            if r > t1:
                return False
            t0 = max(t0, r)
        else:
            if r < t0:
                return False
            t1 = min(t1, r)
    return t0 < t1
