"""Pinhole camera math, ray sampling, Delaunay triangulation and affine maps.

Everything here is a pure function over immutable inputs; safe to call from
multiple threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import Delaunay as _Delaunay
from scipy.spatial import QhullError


class GeometryError(ValueError):
    """Degenerate geometric input (collinear points, singular triangle, ...)."""


class BehindCameraError(GeometryError):
    """A point at non-positive depth was projected or backprojected."""


@dataclass(frozen=True)
class CameraView:
    """Calibrated pinhole camera for one view at one frame.

    ``K`` is the 3x3 intrinsic matrix in pixels, ``R``/``t`` map world points
    into the camera frame (``x_cam = R @ X + t``).  Depth of a point is its
    z-coordinate in the camera frame.
    """

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.K, dtype=float).reshape(3, 3)
        R = np.asarray(self.R, dtype=float).reshape(3, 3)
        t = np.asarray(self.t, dtype=float).reshape(3)
        if np.any(np.abs(np.tril(K, -1)) > 1e-12):
            raise ValueError("intrinsic matrix must be upper triangular")
        if np.any(np.diag(K) <= 0):
            raise ValueError("intrinsic diagonal must be positive")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9):
            raise ValueError("rotation must be orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must have determinant +1")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    @property
    def K_inv(self) -> np.ndarray:
        return np.linalg.inv(self.K)

    def contains(self, pixels: np.ndarray) -> np.ndarray:
        """Boolean mask of pixels inside the image bounds."""
        p = np.atleast_2d(np.asarray(pixels, dtype=float))
        return (
            (p[:, 0] >= 0.0)
            & (p[:, 0] <= self.width - 1)
            & (p[:, 1] >= 0.0)
            & (p[:, 1] <= self.height - 1)
        )


def project(cam: CameraView, point) -> tuple[np.ndarray, float]:
    """Project a 3D world point; returns ``(pixel, depth)``.

    Raises :class:`BehindCameraError` when the point has non-positive depth.
    """
    x = cam.R @ np.asarray(point, dtype=float) + cam.t
    depth = x[2]
    if depth <= 0:
        raise BehindCameraError(f"point at depth {depth} is behind the camera")
    uvw = cam.K @ x
    return uvw[:2] / uvw[2], float(depth)


def project_many(cam: CameraView, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of ``(..., 3)`` points.

    Returns ``(pixels, depths)`` with no validity filtering; callers must mask
    out non-positive depths themselves.
    """
    pts = np.asarray(points, dtype=float)
    x = pts @ cam.R.T + cam.t
    uvw = x @ cam.K.T
    with np.errstate(divide="ignore", invalid="ignore"):
        pixels = uvw[..., :2] / uvw[..., 2:3]
    return pixels, x[..., 2]


def backproject(cam: CameraView, pixel, depth: float) -> np.ndarray:
    """3D world point on the optical ray of ``pixel`` at camera depth ``depth``."""
    if depth <= 0:
        raise BehindCameraError(f"cannot backproject to depth {depth}")
    u, v = np.asarray(pixel, dtype=float)
    ray = cam.K_inv @ np.array([u, v, 1.0])
    x = ray * (depth / ray[2])
    return cam.R.T @ (x - cam.t)


def backproject_many(cam: CameraView, pixels: np.ndarray, depths: np.ndarray) -> np.ndarray:
    """Vectorized backprojection; ``pixels`` is ``(..., 2)``, ``depths`` broadcasts."""
    px = np.asarray(pixels, dtype=float)
    d = np.asarray(depths, dtype=float)
    ones = np.ones(px.shape[:-1] + (1,))
    rays = np.concatenate([px, ones], axis=-1) @ cam.K_inv.T
    x = rays * (d / rays[..., 2])[..., None]
    return (x - cam.t) @ cam.R


_CLAMP_FRACTION = 1e-6


@dataclass(frozen=True)
class DepthSamples:
    """Uniform candidate depths along one optical ray."""

    depths: np.ndarray
    step: float
    clamped: bool


def sample_ray(cam: CameraView, pixel, center_depth: float, tolerance: float, n_labels: int) -> DepthSamples:
    """Sample ``n_labels`` candidate depths spanning ``center_depth +- tolerance``.

    When the lower end would be non-positive it is clamped to a small positive
    epsilon and the result is flagged; spacing stays uniform over the clamped
    span.  The recorded ``step`` is the depth sampling step used downstream for
    the smoothness truncation distance.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    if n_labels < 2:
        raise ValueError("need at least two depth labels")
    lo = center_depth - tolerance
    hi = center_depth + tolerance
    clamped = False
    if lo <= 0:
        lo = _CLAMP_FRACTION * hi
        clamped = True
    depths = np.linspace(lo, hi, n_labels)
    return DepthSamples(depths=depths, step=(hi - lo) / (n_labels - 1), clamped=clamped)


def _triangle_area(pts: np.ndarray) -> float:
    a, b, c = np.asarray(pts, dtype=float)
    return 0.5 * abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))


def delaunay(points: np.ndarray) -> np.ndarray:
    """Delaunay triangulation of 2D points; returns ``(n_tri, 3)`` index triples.

    Triangles satisfy the empty-circumcircle property.  Output rows are
    canonicalized (sorted indices, lexicographic row order) so results are
    deterministic for a fixed input order.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must be (n, 2)")
    if len(pts) < 3:
        raise GeometryError("need at least 3 points to triangulate")
    centered = pts - pts.mean(axis=0)
    # rank test catches exactly-collinear input before Qhull does
    if np.linalg.matrix_rank(centered, tol=1e-12 * max(1.0, np.abs(centered).max())) < 2:
        raise GeometryError("points are collinear")
    try:
        tri = _Delaunay(pts)
    except QhullError as exc:
        raise GeometryError(f"triangulation failed: {exc}") from exc
    simplices = np.sort(tri.simplices, axis=1)
    order = np.lexsort((simplices[:, 2], simplices[:, 1], simplices[:, 0]))
    return simplices[order]


def triangle_edge_lengths(points: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Edge lengths of each triangle; shape ``(n_tri, 3)``."""
    pts = np.asarray(points, dtype=float)
    tri = np.asarray(triangles, dtype=int)
    a, b, c = pts[tri[:, 0]], pts[tri[:, 1]], pts[tri[:, 2]]
    return np.stack(
        [
            np.linalg.norm(a - b, axis=1),
            np.linalg.norm(b - c, axis=1),
            np.linalg.norm(c - a, axis=1),
        ],
        axis=1,
    )


def filter_median_edge(points: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Drop triangles with any edge longer than the median over all edges.

    The median is taken over the full 3-per-triangle edge multiset; triangles
    whose longest edge equals the median are kept.
    """
    tri = np.asarray(triangles, dtype=int)
    if len(tri) == 0:
        raise ValueError("need at least one triangle")
    lengths = triangle_edge_lengths(points, tri)
    median = np.median(lengths.ravel())
    # relative slack so congruent edges differing only in round-off survive
    return tri[lengths.max(axis=1) <= median * (1.0 + 1e-9)]


@dataclass(frozen=True)
class TrianglePair:
    """Corresponding triangles in two views; vertices index the same sparse points."""

    src: np.ndarray  # (3, 2)
    dst: np.ndarray  # (3, 2)

    def __post_init__(self):
        src = np.asarray(self.src, dtype=float).reshape(3, 2)
        dst = np.asarray(self.dst, dtype=float).reshape(3, 2)
        object.__setattr__(self, "src", src)
        object.__setattr__(self, "dst", dst)


@dataclass(frozen=True)
class AffineMap:
    """2x3 affine pixel map ``p -> A @ [p, 1]``."""

    matrix: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "matrix", np.asarray(self.matrix, dtype=float).reshape(2, 3))

    def apply(self, pixels: np.ndarray) -> np.ndarray:
        p = np.asarray(pixels, dtype=float)
        squeeze = p.ndim == 1
        p = np.atleast_2d(p)
        out = p @ self.matrix[:, :2].T + self.matrix[:, 2]
        return out[0] if squeeze else out


def affine_dlt(pair: TrianglePair) -> AffineMap:
    """Exact affine map through three point correspondences (direct linear transform).

    Three correspondences determine all six degrees of freedom, so the
    returned map interpolates the vertices exactly.
    """
    src, dst = pair.src, pair.dst
    area = _triangle_area(src)
    scale = max(1.0, float(np.abs(src).max()) ** 2)
    if area <= 1e-12 * scale:
        raise GeometryError("source triangle is degenerate")
    A = np.zeros((6, 6))
    b = np.zeros(6)
    for i in range(3):
        x, y = src[i]
        A[2 * i, 0:3] = [x, y, 1.0]
        A[2 * i + 1, 3:6] = [x, y, 1.0]
        b[2 * i : 2 * i + 2] = dst[i]
    try:
        params = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise GeometryError("affine system is singular") from exc
    return AffineMap(params.reshape(2, 3))


def barycentric(tri: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of pixels w.r.t. a (3, 2) triangle."""
    a, b, c = np.asarray(tri, dtype=float)
    p = np.atleast_2d(np.asarray(pixels, dtype=float))
    v0, v1 = b - a, c - a
    v2 = p - a
    den = v0[0] * v1[1] - v1[0] * v0[1]
    if abs(den) < 1e-15:
        raise GeometryError("degenerate triangle in barycentric computation")
    w1 = (v2[:, 0] * v1[1] - v1[0] * v2[:, 1]) / den
    w2 = (v0[0] * v2[:, 1] - v2[:, 0] * v0[1]) / den
    return np.stack([1.0 - w1 - w2, w1, w2], axis=1)


def interpolate_displacement(pair: TrianglePair, pixel) -> np.ndarray:
    """Displacement of a pixel inside the source triangle under the pair's affine map."""
    bary = barycentric(pair.src, pixel)[0]
    if np.any(bary < -1e-9):
        raise GeometryError("pixel lies outside the source triangle")
    mapping = affine_dlt(pair)
    p = np.asarray(pixel, dtype=float)
    return mapping.apply(p) - p


def fundamental_matrix(cam_a: CameraView, cam_b: CameraView) -> np.ndarray:
    """Fundamental matrix mapping pixels of ``cam_a`` to epipolar lines in ``cam_b``."""
    R_rel = cam_b.R @ cam_a.R.T
    t_rel = cam_b.t - R_rel @ cam_a.t
    tx = np.array(
        [
            [0.0, -t_rel[2], t_rel[1]],
            [t_rel[2], 0.0, -t_rel[0]],
            [-t_rel[1], t_rel[0], 0.0],
        ]
    )
    return np.linalg.inv(cam_b.K).T @ tx @ R_rel @ cam_a.K_inv


def triangulate_midpoint(
    cam_a: CameraView,
    pixels_a: np.ndarray,
    cam_b: CameraView,
    pixels_b: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Midpoint-of-closest-approach triangulation for pixel correspondences.

    Returns ``(points, angles_deg)`` where ``angles_deg`` is the ray crossing
    angle; near-parallel rays produce unreliable points, so callers gate on
    the angle.
    """
    pa = np.atleast_2d(np.asarray(pixels_a, dtype=float))
    pb = np.atleast_2d(np.asarray(pixels_b, dtype=float))
    oa, ob = cam_a.center, cam_b.center

    def _dirs(cam, px):
        ones = np.ones((len(px), 1))
        d = np.concatenate([px, ones], axis=1) @ cam.K_inv.T @ cam.R
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    da, db = _dirs(cam_a, pa), _dirs(cam_b, pb)
    # closest points on the two skew lines oa + s*da, ob + u*db
    w0 = oa - ob
    b_dot = np.einsum("ij,ij->i", da, db)
    d_a = da @ w0
    d_b = db @ w0
    den = 1.0 - b_dot**2
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (b_dot * d_b - d_a) / den
        u = (d_b - b_dot * d_a) / den
    points = 0.5 * ((oa + s[:, None] * da) + (ob + u[:, None] * db))
    angles = np.degrees(np.arccos(np.clip(np.abs(b_dot), 0.0, 1.0)))
    return points, angles
