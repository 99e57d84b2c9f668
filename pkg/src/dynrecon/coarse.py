"""Initial coarse per-object reconstruction: the triangle-interpolated inner
region, the extrapolated outer band, and the per-pixel two-tier candidate
depth sets with tolerance volumes sized from the capture volume.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from dynrecon.geometry import (
    CameraView,
    TrianglePair,
    affine_dlt,
    barycentric,
    fundamental_matrix,
    project_many,
    triangulate_midpoint,
)

OUTSIDE, OUTER, INNER = 0, 1, 2

EPIPOLAR_TOLERANCE_PX = 2.0
MIN_RAY_ANGLE_DEG = 0.1


class CoarseInitError(ValueError):
    """Coarse initialization failed (no usable region)."""


@dataclass
class RegionMask:
    """Per-pixel region classification for one view and one object."""

    codes: np.ndarray  # uint8: 0 outside, 1 outer band, 2 inner

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.uint8)

    @property
    def inner(self) -> np.ndarray:
        return self.codes == INNER

    @property
    def outer(self) -> np.ndarray:
        return self.codes == OUTER

    @property
    def region(self) -> np.ndarray:
        return self.codes != OUTSIDE

    @classmethod
    def empty(cls, shape: tuple[int, int]) -> "RegionMask":
        return cls(codes=np.zeros(shape, dtype=np.uint8))


@dataclass(frozen=True)
class CaptureVolume:
    """Axis-aligned bounding box of the cleaned sparse cloud."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=np.float64).reshape(3))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=np.float64).reshape(3))
        if np.any(self.hi < self.lo):
            raise ValueError("invalid bounding box")

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))

    @classmethod
    def from_points(cls, points: np.ndarray) -> "CaptureVolume":
        pts = np.asarray(points, dtype=np.float64)
        if len(pts) == 0:
            raise ValueError("no points")
        vol = cls(lo=pts.min(axis=0), hi=pts.max(axis=0))
        if vol.diagonal <= 0:
            raise ValueError("capture volume has zero diagonal")
        return vol


@dataclass
class CoarseRegion:
    """Region mask plus the per-pixel initial surface depth (NaN outside)."""

    mask: RegionMask
    depth: np.ndarray
    rejected_epipolar: int = 0
    rejected_parallel: int = 0
    outer_radius: float = 0.0


def _rasterize_triangle(tri: np.ndarray, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Integer pixels covered by a (3, 2) triangle; returns (pixels, bary)."""
    h, w = shape
    lo = np.clip(np.floor(tri.min(axis=0)).astype(int), 0, [w - 1, h - 1])
    hi = np.clip(np.ceil(tri.max(axis=0)).astype(int), 0, [w - 1, h - 1])
    xs = np.arange(lo[0], hi[0] + 1)
    ys = np.arange(lo[1], hi[1] + 1)
    if len(xs) == 0 or len(ys) == 0:
        return np.empty((0, 2), dtype=int), np.empty((0, 3))
    gx, gy = np.meshgrid(xs, ys)
    pixels = np.stack([gx.ravel(), gy.ravel()], axis=1)
    bary = barycentric(tri, pixels.astype(float))
    inside = (bary >= -1e-9).all(axis=1)
    return pixels[inside], bary[inside]


def build_inner_region(
    ref_view: CameraView,
    aux_view: CameraView,
    pairs: list[TrianglePair],
    epipolar_tol: float = EPIPOLAR_TOLERANCE_PX,
    min_ray_angle_deg: float = MIN_RAY_ANGLE_DEG,
) -> CoarseRegion:
    """Rasterize the propagated triangles and triangulate a depth per pixel.

    Every pixel inside a kept triangle is displaced into the second view by
    the pair's affine map and triangulated against its own ray (midpoint of
    closest approach).  Pixels whose displaced match strays from the epipolar
    line by more than ``epipolar_tol`` px, or whose rays are near parallel,
    stay outside.
    """
    shape = (ref_view.height, ref_view.width)
    depth = np.full(shape, np.nan)
    codes = np.zeros(shape, dtype=np.uint8)
    ref_px, aux_px = [], []
    for pair in pairs:
        mapping = affine_dlt(pair)
        pixels, _ = _rasterize_triangle(pair.src, shape)
        if len(pixels) == 0:
            continue
        fresh = codes[pixels[:, 1], pixels[:, 0]] != INNER
        pixels = pixels[fresh]
        if len(pixels) == 0:
            continue
        codes[pixels[:, 1], pixels[:, 0]] = INNER
        ref_px.append(pixels.astype(float))
        aux_px.append(mapping.apply(pixels.astype(float)))
    if not ref_px:
        raise CoarseInitError("no triangle rasterized to any pixel")
    ref_px = np.concatenate(ref_px)
    aux_px = np.concatenate(aux_px)

    F = fundamental_matrix(ref_view, aux_view)
    ones = np.ones((len(ref_px), 1))
    lines = np.concatenate([ref_px, ones], axis=1) @ F.T
    norms = np.hypot(lines[:, 0], lines[:, 1])
    residual = np.abs(np.einsum("ij,ij->i", np.concatenate([aux_px, ones], axis=1), lines))
    with np.errstate(divide="ignore", invalid="ignore"):
        epi_dist = np.where(norms > 0, residual / norms, np.inf)
    epi_ok = epi_dist <= epipolar_tol

    points, angles = triangulate_midpoint(ref_view, ref_px, aux_view, aux_px)
    angle_ok = angles >= min_ray_angle_deg
    depths = (points @ ref_view.R.T + ref_view.t)[:, 2]
    depth_ok = depths > 0

    keep = epi_ok & angle_ok & depth_ok
    xi = ref_px[:, 0].astype(int)
    yi = ref_px[:, 1].astype(int)
    codes[yi[~keep], xi[~keep]] = OUTSIDE
    depth[yi[keep], xi[keep]] = depths[keep]
    if not keep.any():
        raise CoarseInitError("all inner pixels rejected by consistency gates")
    return CoarseRegion(
        mask=RegionMask(codes),
        depth=depth,
        rejected_epipolar=int((~epi_ok).sum()),
        rejected_parallel=int((epi_ok & ~angle_ok).sum()),
    )


def boundary_pixels(inner: np.ndarray) -> np.ndarray:
    """Inner pixels with a 4-neighbor outside the region (or on the border)."""
    eroded = ndimage.binary_erosion(inner, structure=np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]]))
    ys, xs = np.nonzero(inner & ~eroded)
    return np.stack([xs, ys], axis=1)


def extrapolation_radius(inner: np.ndarray, percent: float = 5.0) -> float:
    """Band radius: ``percent`` of the mean boundary-to-centroid distance."""
    ys, xs = np.nonzero(inner)
    if len(xs) == 0:
        raise CoarseInitError("inner region is empty")
    centroid = np.array([xs.mean(), ys.mean()])
    boundary = boundary_pixels(inner)
    dists = np.linalg.norm(boundary - centroid, axis=1)
    return float(percent / 100.0 * dists.mean())


def extrapolate_outer(region: CoarseRegion, percent: float = 5.0) -> CoarseRegion:
    """Grow the outer band around the inner region.

    The band reaches ``percent`` of the mean distance between the inner
    boundary pixels and the region centroid; band pixels take the depth of
    their nearest inner pixel.
    """
    inner = region.mask.inner
    radius = extrapolation_radius(inner, percent)
    codes = np.where(inner, INNER, OUTSIDE).astype(np.uint8)
    depth = np.where(inner, region.depth, np.nan)
    if radius > 0:
        dist, (iy, ix) = ndimage.distance_transform_edt(~inner, return_indices=True)
        band = (dist > 0) & (dist <= radius)
        codes[band] = OUTER
        depth[band] = region.depth[iy[band], ix[band]]
    return CoarseRegion(
        mask=RegionMask(codes),
        depth=depth,
        rejected_epipolar=region.rejected_epipolar,
        rejected_parallel=region.rejected_parallel,
        outer_radius=radius,
    )


@dataclass
class DepthLabelSet:
    """Per-pixel candidate depths for the labeling problem.

    ``depths`` is ``(n, labels_outer)`` NaN-padded; inner pixels use the
    first ``labels_inner`` columns.  ``coords`` holds the region pixels as
    ``(x, y)``.  ``step_inner`` is the depth sampling step whose multiple
    defines the smoothness truncation distance.
    """

    coords: np.ndarray
    region: np.ndarray
    center: np.ndarray
    tolerance: np.ndarray
    counts: np.ndarray
    depths: np.ndarray
    labels_inner: int
    labels_outer: int
    step_inner: float
    step_outer: float
    n_clamped: int = 0
    n_dropped: int = 0

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def n_labels(self) -> int:
        """Label count including the unknown label."""
        return self.labels_outer + 1

    def depth_values(self) -> np.ndarray:
        """Candidate matrix with the NaN unknown column appended."""
        col = np.full((len(self), 1), np.nan)
        return np.concatenate([self.depths, col], axis=1)

    def admissible(self) -> np.ndarray:
        adm = ~np.isnan(self.depth_values())
        adm[:, -1] = True
        return adm


def build_depth_labels(
    region: CoarseRegion,
    capture: CaptureVolume,
    labels_inner: int,
    labels_outer: int,
    volume_percent_outer: float = 1.0,
) -> DepthLabelSet:
    """Sample the candidate depth sets around the coarse surface.

    The depth tolerance is ``volume_percent_outer`` percent of the capture
    volume diagonal for outer pixels and half that for inner pixels; inner
    pixels carry fewer candidates than outer ones.  Pixels with non-positive
    center depth are dropped to outside (counted).
    """
    if labels_inner >= labels_outer:
        raise ValueError("labels_inner must be smaller than labels_outer")
    if labels_inner < 2:
        raise ValueError("need at least 2 inner labels")
    tol_outer = volume_percent_outer / 100.0 * capture.diagonal
    tol_inner = 0.5 * tol_outer
    codes = region.mask.codes
    ys, xs = np.nonzero(codes != OUTSIDE)
    center = region.depth[ys, xs]
    keep = np.isfinite(center) & (center > 0)
    n_dropped = int((~keep).sum())
    ys, xs, center = ys[keep], xs[keep], center[keep]
    if len(xs) == 0:
        raise CoarseInitError("no usable region pixel with positive depth")
    reg = codes[ys, xs]
    is_inner = reg == INNER
    tol = np.where(is_inner, tol_inner, tol_outer)
    counts = np.where(is_inner, labels_inner, labels_outer)

    lo = center - tol
    hi = center + tol
    clamped = lo <= 0
    lo = np.where(clamped, 1e-6 * hi, lo)
    steps = (hi - lo) / (counts - 1)
    depths = np.full((len(xs), labels_outer), np.nan)
    idx = np.arange(labels_outer)[None, :]
    values = lo[:, None] + idx * steps[:, None]
    depths[idx < counts[:, None]] = values[idx < counts[:, None]]

    return DepthLabelSet(
        coords=np.stack([xs, ys], axis=1),
        region=reg,
        center=center,
        tolerance=tol,
        counts=counts,
        depths=depths,
        labels_inner=labels_inner,
        labels_outer=labels_outer,
        step_inner=2.0 * tol_inner / (labels_inner - 1),
        step_outer=2.0 * tol_outer / (labels_outer - 1),
        n_clamped=int(clamped.sum()),
        n_dropped=n_dropped,
    )


def transfer_coarse(
    src_view: CameraView,
    region: CoarseRegion,
    tol_inner: float,
    tol_outer: float,
    dst_view: CameraView,
    extrap_percent: float = 5.0,
) -> CoarseRegion:
    """Carry a coarse reconstruction from its source view into another view.

    The tolerance slab (front, center and back layer of every region pixel)
    is splatted into the destination view with a z-buffer, small holes are
    closed, and the outer band is regrown there with the same extrapolation
    rule.  Raises :class:`CoarseInitError` when nothing lands inside the
    destination image.
    """
    codes = region.mask.codes
    ys, xs = np.nonzero(codes != OUTSIDE)
    center = region.depth[ys, xs]
    ok = np.isfinite(center) & (center > 0)
    ys, xs, center = ys[ok], xs[ok], center[ok]
    if len(xs) == 0:
        raise CoarseInitError("source region is empty")
    reg = codes[ys, xs]
    tol = np.where(reg == INNER, tol_inner, tol_outer)

    pix = np.stack([xs, ys], axis=1).astype(float)
    ones = np.ones((len(pix), 1))
    rays = np.concatenate([pix, ones], axis=1) @ src_view.K_inv.T
    rays = rays / rays[:, 2:3]  # unit camera-frame z so the scale is the depth
    layers, tags = [], []
    for offset in (-1.0, 0.0, 1.0):
        d = np.maximum(center + offset * tol, 1e-9)
        cam_pts = rays * d[:, None]
        layers.append((cam_pts - src_view.t) @ src_view.R)
        tags.append(reg)
    points = np.concatenate(layers)
    tags = np.concatenate(tags)

    pixels, depths = project_many(dst_view, points)
    h, w = dst_view.height, dst_view.width
    xi = np.rint(pixels[:, 0]).astype(int)
    yi = np.rint(pixels[:, 1]).astype(int)
    ok = (depths > 0) & (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    if not ok.any():
        raise CoarseInitError("coarse volume projects outside the destination view")
    flat = yi[ok] * w + xi[ok]
    zbuf = np.full(h * w, np.inf)
    np.minimum.at(zbuf, flat, depths[ok])
    tag_img = np.zeros(h * w, dtype=np.uint8)
    np.maximum.at(tag_img, flat, tags[ok])
    zbuf = zbuf.reshape(h, w)
    tag_img = tag_img.reshape(h, w)
    occupied = np.isfinite(zbuf)

    filled = ndimage.binary_closing(
        ndimage.binary_dilation(occupied, iterations=1), structure=np.ones((3, 3)), iterations=2
    )
    filled |= occupied
    dist, (ny, nx) = ndimage.distance_transform_edt(~occupied, return_indices=True)
    depth_full = np.where(occupied, zbuf, zbuf[ny, nx])
    tag_full = np.where(occupied, tag_img, tag_img[ny, nx])

    inner = filled & (tag_full == INNER)
    if not inner.any():
        raise CoarseInitError("no inner pixel after transfer")
    codes_dst = np.where(inner, INNER, OUTSIDE).astype(np.uint8)
    depth_dst = np.where(inner, depth_full, np.nan)
    transferred = CoarseRegion(mask=RegionMask(codes_dst), depth=depth_dst)
    grown = extrapolate_outer(transferred, extrap_percent)

    # splatted outer pixels beyond the regrown band keep their own depth
    extra = filled & (tag_full == OUTER) & ~grown.mask.region
    grown.mask.codes[extra] = OUTER
    grown.depth[extra] = depth_full[extra]
    return grown
