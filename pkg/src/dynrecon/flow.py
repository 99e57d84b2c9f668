"""Dense 2D flow fields: a block-matching reference implementation plus the
text file format used to inject externally computed (or exact synthetic) flow.

The built-in matcher is deliberately simple; callers needing production-grade
flow supply a file and the pipeline picks it up instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from dynrecon.energy import luminance


@dataclass
class FlowField:
    """Per-pixel displacement with a validity mask."""

    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if not (self.u.shape == self.v.shape == self.valid.shape):
            raise ValueError("flow component shapes differ")

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)

    def sample(self, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Displacements at (rounded) pixel positions ``(n, 2)`` as ``(x, y)``.

        Returns ``(disp, ok)``; positions outside the field or on invalid
        pixels are flagged not-ok and carry zero displacement.
        """
        p = np.rint(np.atleast_2d(np.asarray(pixels, dtype=float))).astype(int)
        h, w = self.shape
        inside = (p[:, 0] >= 0) & (p[:, 0] < w) & (p[:, 1] >= 0) & (p[:, 1] < h)
        disp = np.zeros((len(p), 2))
        ok = inside.copy()
        xi = np.clip(p[:, 0], 0, w - 1)
        yi = np.clip(p[:, 1], 0, h - 1)
        ok &= self.valid[yi, xi]
        disp[ok, 0] = self.u[yi[ok], xi[ok]]
        disp[ok, 1] = self.v[yi[ok], xi[ok]]
        return disp, ok


def compute_flow(
    img_a: np.ndarray,
    img_b: np.ndarray,
    block: int = 9,
    search: int = 10,
    min_contrast: float = 2.0,
) -> FlowField:
    """Block-matching flow from ``img_a`` to ``img_b`` minimizing SAD.

    Every displacement in the ``(2*search+1)^2`` window is scored with a
    box-averaged absolute difference.  Pixels too close to the border for a
    full search, and pixels whose block has no texture (standard deviation
    below ``min_contrast``), are marked invalid.
    """
    a = luminance(img_a)
    b = luminance(img_b)
    if a.shape != b.shape:
        raise ValueError("images must have equal dimensions")
    if block % 2 == 0 or block < 3:
        raise ValueError("block must be odd and >= 3")
    h, w = a.shape
    best = np.full((h, w), np.inf)
    best_u = np.zeros((h, w))
    best_v = np.zeros((h, w))
    pad = search
    b_pad = np.pad(b, pad, mode="constant", constant_values=np.nan)
    offsets = sorted(
        ((dv, du) for dv in range(-search, search + 1) for du in range(-search, search + 1)),
        key=lambda o: (o[0] ** 2 + o[1] ** 2, o[0], o[1]),
    )
    # smallest displacement first, so SAD ties resolve to the least motion
    for dv, du in offsets:
        shifted = b_pad[pad + dv : pad + dv + h, pad + du : pad + du + w]
        diff = np.where(np.isnan(shifted), 1e6, np.abs(a - shifted))
        score = uniform_filter(diff, size=block, mode="nearest")
        update = score < best
        best[update] = score[update]
        best_u[update] = du
        best_v[update] = dv

    mean = uniform_filter(a, size=block, mode="nearest")
    mean_sq = uniform_filter(a * a, size=block, mode="nearest")
    std = np.sqrt(np.maximum(mean_sq - mean**2, 0.0))
    valid = std >= min_contrast
    margin = search + block // 2
    if margin > 0:
        border = np.zeros((h, w), dtype=bool)
        if h > 2 * margin and w > 2 * margin:
            border[margin:-margin, margin:-margin] = True
        valid &= border
    valid &= np.isfinite(best)
    return FlowField(u=best_u, v=best_v, valid=valid)


def write_flow(field: FlowField, path) -> None:
    """Text format: header ``W H``, then W*H rows ``u v valid`` in row-major order."""
    h, w = field.shape
    with open(path, "w") as fh:
        fh.write(f"{w} {h}\n")
        flat = np.stack(
            [field.u.ravel(), field.v.ravel(), field.valid.ravel().astype(float)], axis=1
        )
        for u, v, ok in flat:
            fh.write(f"{u:.17g} {v:.17g} {int(ok)}\n")


def read_flow(path) -> FlowField:
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ValueError(f"bad flow header in {path}")
        w, h = int(header[0]), int(header[1])
        data = np.loadtxt(fh, dtype=np.float64)
    data = np.atleast_2d(data)
    if data.shape != (w * h, 3):
        raise ValueError(f"flow file {path} has {data.shape[0]} rows, expected {w * h}")
    return FlowField(
        u=data[:, 0].reshape(h, w),
        v=data[:, 1].reshape(h, w),
        valid=data[:, 2].reshape(h, w) > 0.5,
    )
