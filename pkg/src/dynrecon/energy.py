"""The three-term labeling energy: photo-consistency data term, contrast term
and truncated-distance smoothness term, plus the machinery to assemble them
into a solvable MRF.

Depth labels are real depths in world units; the special unknown label is
represented by NaN (:data:`UNKNOWN_DEPTH`).  Assigning the unknown label is
what performs segmentation: pixels the photo-consistency evidence cannot
support fall to unknown and are excluded from the foreground mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from dynrecon.geometry import CameraView, backproject_many, project_many
from dynrecon.graphcut import MrfProblem

UNKNOWN_DEPTH = float("nan")

# image-space neighborhood used for pairwise terms (and its interaction pairs)
FOUR_CONNECTED = ((0, 1), (1, 0), (0, -1), (-1, 0))


def is_unknown(depth) -> np.ndarray | bool:
    """True where a depth value is the unknown label."""
    return np.isnan(depth)


@dataclass(frozen=True)
class EnergyParams:
    """Weights and constants of the labeling energy.

    ``d_max`` is the smoothness truncation distance in world units; pipelines
    set it to ``d_max_steps`` times the inner-region depth sampling step.
    ``m_unknown`` is the fixed data cost of labeling a pixel unknown; since
    the data term sums ``1 - m`` over ``k_views`` auxiliary views (each in
    [0, 2]), the default is the mapped-cost midpoint 0.6 per view times the
    default two views.
    """

    lambda_data: float = 0.5
    lambda_contrast: float = 1.0
    lambda_smooth: float = 0.005
    sigma_i: float = 0.3
    epsilon: float = 1.0
    d_max: float = 1.0
    m_unknown: float = 1.2
    ncc_window: int = 15
    k_views: int = 2

    def __post_init__(self):
        for name in ("lambda_data", "lambda_contrast", "lambda_smooth"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.sigma_i <= 0:
            raise ValueError("sigma_i must be positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.d_max <= 0:
            raise ValueError("d_max must be positive")
        if self.m_unknown < 0:
            raise ValueError("m_unknown must be non-negative")
        if self.ncc_window < 3 or self.ncc_window % 2 == 0:
            raise ValueError("ncc_window must be odd and >= 3")
        if self.k_views < 1:
            raise ValueError("k_views must be >= 1")


def luminance(image: np.ndarray) -> np.ndarray:
    """Rec. 601 luminance of an RGB image (grayscale passes through)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


_VAR_EPS = 1e-12


def ncc(ref_patch: np.ndarray, aux_patch: np.ndarray) -> float:
    """Zero-mean normalized cross-correlation of two equally sized patches.

    Returns NaN when either patch has zero variance (undefined correlation);
    callers map that to the neutral matched cost 1.0.
    """
    a = np.asarray(ref_patch, dtype=np.float64).ravel()
    b = np.asarray(aux_patch, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("patches must have equal size")
    a = a - a.mean()
    b = b - b.mean()
    denom = math.sqrt(float(a @ a) * float(b @ b))
    if denom < _VAR_EPS:
        return float("nan")
    return float(np.clip((a @ b) / denom, -1.0, 1.0))


def ncc_cost(ref_patch: np.ndarray, aux_patch: np.ndarray) -> float:
    """Matched cost ``1 - NCC`` in [0, 2]; undefined correlations cost 1.0."""
    value = ncc(ref_patch, aux_patch)
    return 1.0 if math.isnan(value) else 1.0 - value


def confidence(costs: np.ndarray, sigma: float) -> np.ndarray:
    """Softmin confidence weights over a pixel's candidate matched costs.

    ``m_j = exp(-c_j / 2 sigma^2) / sum_k exp(-c_k / 2 sigma^2)``; weights are
    in (0, 1] and sum to 1.  Non-finite costs (invalid candidates) get zero
    weight; at least one finite cost is required.
    """
    c = np.asarray(costs, dtype=np.float64)
    if c.size == 0:
        raise ValueError("empty candidate set")
    finite = np.isfinite(c)
    if not finite.any():
        raise ValueError("all candidate costs are invalid")
    scaled = np.where(finite, c / (2.0 * sigma * sigma), np.inf)
    scaled = scaled - scaled[finite].min()
    w = np.exp(-scaled)
    return w / w.sum()


def _pad_edge(image: np.ndarray, radius: int) -> np.ndarray:
    return np.pad(image, radius, mode="edge")


def extract_patches(lum: np.ndarray, coords: np.ndarray, window: int) -> np.ndarray:
    """Fixed patches around integer pixel coords; shape ``(n, window**2)``.

    ``coords`` is ``(n, 2)`` as ``(x, y)``.  The image is edge-padded so
    border pixels get full windows.
    """
    r = window // 2
    padded = _pad_edge(np.asarray(lum, dtype=np.float64), r)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (window, window))
    c = np.asarray(coords)
    return windows[c[:, 1], c[:, 0]].reshape(len(c), -1)


def sample_patches(lum: np.ndarray, positions: np.ndarray, window: int) -> np.ndarray:
    """Bilinearly sampled patches at float positions ``(..., 2)`` as ``(x, y)``.

    Returns ``(..., window**2)``; positions may sit anywhere (the image is
    edge-padded), validity gating happens upstream.
    """
    r = window // 2
    pos = np.asarray(positions, dtype=np.float64)
    lead_shape = pos.shape[:-1]
    offs = np.arange(-r, r + 1, dtype=np.float64)
    oy, ox = np.meshgrid(offs, offs, indexing="ij")
    # padded-image coordinates: +r shifts, another +r margin for bilinear reads
    pad = _pad_edge(np.asarray(lum, dtype=np.float64), r + 1)
    ys = pos[..., 1, None] + oy.ravel() + (r + 1)
    xs = pos[..., 0, None] + ox.ravel() + (r + 1)
    np.clip(ys, 0, pad.shape[0] - 1, out=ys)
    np.clip(xs, 0, pad.shape[1] - 1, out=xs)
    sampled = map_coordinates(pad, [ys.ravel(), xs.ravel()], order=1, mode="nearest")
    return sampled.reshape(lead_shape + (window * window,))


def _ncc_batch(ref: np.ndarray, aux: np.ndarray) -> np.ndarray:
    """NCC between ``(n, w2)`` reference patches and ``(n, ..., w2)`` stacks."""
    a = ref - ref.mean(axis=-1, keepdims=True)
    b = aux - aux.mean(axis=-1, keepdims=True)
    while a.ndim < b.ndim:
        a = a[:, None]
    num = (a * b).sum(axis=-1)
    den = np.sqrt((a * a).sum(axis=-1) * (b * b).sum(axis=-1))
    with np.errstate(invalid="ignore", divide="ignore"):
        out = num / den
    out[den < _VAR_EPS] = np.nan
    return np.clip(out, -1.0, 1.0)


def candidate_costs(
    ref_view: CameraView,
    ref_lum: np.ndarray,
    coords: np.ndarray,
    depths: np.ndarray,
    aux_view: CameraView,
    aux_lum: np.ndarray,
    window: int,
) -> np.ndarray:
    """Matched cost ``1 - NCC`` of every (pixel, candidate-depth) hypothesis.

    ``coords`` is ``(n, 2)`` integer ``(x, y)`` in the reference view and
    ``depths`` is ``(n, L)`` with NaN padding.  Costs are +inf where the
    candidate is missing, projects outside the auxiliary image or lands behind
    the auxiliary camera; deeper zero-variance matches cost the neutral 1.0.
    """
    depths = np.asarray(depths, dtype=np.float64)
    n, L = depths.shape
    points = backproject_many(
        ref_view, np.repeat(np.asarray(coords, float)[:, None, :], L, axis=1), np.where(np.isnan(depths), 1.0, depths)
    )
    pixels, aux_depth = project_many(aux_view, points)
    valid = (
        ~np.isnan(depths)
        & (aux_depth > 0)
        & (pixels[..., 0] >= 0)
        & (pixels[..., 0] <= aux_view.width - 1)
        & (pixels[..., 1] >= 0)
        & (pixels[..., 1] <= aux_view.height - 1)
    )
    ref_patches = extract_patches(ref_lum, coords, window)
    aux_patches = sample_patches(aux_lum, np.where(valid[..., None], pixels, 0.0), window)
    corr = _ncc_batch(ref_patches, aux_patches)
    costs = 1.0 - np.where(np.isnan(corr), 0.0, corr)
    costs[~valid] = np.inf
    return costs


def data_costs(
    ref_view: CameraView,
    ref_lum: np.ndarray,
    coords: np.ndarray,
    depths: np.ndarray,
    aux_views: dict[int, CameraView],
    aux_lums: dict[int, np.ndarray],
    params: EnergyParams,
) -> np.ndarray:
    """Unary data block ``(n, L + 1)``; the last column is the unknown label.

    For each known candidate the cost sums ``1 - m`` over the ``k_views``
    auxiliary views with the lowest matched cost, where ``m`` is the softmin
    confidence of the hypothesis among the pixel's candidates.  Views whose
    projection misses the image are excluded; with no usable view the cost
    falls back to the unknown cost (occlusion fallback).
    """
    depths = np.asarray(depths, dtype=np.float64)
    n, L = depths.shape
    aux_ids = sorted(aux_views)
    if not aux_ids:
        raise ValueError("need at least one auxiliary view")
    cost_stack = np.empty((len(aux_ids), n, L))
    conf_stack = np.empty((len(aux_ids), n, L))
    for i, a in enumerate(aux_ids):
        costs = candidate_costs(
            ref_view, ref_lum, coords, depths, aux_views[a], aux_lums[a], params.ncc_window
        )
        cost_stack[i] = costs
        scaled = costs / (2.0 * params.sigma_i**2)
        shift = np.where(np.isfinite(scaled), scaled, np.inf).min(axis=1, keepdims=True)
        shift = np.where(np.isfinite(shift), shift, 0.0)
        w = np.exp(-(scaled - shift))
        w[~np.isfinite(costs)] = 0.0
        total = w.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            conf_stack[i] = np.where(total > 0, w / total, 0.0)

    # pick the k most photo-consistent views per hypothesis
    order = np.argsort(cost_stack, axis=0, kind="stable")
    sorted_costs = np.take_along_axis(cost_stack, order, axis=0)
    sorted_conf = np.take_along_axis(conf_stack, order, axis=0)
    k = min(params.k_views, len(aux_ids))
    usable = np.isfinite(sorted_costs[:k])
    contrib = np.where(usable, 1.0 - sorted_conf[:k], 0.0).sum(axis=0)
    any_usable = usable.any(axis=0)
    block = np.empty((n, L + 1))
    block[:, :L] = np.where(any_usable, contrib, params.m_unknown)
    block[:, :L][np.isnan(depths)] = np.inf
    block[:, L] = params.m_unknown
    return block


def data_term(
    ref_view: CameraView,
    ref_lum: np.ndarray,
    pixel,
    candidate_depths: np.ndarray,
    hypothesis: int | None,
    aux_views: dict[int, CameraView],
    aux_lums: dict[int, np.ndarray],
    params: EnergyParams,
) -> float:
    """Data cost of labeling one pixel with candidate index ``hypothesis``.

    ``hypothesis=None`` selects the unknown label (fixed cost ``m_unknown``).
    """
    if hypothesis is None:
        return params.m_unknown
    coords = np.asarray([pixel], dtype=int)
    depths = np.asarray(candidate_depths, dtype=np.float64)[None, :]
    block = data_costs(ref_view, ref_lum, coords, depths, aux_views, aux_lums, params)
    return float(block[0, hypothesis])


def bilateral_filter(image: np.ndarray, sigma_spatial: float = 3.0, sigma_range: float = 10.0) -> np.ndarray:
    """Edge-preserving joint spatial/range Gaussian filter.

    Works on 2D or (H, W, C) images; the range weight uses the L2 color
    distance so channels are filtered jointly.  The window is truncated at
    ``2.5 * sigma_spatial``.
    """
    if sigma_spatial <= 0 or sigma_range <= 0:
        raise ValueError("sigmas must be positive")
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    r = max(1, int(math.ceil(2.5 * sigma_spatial)))
    h, w, c = img.shape
    padded = np.pad(img, ((r, r), (r, r), (0, 0)), mode="edge")
    acc = np.zeros_like(img)
    weight = np.zeros((h, w, 1))
    inv_s = -0.5 / (sigma_spatial**2)
    inv_r = -0.5 / (sigma_range**2)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            shifted = padded[r + dy : r + dy + h, r + dx : r + dx + w]
            diff2 = ((shifted - img) ** 2).sum(axis=2, keepdims=True)
            wgt = math.exp((dy * dy + dx * dx) * inv_s) * np.exp(diff2 * inv_r)
            acc += wgt * shifted
            weight += wgt
    out = acc / weight
    return out[..., 0] if squeeze else out


def neighbor_pairs(shape: tuple[int, int], coords: np.ndarray) -> np.ndarray:
    """4-connected interacting pixel pairs within a pixel subset.

    ``coords`` is ``(n, 2)`` integer ``(x, y)``; returns ``(m, 2)`` index
    pairs into ``coords`` with each unordered pair listed once.
    """
    h, w = shape
    index = np.full((h, w), -1, dtype=np.int64)
    c = np.asarray(coords)
    index[c[:, 1], c[:, 0]] = np.arange(len(c))
    pairs = []
    for dx, dy in ((1, 0), (0, 1)):
        x2, y2 = c[:, 0] + dx, c[:, 1] + dy
        ok = (x2 < w) & (y2 < h)
        j = np.full(len(c), -1, dtype=np.int64)
        j[ok] = index[y2[ok], x2[ok]]
        found = j >= 0
        pairs.append(np.stack([np.flatnonzero(found), j[found]], axis=1))
    return np.concatenate(pairs, axis=0)


def contrast_sigma(filtered: np.ndarray) -> float:
    """Global normalization ``sigma_pq``: mean squared filtered-intensity
    difference per squared pixel distance over all 4-connected pairs."""
    img = np.asarray(filtered, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    total, count = 0.0, 0
    for axis in (0, 1):
        diff = np.diff(img, axis=axis)
        total += float((diff**2).sum())
        count += diff.shape[0] * diff.shape[1]
    return total / count if count else 0.0


def contrast_weight(bp, bq, d_pq: float, sigma_pq: float, epsilon: float) -> float:
    """Boundary cost multiplier ``(eps + exp(-C)) / (1 + eps)`` for a pair.

    ``C`` scales the squared filtered-intensity difference by the global
    normalization and the squared pixel distance; a flat image
    (``sigma_pq = 0``) degenerates to ``C = 0``.
    """
    diff2 = float(np.sum((np.asarray(bp, float) - np.asarray(bq, float)) ** 2))
    if sigma_pq <= 0:
        c_val = 0.0
    else:
        c_val = diff2 / (2.0 * sigma_pq**2 * d_pq**2)
    return (epsilon + math.exp(-c_val)) / (1.0 + epsilon)


def contrast_term(
    filtered: np.ndarray,
    p: tuple[int, int],
    q: tuple[int, int],
    d_p: float,
    d_q: float,
    params: EnergyParams,
    sigma_pq: float | None = None,
) -> float:
    """Per-pair contrast cost: zero when the labels agree (both unknown or the
    same known depth), otherwise the boundary weight of the pair.

    ``p``/``q`` are ``(x, y)`` pixels; ``sigma_pq`` may be precomputed with
    :func:`contrast_sigma` to avoid a full-image pass per call.
    """
    both_unknown = bool(np.isnan(d_p)) and bool(np.isnan(d_q))
    same_known = (not np.isnan(d_p)) and (not np.isnan(d_q)) and d_p == d_q
    if both_unknown or same_known:
        return 0.0
    if sigma_pq is None:
        sigma_pq = contrast_sigma(filtered)
    bp = filtered[p[1], p[0]]
    bq = filtered[q[1], q[0]]
    d_pq = math.dist((p[0], p[1]), (q[0], q[1]))
    return contrast_weight(bp, bq, d_pq, sigma_pq, params.epsilon)


def contrast_weights(filtered: np.ndarray, coords: np.ndarray, edges: np.ndarray, params: EnergyParams) -> np.ndarray:
    """Vectorized boundary weights for edges over a pixel subset."""
    img = np.asarray(filtered, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    sigma_pq = contrast_sigma(filtered)
    c = np.asarray(coords)
    p, q = c[edges[:, 0]], c[edges[:, 1]]
    diff2 = ((img[p[:, 1], p[:, 0]] - img[q[:, 1], q[:, 0]]) ** 2).sum(axis=1)
    d2 = ((p - q) ** 2).sum(axis=1).astype(np.float64)
    if sigma_pq <= 0:
        c_val = np.zeros_like(diff2)
    else:
        c_val = diff2 / (2.0 * sigma_pq**2 * d2)
    return (params.epsilon + np.exp(-c_val)) / (1.0 + params.epsilon)


def smoothness_term(d_p: float, d_q: float, d_max: float) -> float:
    """Truncated depth distance; unknown pairs cost zero, mixed pairs ``d_max``."""
    p_unknown = bool(np.isnan(d_p))
    q_unknown = bool(np.isnan(d_q))
    if p_unknown and q_unknown:
        return 0.0
    if p_unknown or q_unknown:
        return d_max
    return min(abs(d_p - d_q), d_max)


def smoothness_batch(d_p: np.ndarray, d_q: np.ndarray, d_max: float) -> np.ndarray:
    p_unknown = np.isnan(d_p)
    q_unknown = np.isnan(d_q)
    diff = np.minimum(np.abs(np.where(p_unknown, 0.0, d_p) - np.where(q_unknown, 0.0, d_q)), d_max)
    out = np.where(p_unknown & q_unknown, 0.0, np.where(p_unknown | q_unknown, d_max, diff))
    return out


def build_mrf(
    unary_data: np.ndarray,
    depth_values: np.ndarray,
    edges: np.ndarray,
    edge_contrast: np.ndarray,
    params: EnergyParams,
    admissible: np.ndarray | None = None,
) -> MrfProblem:
    """Assemble the full labeling MRF from precomputed blocks.

    ``unary_data`` is the raw data block ``(n, L + 1)`` (unknown last),
    ``depth_values`` the matching candidate depths with NaN in the unknown
    column, ``edges`` index pairs into the node list and ``edge_contrast`` the
    per-edge boundary weights.
    """
    n, n_labels = unary_data.shape
    dv = np.asarray(depth_values, dtype=np.float64)
    if dv.shape != (n, n_labels):
        raise ValueError("depth_values must match unary shape")
    if not np.isnan(dv[:, -1]).all():
        raise ValueError("last label column must be the unknown label")
    block = np.asarray(unary_data, dtype=np.float64)
    # keep +inf sentinels intact even when lambda_data is zero
    unary = np.where(np.isinf(block), np.inf, params.lambda_data * block)
    if admissible is None:
        admissible = np.isfinite(block)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    w = np.asarray(edge_contrast, dtype=np.float64)

    def batch(edge_ids, lp, lq):
        p = edges[edge_ids, 0]
        q = edges[edge_ids, 1]
        dp = dv[p, lp]
        dq = dv[q, lq]
        smooth = smoothness_batch(dp, dq, params.d_max)
        both_unknown = np.isnan(dp) & np.isnan(dq)
        same_known = ~np.isnan(dp) & ~np.isnan(dq) & (dp == dq)
        contrast = np.where(both_unknown | same_known, 0.0, w[edge_ids])
        return params.lambda_smooth * smooth + params.lambda_contrast * contrast

    def scalar(p, q, lp, lq):
        eid = _find_edge(edges, p, q)
        return float(batch(np.array([eid]), np.array([lp]), np.array([lq]))[0])

    return MrfProblem(
        n_nodes=n,
        n_labels=n_labels,
        unary=unary,
        edges=edges,
        pairwise=scalar,
        pairwise_batch=batch,
        admissible=admissible,
    )


def _find_edge(edges: np.ndarray, p: int, q: int) -> int:
    hit = np.flatnonzero(((edges[:, 0] == p) & (edges[:, 1] == q)) | ((edges[:, 0] == q) & (edges[:, 1] == p)))
    if len(hit) == 0:
        raise ValueError(f"no edge between nodes {p} and {q}")
    return int(hit[0])


def total_energy(
    labels: np.ndarray,
    unary_data: np.ndarray,
    depth_values: np.ndarray,
    edges: np.ndarray,
    edge_contrast: np.ndarray,
    params: EnergyParams,
) -> float:
    """Weighted total energy of a labeling, evaluated term by term.

    Matches ``MrfProblem.energy`` of :func:`build_mrf` exactly; kept separate
    so tests can cross-check the decomposition.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, n_labels = unary_data.shape
    if np.any(labels < 0) or np.any(labels >= n_labels):
        raise ValueError("label outside the candidate set")
    dv = np.asarray(depth_values, dtype=np.float64)
    selected = np.asarray(unary_data, dtype=np.float64)[np.arange(n), labels]
    if np.any(np.isinf(selected)):
        raise ValueError("label outside the pixel's candidate set")
    data = params.lambda_data * float(selected.sum())
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(edges) == 0:
        return data
    dp = dv[edges[:, 0], labels[edges[:, 0]]]
    dq = dv[edges[:, 1], labels[edges[:, 1]]]
    smooth = params.lambda_smooth * float(smoothness_batch(dp, dq, params.d_max).sum())
    both_unknown = np.isnan(dp) & np.isnan(dq)
    same_known = ~np.isnan(dp) & ~np.isnan(dq) & (dp == dq)
    cut = ~(both_unknown | same_known)
    contrast = params.lambda_contrast * float(np.asarray(edge_contrast)[cut].sum())
    return data + smooth + contrast
