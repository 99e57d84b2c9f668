"""Sparse scene-cloud cleanup, Euclidean flood-fill clustering and
motion-based dynamic labeling with persistent object identities.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from dynrecon.flow import FlowField
from dynrecon.geometry import CameraView

# clusters whose median observed flow magnitude exceeds this move
MOTION_THRESHOLD_PX = 1.0
# pixel radius used when matching advected members to current members
TRACK_MATCH_RADIUS_PX = 3.0


class SparseCloudError(ValueError):
    """Invalid sparse cloud input."""


@dataclass
class SparsePoint:
    """3D feature point with its multi-view pixel observations."""

    position: np.ndarray
    observations: dict[int, tuple[float, float]]

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)


@dataclass
class SparseCloud:
    points: list[SparsePoint]

    def __len__(self) -> int:
        return len(self.points)

    @property
    def positions(self) -> np.ndarray:
        if not self.points:
            return np.empty((0, 3))
        return np.stack([p.position for p in self.points])

    def validate(self, cameras: dict[int, CameraView]) -> None:
        """Check the structural invariants against a camera set."""
        for i, p in enumerate(self.points):
            if len(p.observations) < 2:
                raise SparseCloudError(f"point {i} has fewer than 2 observations")
            for cam_id, (u, v) in p.observations.items():
                if cam_id not in cameras:
                    raise SparseCloudError(f"point {i} observed by unknown camera {cam_id}")
                cam = cameras[cam_id]
                if not (0 <= u <= cam.width - 1 and 0 <= v <= cam.height - 1):
                    raise SparseCloudError(
                        f"point {i} observation ({u}, {v}) outside camera {cam_id} bounds"
                    )

    def subset(self, indices) -> "SparseCloud":
        return SparseCloud(points=[self.points[i] for i in indices])


@dataclass
class Cluster:
    """Flood-fill cluster of sparse points with tracking metadata."""

    members: np.ndarray
    label: int = -1
    dynamic: bool = False
    reuse_previous: bool = False
    best_view: int = -1

    def __post_init__(self):
        self.members = np.sort(np.asarray(self.members, dtype=np.int64))


def neighbor_mean_distances(positions: np.ndarray, k: int) -> np.ndarray:
    """Mean distance of every point to its k nearest neighbors."""
    tree = cKDTree(positions)
    dists, _ = tree.query(positions, k=k + 1)
    return dists[:, 1:].mean(axis=1)


def remove_outliers(cloud: SparseCloud, k: int, alpha: float) -> SparseCloud:
    """Statistical outlier filter on k-nearest-neighbor distances.

    A point survives iff its mean distance to its ``k`` nearest neighbors is
    at most ``mu + alpha * sigma``, where ``mu``/``sigma`` are the mean and
    standard deviation of that statistic over the whole cloud.
    """
    if len(cloud) <= k:
        raise SparseCloudError(f"cloud of {len(cloud)} points is too small for k={k}")
    stats = neighbor_mean_distances(cloud.positions, k)
    keep = stats <= stats.mean() + alpha * stats.std()
    return cloud.subset(np.flatnonzero(keep))


def median_nn_distance(cloud: SparseCloud) -> float:
    """Median nearest-neighbor distance of the cloud."""
    if len(cloud) < 2:
        raise SparseCloudError("need at least two points")
    tree = cKDTree(cloud.positions)
    dists, _ = tree.query(cloud.positions, k=2)
    return float(np.median(dists[:, 1]))


def default_cluster_distance(cloud: SparseCloud) -> float:
    """Default flood-fill hop distance: twice the median NN distance."""
    return 2.0 * median_nn_distance(cloud)


class _VoxelGrid:
    """Uniform 3D grid hash for fixed-radius neighbor queries."""

    def __init__(self, positions: np.ndarray, cell: float):
        self.positions = positions
        self.cell = cell
        self.cells: dict[tuple[int, int, int], list[int]] = {}
        keys = np.floor(positions / cell).astype(np.int64)
        for i, key in enumerate(map(tuple, keys)):
            self.cells.setdefault(key, []).append(i)
        self.keys = keys

    def neighbors_within(self, i: int, radius: float) -> list[int]:
        kx, ky, kz = self.keys[i]
        p = self.positions[i]
        out = []
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    bucket = self.cells.get((kx + dx, ky + dy, kz + dz))
                    if not bucket:
                        continue
                    for j in bucket:
                        if j != i and np.linalg.norm(self.positions[j] - p) <= radius:
                            out.append(j)
        return out


def flood_fill_cluster(cloud: SparseCloud, dist_threshold: float, min_size: int) -> list[Cluster]:
    """Connected components under a Euclidean hop threshold.

    Two points share a cluster iff they are linked by a chain of hops of
    length at most ``dist_threshold``; components smaller than ``min_size``
    are discarded.  Neighbor queries go through a uniform 3D grid subdivision
    with cell size equal to the hop threshold.
    """
    if dist_threshold <= 0:
        raise ValueError("dist_threshold must be positive")
    n = len(cloud)
    if n == 0:
        return []
    grid = _VoxelGrid(cloud.positions, dist_threshold)
    visited = np.zeros(n, dtype=bool)
    clusters = []
    for seed in range(n):
        if visited[seed]:
            continue
        queue = deque([seed])
        visited[seed] = True
        members = [seed]
        while queue:
            i = queue.popleft()
            for j in grid.neighbors_within(i, dist_threshold):
                if not visited[j]:
                    visited[j] = True
                    members.append(j)
                    queue.append(j)
        if len(members) >= min_size:
            clusters.append(Cluster(members=np.array(members)))
    return clusters


def select_best_view(cluster: Cluster, cloud: SparseCloud, cameras: dict[int, CameraView]) -> int:
    """Camera observing the most cluster members; ties go to the lowest id."""
    if len(cluster.members) == 0:
        raise ValueError("cluster is empty")
    counts: dict[int, int] = {}
    for i in cluster.members:
        for cam_id in cloud.points[i].observations:
            if cam_id in cameras:
                counts[cam_id] = counts.get(cam_id, 0) + 1
    if not counts:
        raise SparseCloudError("no cluster member is observed by any known camera")
    best = max(sorted(counts), key=lambda c: counts[c])
    return best


def member_pixels(cluster: Cluster, cloud: SparseCloud, view: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixels of members observed in ``view``; returns ``(indices, pixels)``."""
    idx, pix = [], []
    for i in cluster.members:
        obs = cloud.points[i].observations.get(view)
        if obs is not None:
            idx.append(i)
            pix.append(obs)
    if not idx:
        return np.empty(0, dtype=np.int64), np.empty((0, 2))
    return np.asarray(idx, dtype=np.int64), np.asarray(pix, dtype=np.float64)


@dataclass
class TrackState:
    """Previous-frame tracking info carried between frames.

    ``pixels``/``views`` hold, per persistent label, the member pixels in the
    view whose flow is used to advect them into the next frame.
    """

    pixels: dict[int, np.ndarray] = field(default_factory=dict)
    views: dict[int, int] = field(default_factory=dict)
    next_label: int = 0


@dataclass
class LabelingOutcome:
    clusters: list[Cluster]
    state: TrackState


def label_dynamic(
    clusters: list[Cluster],
    cloud: SparseCloud,
    flows_step: dict[int, FlowField | None],
    flows_forward: dict[int, FlowField | None],
    prev: TrackState | None = None,
    motion_threshold: float = MOTION_THRESHOLD_PX,
    match_radius: float = TRACK_MATCH_RADIUS_PX,
) -> LabelingOutcome:
    """Assign dynamic flags and persistent labels to the frame's clusters.

    ``flows_step`` maps view id to the flow that lands on this frame (previous
    frame to current); ``flows_forward`` maps view id to the flow leaving this
    frame.  Tracked clusters inherit motion status from the step flow sampled
    at the previous members: a tracked cluster that did not move keeps its
    label with ``reuse_previous`` set.  New (unmatched) clusters are dynamic
    iff their forward median flow magnitude exceeds the threshold; with no
    usable flow samples a cluster counts as static.
    """
    prev = prev or TrackState()
    for c in clusters:
        if c.best_view < 0:
            raise ValueError("clusters must have best_view assigned")

    # advect previous members into this frame and measure their motion
    advected: dict[int, np.ndarray] = {}
    prev_motion: dict[int, float] = {}
    for lab, pix in prev.pixels.items():
        view = prev.views[lab]
        flow = flows_step.get(view)
        if flow is None or len(pix) == 0:
            advected[lab] = pix
            prev_motion[lab] = 0.0
            continue
        disp, ok = flow.sample(pix)
        prev_motion[lab] = float(np.median(np.hypot(disp[ok, 0], disp[ok, 1]))) if ok.any() else 0.0
        advected[lab] = pix + disp

    # overlap counts between advected previous clusters and current clusters
    cur_pixels = [member_pixels(c, cloud, c.best_view)[1] for c in clusters]
    candidates = []
    for lab, adv in advected.items():
        if len(adv) == 0:
            continue
        tree = cKDTree(adv)
        for ci, pix in enumerate(cur_pixels):
            if clusters[ci].best_view != prev.views[lab] or len(pix) == 0:
                continue
            dists, _ = tree.query(pix, k=1)
            overlap = int((dists <= match_radius).sum())
            if overlap > 0:
                candidates.append((overlap, lab, ci))

    # greedy maximal-overlap assignment; deterministic tie-breaks
    candidates.sort(key=lambda t: (-t[0], t[1], t[2]))
    assigned_prev: set[int] = set()
    assigned_cur: set[int] = set()
    matches: dict[int, int] = {}
    for overlap, lab, ci in candidates:
        if lab in assigned_prev or ci in assigned_cur:
            continue
        assigned_prev.add(lab)
        assigned_cur.add(ci)
        matches[ci] = lab

    out_clusters = []
    next_label = prev.next_label
    for ci, cluster in enumerate(clusters):
        if ci in matches:
            lab = matches[ci]
            moved = prev_motion[lab] > motion_threshold
            out_clusters.append(
                replace(cluster, label=lab, dynamic=moved, reuse_previous=not moved)
            )
        else:
            flow = flows_forward.get(cluster.best_view)
            moved = False
            if flow is not None:
                _, pix = member_pixels(cluster, cloud, cluster.best_view)
                if len(pix):
                    disp, ok = flow.sample(pix)
                    if ok.any():
                        moved = float(np.median(np.hypot(disp[ok, 0], disp[ok, 1]))) > motion_threshold
            out_clusters.append(
                replace(cluster, label=next_label, dynamic=moved, reuse_previous=False)
            )
            next_label += 1

    # state for the next frame: this frame's member pixels in each best view
    state = TrackState(next_label=next_label)
    for cluster in out_clusters:
        _, pix = member_pixels(cluster, cloud, cluster.best_view)
        state.pixels[cluster.label] = pix
        state.views[cluster.label] = cluster.best_view
    return LabelingOutcome(clusters=out_clusters, state=state)
