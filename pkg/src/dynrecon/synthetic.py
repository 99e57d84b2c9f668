"""Synthetic multi-view dataset generator with exact ground truth.

Scenes contain a textured background quad plus moving textured spheres and
boxes, rendered by a vectorized raycaster into calibrated pinhole views.
Because the geometry is analytic, the generator also emits exact sparse
matches (with visibility checked by raycasting), exact forward flow fields
and exact depth/mask ground truth, which isolates the reconstruction
machinery from feature and flow quality.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from dynrecon import scene_io
from dynrecon.flow import FlowField, write_flow
from dynrecon.geometry import CameraView, project_many
from dynrecon.sparse import SparseCloud, SparsePoint


class SceneSpecError(ValueError):
    """Malformed or unusable scene description."""


@dataclass
class SynthObject:
    kind: str  # "sphere" | "box"
    center: np.ndarray
    size: np.ndarray  # sphere: (radius,), box: half extents (3,)
    velocity: np.ndarray  # world units per frame

    def center_at(self, frame: int) -> np.ndarray:
        return self.center + frame * self.velocity


@dataclass
class BackgroundPlane:
    center: np.ndarray
    normal: np.ndarray
    half_extent: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        n = np.asarray(self.normal, dtype=np.float64)
        norm = np.linalg.norm(n)
        if norm == 0:
            raise SceneSpecError("background normal must be nonzero")
        self.normal = n / norm
        helper = np.array([0.0, 1.0, 0.0]) if abs(self.normal[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        e1 = np.cross(self.normal, helper)
        self.e1 = e1 / np.linalg.norm(e1)
        self.e2 = np.cross(self.normal, self.e1)


@dataclass
class SceneSpec:
    cameras: list[CameraView]
    objects: list[SynthObject]
    background: BackgroundPlane
    n_frames: int
    seed: int = 0
    texture_scale: float = 1.0
    points_per_object: int = 200
    points_background: int = 320
    noise: float = 0.0


def look_at_camera(fx, fy, cx, cy, width, height, eye, look, up) -> CameraView:
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(look, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise SceneSpecError("camera eye and look-at point coincide")
    z = forward / norm
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    if np.linalg.norm(x) < 1e-12:
        raise SceneSpecError("camera up vector is parallel to the view direction")
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
    return CameraView(K=K, R=R, t=-R @ eye, width=int(width), height=int(height))


def parse_scene_spec(path) -> SceneSpec:
    """Parse the flat key-value scene description.

    Repeated lines::

        camera = fx fy cx cy width height ex ey ez lx ly lz ux uy uz
        object = sphere cx cy cz radius vx vy vz
        object = box cx cy cz hx hy hz vx vy vz

    Single lines: ``background = cx cy cz nx ny nz half_extent``, ``frames``,
    ``seed``, ``texture_scale``, ``points_per_object``, ``points_background``,
    ``noise``.
    """
    cameras, objects = [], []
    background = None
    scalars = {"frames": None, "seed": 0, "texture_scale": 1.0,
               "points_per_object": 200, "points_background": 320, "noise": 0.0}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SceneSpecError(f"{path}:{lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        key, toks = key.strip(), val.split()
        try:
            if key == "camera":
                if len(toks) != 15:
                    raise SceneSpecError(f"{path}:{lineno}: camera needs 15 numbers")
                nums = [float(t) for t in toks]
                cameras.append(
                    look_at_camera(*nums[0:4], nums[4], nums[5], nums[6:9], nums[9:12], nums[12:15])
                )
            elif key == "object":
                kind = toks[0]
                nums = [float(t) for t in toks[1:]]
                if kind == "sphere" and len(nums) == 7:
                    objects.append(
                        SynthObject("sphere", np.array(nums[0:3]), np.array(nums[3:4]), np.array(nums[4:7]))
                    )
                elif kind == "box" and len(nums) == 9:
                    objects.append(
                        SynthObject("box", np.array(nums[0:3]), np.array(nums[3:6]), np.array(nums[6:9]))
                    )
                else:
                    raise SceneSpecError(f"{path}:{lineno}: bad object line")
            elif key == "background":
                nums = [float(t) for t in toks]
                if len(nums) != 7:
                    raise SceneSpecError(f"{path}:{lineno}: background needs 7 numbers")
                background = BackgroundPlane(np.array(nums[0:3]), np.array(nums[3:6]), nums[6])
            elif key in scalars:
                scalars[key] = float(toks[0])
            else:
                raise SceneSpecError(f"{path}:{lineno}: unknown key {key!r}")
        except (ValueError, IndexError) as exc:
            raise SceneSpecError(f"{path}:{lineno}: malformed line") from exc
    if not cameras:
        raise SceneSpecError("scene needs at least one camera")
    if not objects:
        raise SceneSpecError("scene needs at least one object")
    if background is None:
        raise SceneSpecError("scene needs a background plane")
    if not scalars["frames"] or scalars["frames"] < 1:
        raise SceneSpecError("scene needs frames >= 1")
    return SceneSpec(
        cameras=cameras,
        objects=objects,
        background=background,
        n_frames=int(scalars["frames"]),
        seed=int(scalars["seed"]),
        texture_scale=float(scalars["texture_scale"]),
        points_per_object=int(scalars["points_per_object"]),
        points_background=int(scalars["points_background"]),
        noise=float(scalars["noise"]),
    )


# --- procedural solid texture -------------------------------------------------


def _hash_lattice(ix, iy, iz, seed: int) -> np.ndarray:
    h = (
        ix.astype(np.uint64) * np.uint64(73856093)
        ^ iy.astype(np.uint64) * np.uint64(19349663)
        ^ iz.astype(np.uint64) * np.uint64(83492791)
        ^ np.uint64(seed * 2654435761 & 0xFFFFFFFF)
    )
    h = (h ^ (h >> np.uint64(13))) * np.uint64(0x9E3779B97F4A7C15)
    h = h ^ (h >> np.uint64(31))
    return (h & np.uint64(0xFFFFFF)).astype(np.float64) / float(0xFFFFFF)


def value_noise(points: np.ndarray, seed: int, scale: float) -> np.ndarray:
    """Smooth value noise in [0, 1] over 3D points; deterministic in the seed."""
    q = np.asarray(points, dtype=np.float64) / scale
    i0 = np.floor(q).astype(np.int64)
    f = q - i0
    f = f * f * (3.0 - 2.0 * f)  # smoothstep
    out = np.zeros(q.shape[:-1])
    for corner in range(8):
        dx, dy, dz = corner & 1, (corner >> 1) & 1, (corner >> 2) & 1
        h = _hash_lattice(i0[..., 0] + dx, i0[..., 1] + dy, i0[..., 2] + dz, seed)
        wx = f[..., 0] if dx else 1.0 - f[..., 0]
        wy = f[..., 1] if dy else 1.0 - f[..., 1]
        wz = f[..., 2] if dz else 1.0 - f[..., 2]
        out += h * wx * wy * wz
    return out


def entity_color(points: np.ndarray, entity: int, spec: SceneSpec) -> np.ndarray:
    """Lambertian solid-texture RGB in [0, 255] for points on one entity."""
    base_seed = spec.seed * 101 + entity * 17
    scale = spec.texture_scale * (0.22 if entity == 0 else 0.3)
    rgb = np.empty(points.shape[:-1] + (3,))
    for c in range(3):
        coarse = value_noise(points, base_seed + 3 * c, scale)
        fine = value_noise(points, base_seed + 3 * c + 1, scale / 3.7)
        rgb[..., c] = 255.0 * np.clip(0.12 + 0.78 * (0.62 * coarse + 0.38 * fine), 0.0, 1.0)
    return rgb


# --- raycasting ----------------------------------------------------------------


def _intersect_plane(origin, dirs, plane: BackgroundPlane) -> np.ndarray:
    denom = dirs @ plane.normal
    with np.errstate(divide="ignore", invalid="ignore"):
        s = ((plane.center - origin) @ plane.normal) / denom
    p = origin + s[..., None] * dirs
    rel = p - plane.center
    inside = (
        (np.abs(denom) > 1e-12)
        & (s > 1e-9)
        & (np.abs(rel @ plane.e1) <= plane.half_extent)
        & (np.abs(rel @ plane.e2) <= plane.half_extent)
    )
    return np.where(inside, s, np.inf)


def _intersect_sphere(origin, dirs, center, radius) -> np.ndarray:
    oc = origin - center
    a = np.einsum("...i,...i->...", dirs, dirs)
    b = 2.0 * (dirs @ oc)
    c = oc @ oc - radius * radius
    disc = b * b - 4.0 * a * c
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    s1 = (-b - sq) / (2.0 * a)
    s2 = (-b + sq) / (2.0 * a)
    s = np.where(s1 > 1e-9, s1, s2)
    return np.where(hit & (s > 1e-9), s, np.inf)


def _intersect_box(origin, dirs, center, half) -> np.ndarray:
    lo = center - half
    hi = center + half
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origin) / dirs
        t2 = (hi - origin) / dirs
    tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
    s = np.where(tmin > 1e-9, tmin, tmax)
    hit = (tmax >= tmin) & (s > 1e-9)
    return np.where(hit, s, np.inf)


def raycast(origin: np.ndarray, dirs: np.ndarray, spec: SceneSpec, frame: int) -> tuple[np.ndarray, np.ndarray]:
    """Nearest intersection along each ray.

    Returns ``(s, entity)`` with entity 0 the background, ``1 + i`` object
    ``i`` and -1 for no hit; ``s`` is the ray parameter (inf for misses).
    """
    best = _intersect_plane(origin, dirs, spec.background)
    entity = np.where(np.isfinite(best), 0, -1)
    for i, obj in enumerate(spec.objects):
        center = obj.center_at(frame)
        if obj.kind == "sphere":
            s = _intersect_sphere(origin, dirs, center, float(obj.size[0]))
        else:
            s = _intersect_box(origin, dirs, center, obj.size)
        closer = s < best
        best = np.where(closer, s, best)
        entity = np.where(closer, 1 + i, entity)
    return best, entity


def _pixel_rays(cam: CameraView) -> np.ndarray:
    xs, ys = np.meshgrid(np.arange(cam.width), np.arange(cam.height))
    pix = np.stack([xs, ys, np.ones_like(xs)], axis=-1).astype(np.float64)
    rays = pix @ cam.K_inv.T
    rays = rays / rays[..., 2:3]  # camera-frame z = 1, so the ray parameter is depth
    return rays @ cam.R


def render_view(cam: CameraView, spec: SceneSpec, frame: int, rng: np.random.Generator | None = None):
    """Render one view; returns ``(rgb, depth, mask, entity)``.

    Depth is the camera z-depth with NaN at misses; the mask flags object
    (non-background) pixels.
    """
    dirs = _pixel_rays(cam)
    origin = cam.center
    s, entity = raycast(origin, dirs, spec, frame)
    hit = np.isfinite(s)
    points = origin + np.where(hit, s, 0.0)[..., None] * dirs
    rgb = np.full(dirs.shape[:2] + (3,), 28.0)
    for e in np.unique(entity[hit]):
        sel = entity == e
        rgb[sel] = entity_color(points[sel], int(e), spec)
    if rng is not None and spec.noise > 0:
        rgb = rgb + rng.normal(scale=spec.noise, size=rgb.shape)
    rgb = np.clip(rgb, 0.0, 255.0)
    depth = np.where(hit, s, np.nan)
    mask = entity >= 1
    return rgb, depth, mask, entity


def _surface_samples(obj: SynthObject, count: int, rng: np.random.Generator) -> np.ndarray:
    """Object-local surface sample offsets (added to the moving center)."""
    if obj.kind == "sphere":
        d = rng.normal(size=(count, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return d * obj.size[0]
    half = obj.size
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    areas = np.repeat(areas, 2)
    probs = areas / areas.sum()
    faces = rng.choice(6, size=count, p=probs)
    u = rng.uniform(-1, 1, size=count)
    v = rng.uniform(-1, 1, size=count)
    out = np.empty((count, 3))
    for f in range(6):
        sel = faces == f
        axis = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        others = [a for a in range(3) if a != axis]
        out[sel, axis] = sign * half[axis]
        out[sel, others[0]] = u[sel] * half[others[0]]
        out[sel, others[1]] = v[sel] * half[others[1]]
    return out


def _visible(cam: CameraView, X: np.ndarray, entities: np.ndarray, spec: SceneSpec, frame: int) -> np.ndarray:
    """Exact visibility of world points from a camera by self-raycasting.

    A point is visible iff the ray from the camera through it first hits the
    point's own entity at the point itself (ray parameter 1).
    """
    dirs = X - cam.center
    s, ent = raycast(cam.center, dirs, spec, frame)
    return (ent == entities) & (np.abs(s - 1.0) <= 1e-6)


def generate_synthetic(spec: SceneSpec, out_dir) -> "scene_io.DatasetManifest":
    """Write a full synthetic dataset (frames, calibration, matches, flow, GT).

    Raises :class:`SceneSpecError` if some object is outside every view's
    frustum at some frame.
    """
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "matches").mkdir(exist_ok=True)
    (out / "flow").mkdir(exist_ok=True)
    (out / "gt").mkdir(exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    cameras = {i: cam for i, cam in enumerate(spec.cameras)}
    scene_io.write_cameras(cameras, out / "cameras.txt")

    for frame in range(spec.n_frames):
        for i, obj in enumerate(spec.objects):
            center = obj.center_at(frame)[None, :]
            seen = False
            for cam in spec.cameras:
                pix, depth = project_many(cam, center)
                if depth[0] > 0 and cam.contains(pix)[0]:
                    seen = True
                    break
            if not seen:
                raise SceneSpecError(f"object {i} outside every view frustum at frame {frame}")

    # fixed surface samples move rigidly with their object
    offsets = [_surface_samples(obj, spec.points_per_object, rng) for obj in spec.objects]
    bg = spec.background
    bg_uv = rng.uniform(-bg.half_extent, bg.half_extent, size=(spec.points_background, 2))
    bg_points = bg.center + bg_uv[:, 0:1] * bg.e1 + bg_uv[:, 1:2] * bg.e2

    for frame in range(spec.n_frames):
        frame_dir = out / "frames" / str(frame)
        frame_dir.mkdir(exist_ok=True)
        entity_maps = {}
        for cam_id, cam in cameras.items():
            rgb, depth, mask, entity = render_view(cam, spec, frame, rng if spec.noise > 0 else None)
            Image.fromarray(np.rint(rgb).astype(np.uint8)).save(frame_dir / f"{cam_id}.png")
            scene_io.write_depth_map(depth, out / "gt" / f"depth_{cam_id}_{frame}.png16")
            scene_io.write_mask(mask, out / "gt" / f"mask_{cam_id}_{frame}.png")
            entity_maps[cam_id] = entity

        # exact sparse matches: surface + background samples with raycast visibility
        points, entities = [bg_points], [np.zeros(len(bg_points), dtype=int)]
        for i, obj in enumerate(spec.objects):
            points.append(obj.center_at(frame) + offsets[i])
            entities.append(np.full(len(offsets[i]), 1 + i, dtype=int))
        points = np.concatenate(points)
        entities = np.concatenate(entities)
        sparse_points: list[SparsePoint | None] = [None] * len(points)
        for cam_id, cam in cameras.items():
            pix, depth = project_many(cam, points)
            ok = (depth > 0) & cam.contains(pix)
            vis_ok = _visible(cam, points[ok], entities[ok], spec, frame)
            for j in np.flatnonzero(ok)[vis_ok]:
                if sparse_points[j] is None:
                    sparse_points[j] = SparsePoint(position=points[j].copy(), observations={})
                sparse_points[j].observations[cam_id] = (float(pix[j, 0]), float(pix[j, 1]))
        cloud = SparseCloud(points=[p for p in sparse_points if p is not None and len(p.observations) >= 2])
        scene_io.write_matches(cloud, out / "matches" / f"{frame}.txt")

        # exact forward flow (frame -> frame + 1)
        if frame + 1 < spec.n_frames:
            vel = np.zeros((1 + len(spec.objects), 3))
            for i, obj in enumerate(spec.objects):
                vel[1 + i] = obj.velocity
            for cam_id, cam in cameras.items():
                dirs = _pixel_rays(cam)
                s, entity = raycast(cam.center, dirs, spec, frame)
                hit = np.isfinite(s)
                P = cam.center + np.where(hit, s, 1.0)[..., None] * dirs
                P_next = P + vel[np.clip(entity, 0, None)]
                pix_next, depth_next = project_many(cam, P_next)
                xs, ys = np.meshgrid(np.arange(cam.width), np.arange(cam.height))
                u = pix_next[..., 0] - xs
                v = pix_next[..., 1] - ys
                flat = P_next[hit]
                s_chk, ent_chk = raycast(cam.center, flat - cam.center, spec, frame + 1)
                vis = np.zeros(hit.shape, dtype=bool)
                vis[hit] = (ent_chk == entity[hit]) & (np.abs(s_chk - 1.0) <= 1e-6)
                valid = hit & vis & (depth_next > 0) & cam.contains(pix_next.reshape(-1, 2)).reshape(hit.shape)
                field = FlowField(u=np.where(valid, u, 0.0), v=np.where(valid, v, 0.0), valid=valid)
                write_flow(field, out / "flow" / f"{cam_id}_{frame}.flo-txt")

    return scene_io.load_dataset(out)
