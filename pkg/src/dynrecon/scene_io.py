"""Dataset ingestion and persistence of every pipeline artifact.

Dataset layout::

    root/frames/<t>/<cam>.png        input frames, t contiguous from 0
    root/cameras.txt                 calibration blocks (id, K, R, t)
    root/matches/<t>.txt             optional sparse 3D matches per frame
    root/flow/<cam>_<t>.flo-txt      optional forward flow (frame t -> t+1)
    root/gt/depth_<cam>_<t>.png16    synthetic only: ground-truth depth
    root/gt/mask_<cam>_<t>.png       synthetic only: ground-truth masks

All loaders and writers are reentrant and share no mutable state.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from PIL import Image

from dynrecon.coarse import INNER, OUTER, RegionMask
from dynrecon.energy import EnergyParams
from dynrecon.geometry import CameraView
from dynrecon.sparse import SparseCloud, SparsePoint


class DatasetError(ValueError):
    """Missing or inconsistent dataset content."""


class ConfigError(ValueError):
    """Malformed pipeline configuration."""


def _parse_numbers(text: str) -> list[float]:
    return [float(tok) for tok in text.split()]


def load_cameras(path) -> dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Parse calibration blocks: camera id, 3x3 K, 3x3 R, 3-vector t."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"calibration not found: {path}")
    tokens = _parse_numbers(path.read_text())
    if len(tokens) % 22 != 0 or not tokens:
        raise DatasetError(f"calibration file {path} must hold blocks of 22 numbers")
    cameras = {}
    for i in range(0, len(tokens), 22):
        block = tokens[i : i + 22]
        cam_id = int(block[0])
        if cam_id in cameras:
            raise DatasetError(f"duplicate camera id {cam_id}")
        K = np.array(block[1:10]).reshape(3, 3)
        R = np.array(block[10:19]).reshape(3, 3)
        t = np.array(block[19:22])
        cameras[cam_id] = (K, R, t)
    return cameras


def write_cameras(cameras: dict[int, CameraView], path) -> None:
    lines = []
    for cam_id in sorted(cameras):
        cam = cameras[cam_id]
        nums = [cam_id] + list(cam.K.ravel()) + list(cam.R.ravel()) + list(cam.t)
        lines.append(" ".join(f"{v:.17g}" for v in nums))
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class DatasetManifest:
    """Validated index of one dataset directory."""

    root: Path
    n_frames: int
    camera_ids: list[int]
    cameras: dict[int, CameraView]
    image_paths: dict[tuple[int, int], Path]
    matches_dir: Path | None = None
    flow_dir: Path | None = None
    gt_dir: Path | None = None

    def image(self, frame: int, cam: int) -> np.ndarray:
        """Load one frame as float RGB in [0, 255]."""
        img = Image.open(self.image_paths[(frame, cam)]).convert("RGB")
        return np.asarray(img, dtype=np.float64)

    def matches_path(self, frame: int) -> Path | None:
        if self.matches_dir is None:
            return None
        p = self.matches_dir / f"{frame}.txt"
        return p if p.exists() else None

    def flow_path(self, cam: int, frame: int) -> Path | None:
        if self.flow_dir is None:
            return None
        p = self.flow_dir / f"{cam}_{frame}.flo-txt"
        return p if p.exists() else None

    def gt_depth_path(self, cam: int, frame: int) -> Path | None:
        if self.gt_dir is None:
            return None
        p = self.gt_dir / f"depth_{cam}_{frame}.png16"
        return p if p.exists() else None

    def gt_mask_path(self, cam: int, frame: int) -> Path | None:
        if self.gt_dir is None:
            return None
        p = self.gt_dir / f"mask_{cam}_{frame}.png"
        return p if p.exists() else None

    @property
    def has_gt(self) -> bool:
        return self.gt_dir is not None


def load_dataset(root) -> DatasetManifest:
    """Validate a dataset directory and build its manifest.

    Checks: contiguous frame directories from 0, one image per camera per
    frame, per-camera resolution consistency, decodable images and a present
    calibration file.  Purely a read: nothing on disk is modified.
    """
    root = Path(root)
    frames_dir = root / "frames"
    if not frames_dir.is_dir():
        raise DatasetError(f"no frames directory under {root}")
    frame_ids = sorted(
        int(p.name) for p in frames_dir.iterdir() if p.is_dir() and p.name.isdigit()
    )
    if not frame_ids:
        raise DatasetError("dataset has no frames")
    if frame_ids != list(range(len(frame_ids))):
        raise DatasetError(f"frame indices must be contiguous from 0, got {frame_ids}")

    raw_cameras = load_cameras(root / "cameras.txt")

    image_paths: dict[tuple[int, int], Path] = {}
    sizes: dict[int, tuple[int, int]] = {}
    camera_ids: list[int] | None = None
    for t in frame_ids:
        cams_here = sorted(
            int(p.stem) for p in (frames_dir / str(t)).glob("*.png") if p.stem.isdigit()
        )
        if camera_ids is None:
            camera_ids = cams_here
            if not camera_ids:
                raise DatasetError(f"frame 0 has no camera images")
        elif cams_here != camera_ids:
            raise DatasetError(f"frame {t} cameras {cams_here} differ from frame 0 {camera_ids}")
        for cam in cams_here:
            path = frames_dir / str(t) / f"{cam}.png"
            try:
                with Image.open(path) as img:
                    size = img.size
            except Exception as exc:
                raise DatasetError(f"cannot decode {path}: {exc}") from exc
            if cam in sizes and sizes[cam] != size:
                raise DatasetError(
                    f"camera {cam} resolution {size} at frame {t} differs from {sizes[cam]}"
                )
            sizes[cam] = size
            image_paths[(t, cam)] = path

    cameras = {}
    for cam in camera_ids:
        if cam not in raw_cameras:
            raise DatasetError(f"camera {cam} missing from cameras.txt")
        K, R, t_vec = raw_cameras[cam]
        w, h = sizes[cam]
        cameras[cam] = CameraView(K=K, R=R, t=t_vec, width=w, height=h)

    def optional(name):
        p = root / name
        return p if p.is_dir() else None

    return DatasetManifest(
        root=root,
        n_frames=len(frame_ids),
        camera_ids=camera_ids,
        cameras=cameras,
        image_paths=image_paths,
        matches_dir=optional("matches"),
        flow_dir=optional("flow"),
        gt_dir=optional("gt"),
    )


@dataclass
class PipelineConfig:
    """All tunables of the reconstruction pipeline.

    Energy weights default to the indoor-scene setting (data 0.5, smooth
    0.005, contrast 1.0).  ``cluster_dist = 0`` selects the automatic rule
    (twice the cleaned cloud's median nearest-neighbor distance).
    """

    lambda_data: float = 0.5
    lambda_contrast: float = 1.0
    lambda_smooth: float = 0.005
    sigma_i: float = 0.3
    epsilon: float = 1.0
    d_max_steps: float = 50.0
    m_unknown: float = 1.2
    ncc_window: int = 15
    k_views: int = 2
    cluster_dist: float = 0.0
    cluster_min_size: int = 10
    outlier_k: int = 8
    outlier_stddev: float = 1.0
    labels_inner: int = 7
    labels_outer: int = 13
    extrap_percent: float = 5.0
    volume_percent_outer: float = 1.0
    output_dir: Path | None = None

    def __post_init__(self):
        for name in ("lambda_data", "lambda_contrast", "lambda_smooth"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("sigma_i", "d_max_steps", "extrap_percent", "volume_percent_outer", "outlier_stddev"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be non-negative")
        if self.cluster_dist < 0:
            raise ConfigError("cluster_dist must be non-negative")
        if self.labels_inner >= self.labels_outer:
            raise ConfigError("labels_inner must be smaller than labels_outer")
        if self.labels_inner < 2:
            raise ConfigError("labels_inner must be at least 2")
        if self.ncc_window < 3 or self.ncc_window % 2 == 0:
            raise ConfigError("ncc_window must be odd and >= 3")
        if self.k_views < 1 or self.outlier_k < 1 or self.cluster_min_size < 1:
            raise ConfigError("k_views, outlier_k and cluster_min_size must be >= 1")

    def energy_params(self, d_max: float) -> EnergyParams:
        return EnergyParams(
            lambda_data=self.lambda_data,
            lambda_contrast=self.lambda_contrast,
            lambda_smooth=self.lambda_smooth,
            sigma_i=self.sigma_i,
            epsilon=self.epsilon,
            d_max=d_max,
            m_unknown=self.m_unknown,
            ncc_window=self.ncc_window,
            k_views=self.k_views,
        )


_INT_KEYS = {"ncc_window", "k_views", "cluster_min_size", "outlier_k", "labels_inner", "labels_outer"}


def load_config(path) -> PipelineConfig:
    """Parse a flat ``key = value`` config file; absent keys get defaults.

    Unknown keys and malformed values raise :class:`ConfigError` naming the
    offending field.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config not found: {path}")
    known = {f.name for f in fields(PipelineConfig)} - {"output_dir"}
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = int(val) if key in _INT_KEYS else float(val)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {val!r}") from exc
    try:
        return PipelineConfig(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def write_config(config: PipelineConfig, path) -> None:
    lines = []
    for f in fields(PipelineConfig):
        if f.name == "output_dir":
            continue
        lines.append(f"{f.name} = {getattr(config, f.name)}")
    Path(path).write_text("\n".join(lines) + "\n")


# --- depth maps: 16-bit PNG with a text sidecar -----------------------------

_DEPTH_LEVELS = 65534  # value 0 is the unknown label, 1..65535 quantize depth


def write_depth_map(depth: np.ndarray, path) -> None:
    """Quantize a depth map into a 16-bit PNG plus a scale/offset sidecar.

    NaN depths (the unknown label) encode as 0; finite depths map to
    1..65535 over their value range.  Re-reading reproduces the quantized
    values exactly, so a second write round-trips bit-identically.
    """
    path = Path(path)
    d = np.asarray(depth, dtype=np.float64)
    finite = np.isfinite(d)
    if finite.any():
        offset = float(d[finite].min())
        span = float(d[finite].max()) - offset
        scale = span / _DEPTH_LEVELS if span > 0 else 1.0
    else:
        offset, scale = 0.0, 1.0
    codes = np.zeros(d.shape, dtype=np.uint16)
    if finite.any():
        q = np.rint((d[finite] - offset) / scale).astype(np.int64)
        codes[finite] = np.clip(q, 0, _DEPTH_LEVELS) + 1
    Image.fromarray(codes, mode="I;16").save(path, format="PNG")
    Path(str(path) + ".meta").write_text(f"offset = {offset:.17g}\nscale = {scale:.17g}\n")


def read_depth_map(path) -> np.ndarray:
    path = Path(path)
    meta_path = Path(str(path) + ".meta")
    if not path.exists() or not meta_path.exists():
        raise DatasetError(f"depth map or sidecar missing: {path}")
    meta = dict(
        (k.strip(), float(v))
        for k, _, v in (line.partition("=") for line in meta_path.read_text().splitlines() if line.strip())
    )
    codes = np.asarray(Image.open(path), dtype=np.int64)
    depth = meta["offset"] + (codes - 1) * meta["scale"]
    depth[codes == 0] = np.nan
    return depth


def write_mask(mask: np.ndarray, path) -> None:
    """Binary mask as an 8-bit PNG (0 / 255)."""
    img = (np.asarray(mask, dtype=bool) * np.uint8(255)).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path, format="PNG")


def read_mask(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L")) > 0


def write_region_debug(mask: RegionMask, path) -> None:
    """Region debug dump: 0 outside, 128 outer band, 255 inner."""
    img = np.zeros(mask.codes.shape, dtype=np.uint8)
    img[mask.codes == OUTER] = 128
    img[mask.codes == INNER] = 255
    Image.fromarray(img, mode="L").save(path, format="PNG")


def write_cloud(points: np.ndarray, path, normals: np.ndarray | None = None, faces: np.ndarray | None = None) -> None:
    """ASCII PLY point cloud, optionally with normals and triangle faces."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(pts)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        if normals is not None:
            fh.write("property float nx\nproperty float ny\nproperty float nz\n")
        if faces is not None:
            fh.write(f"element face {len(faces)}\n")
            fh.write("property list uchar int vertex_indices\n")
        fh.write("end_header\n")
        if normals is None:
            for p in pts:
                fh.write(f"{p[0]:.8g} {p[1]:.8g} {p[2]:.8g}\n")
        else:
            nrm = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
            for p, n in zip(pts, nrm):
                fh.write(
                    f"{p[0]:.8g} {p[1]:.8g} {p[2]:.8g} {n[0]:.6g} {n[1]:.6g} {n[2]:.6g}\n"
                )
        if faces is not None:
            for f in np.asarray(faces, dtype=np.int64).reshape(-1, 3):
                fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


def read_cloud_vertex_count(path) -> int:
    with open(path) as fh:
        for line in fh:
            m = re.match(r"element vertex (\d+)", line)
            if m:
                return int(m.group(1))
    raise DatasetError(f"no vertex element in {path}")


def write_metrics(metrics: dict, path) -> None:
    """Key-value metrics report, one metric per line."""
    with open(path, "w") as fh:
        for key, value in metrics.items():
            if isinstance(value, float):
                fh.write(f"{key} = {value:.6f}\n")
            else:
                fh.write(f"{key} = {value}\n")


def read_metrics(path) -> dict[str, float]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" not in line:
            continue
        key, _, val = line.partition("=")
        out[key.strip()] = float(val)
    return out


# --- sparse matches ----------------------------------------------------------


def load_matches(path) -> SparseCloud:
    """One 3D point per line: ``X Y Z n (cam u v) * n``."""
    points = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        toks = line.split()
        try:
            x, y, z = float(toks[0]), float(toks[1]), float(toks[2])
            n = int(toks[3])
            obs = {}
            for i in range(n):
                cam = int(toks[4 + 3 * i])
                u = float(toks[5 + 3 * i])
                v = float(toks[6 + 3 * i])
                obs[cam] = (u, v)
        except (IndexError, ValueError) as exc:
            raise DatasetError(f"{path}:{lineno}: malformed match line") from exc
        points.append(SparsePoint(position=np.array([x, y, z]), observations=obs))
    return SparseCloud(points=points)


def write_matches(cloud: SparseCloud, path) -> None:
    with open(path, "w") as fh:
        for p in cloud.points:
            obs = sorted(p.observations.items())
            parts = [f"{p.position[0]:.17g} {p.position[1]:.17g} {p.position[2]:.17g} {len(obs)}"]
            for cam, (u, v) in obs:
                parts.append(f"{cam} {u:.17g} {v:.17g}")
            fh.write(" ".join(parts) + "\n")
