"""LiDAR frame simulation against a dense point-cloud scene.

The scene is treated as a sampled 2D surface. Rays are resolved on a
spherical range-image grid: every scene point falls into one azimuth x
elevation bin (a frustum), and a ray reads the bin it points into. Two
resolution strategies are provided:

- first-peak averaging: keep the bin members within ``peak_width`` meters
  of the bin's closest depth (the first depth peak, i.e. the surface the
  ray hits first) and blend their coordinates and features with inverse
  angular-distance weights centered on the ray. Averaging suppresses
  reconstruction noise and synthesizes sensor features for arbitrary ray
  directions.
- closest point: copy the single nearest bin member verbatim. Cheaper,
  noisier, and tied to one point per pixel.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .core import (
    PointCloud,
    RigidTransform,
    spherical_coords,
    transform_cloud,
    unit_directions,
    wrap_angle,
)

# angular distance below which a peak point is taken to coincide with the ray
COINCIDENT_ANGLE = 1e-12

_FEATURE_CHANNELS = ("intensity", "elongation")


@dataclass(frozen=True)
class RaycastConfig:
    """Range-image geometry and averaging parameters.

    The azimuth span is centered on +x; elevation covers
    [elevation_min, elevation_max). Bin assignment is by floor, so a
    value on an interior bin boundary lands in the higher-index bin.
    Azimuth wraps modulo the image width when the span is a full circle;
    elevation does not wrap.
    """

    image_width: int = 2560
    image_height: int = 128
    peak_width: float = 0.20
    idw_power: float = 1.0
    azimuth_span: float = 2.0 * math.pi
    elevation_span: tuple[float, float] = (-math.pi / 2, math.pi / 2)

    def __post_init__(self):
        if self.image_width < 1 or self.image_height < 1:
            raise ValueError("image dimensions must be >= 1")
        if self.peak_width <= 0:
            raise ValueError(f"peak_width must be > 0, got {self.peak_width}")
        if self.idw_power < 0:
            raise ValueError(f"idw_power must be >= 0, got {self.idw_power}")
        if not 0 < self.azimuth_span <= 2.0 * math.pi + 1e-12:
            raise ValueError(f"azimuth_span must be in (0, 2pi], got {self.azimuth_span}")
        lo, hi = self.elevation_span
        if not (-math.pi / 2 <= lo < hi <= math.pi / 2):
            raise ValueError(f"bad elevation span {self.elevation_span}")
        object.__setattr__(self, "elevation_span", (float(lo), float(hi)))

    @property
    def azimuth_start(self) -> float:
        return -self.azimuth_span / 2.0

    @property
    def azimuth_step(self) -> float:
        return self.azimuth_span / self.image_width

    @property
    def elevation_step(self) -> float:
        lo, hi = self.elevation_span
        return (hi - lo) / self.image_height

    @property
    def full_circle(self) -> bool:
        return self.azimuth_span >= 2.0 * math.pi - 1e-9

    def bin_indices(self, azimuth: np.ndarray, elevation: np.ndarray):
        """(col, row, in_fov) for azimuth/elevation arrays."""
        col = np.floor((azimuth - self.azimuth_start) / self.azimuth_step).astype(np.int64)
        row = np.floor((elevation - self.elevation_span[0]) / self.elevation_step).astype(np.int64)
        if self.full_circle:
            col = np.mod(col, self.image_width)
            az_ok = np.ones(col.shape, dtype=bool)
        else:
            az_ok = (col >= 0) & (col < self.image_width)
        in_fov = az_ok & (row >= 0) & (row < self.image_height)
        return col, row, in_fov

    def to_json_dict(self) -> dict:
        return {
            "image_width": self.image_width,
            "image_height": self.image_height,
            "peak_width": self.peak_width,
            "idw_power": self.idw_power,
            "azimuth_span": self.azimuth_span,
            "elevation_span": list(self.elevation_span),
        }

    @staticmethod
    def from_json_dict(d: dict) -> "RaycastConfig":
        kw = dict(d)
        if "elevation_span" in kw:
            kw["elevation_span"] = tuple(kw["elevation_span"])
        return RaycastConfig(**kw)


@dataclass(frozen=True)
class BeamTable:
    """Scan pattern: one (azimuth, elevation) per ray, plus range limit.

    `beam_id` tags each ray with a scanline/laser identity; it defaults
    to the ray index and is carried onto simulated points.
    """

    azimuth: np.ndarray
    elevation: np.ndarray
    max_range: float
    beam_id: np.ndarray | None = None

    def __post_init__(self):
        az = np.array(self.azimuth, dtype=np.float64).reshape(-1)
        el = np.array(self.elevation, dtype=np.float64).reshape(-1)
        if az.shape != el.shape:
            raise ValueError("azimuth and elevation must have equal length")
        if not (np.all(np.isfinite(az)) and np.all(np.isfinite(el))):
            raise ValueError("beam directions must be finite")
        if self.max_range <= 0:
            raise ValueError(f"max_range must be > 0, got {self.max_range}")
        bid = self.beam_id
        bid = np.arange(len(az), dtype=np.int64) if bid is None else np.array(bid, dtype=np.int64)
        if bid.shape != az.shape:
            raise ValueError("beam_id must match the number of rays")
        for name, arr in (("azimuth", wrap_angle(az)), ("elevation", el), ("beam_id", bid)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "max_range", float(self.max_range))

    def __len__(self) -> int:
        return len(self.azimuth)


def load_beam_table(path, max_range: float) -> BeamTable:
    """Read a JSON list of {azimuth_deg, elevation_deg[, beam_id]} rays."""
    rows = json.loads(Path(path).read_text())
    az = np.radians([r["azimuth_deg"] for r in rows])
    el = np.radians([r["elevation_deg"] for r in rows])
    bid = None
    if rows and "beam_id" in rows[0]:
        bid = np.array([r["beam_id"] for r in rows], dtype=np.int64)
    return BeamTable(az, el, max_range, beam_id=bid)


def save_beam_table(beams: BeamTable, path) -> Path:
    rows = [
        {"azimuth_deg": math.degrees(a), "elevation_deg": math.degrees(e), "beam_id": int(b)}
        for a, e, b in zip(beams.azimuth, beams.elevation, beams.beam_id)
    ]
    path = Path(path)
    path.write_text(json.dumps(rows) + "\n")
    return path


@dataclass(frozen=True)
class RangeImageGrid:
    """Scene points bucketed into range-image bins (CSR layout).

    Members of each bin are sorted by (depth, point index) so the first
    member is the bin's closest point and iteration order is
    deterministic regardless of how the grid was filled.
    """

    config: RaycastConfig
    point_index: np.ndarray  # (K,) indices into the source cloud, grouped by bin
    bin_start: np.ndarray  # (W*H + 1,) CSR offsets over flat bin = col*H + row
    depth: np.ndarray  # (K,) cached spherical coords, aligned with point_index
    azimuth: np.ndarray
    elevation: np.ndarray
    dropped: int  # points outside the FOV (or at zero depth)

    def flat_bin(self, col: int, row: int) -> int:
        return col * self.config.image_height + row

    def members(self, col: int, row: int) -> np.ndarray:
        b = self.flat_bin(col, row)
        return self.point_index[self.bin_start[b] : self.bin_start[b + 1]]

    def depth_image(self) -> np.ndarray:
        """(W, H) closest depth per bin, -1.0 where empty."""
        w, h = self.config.image_width, self.config.image_height
        img = np.full(w * h, -1.0)
        counts = np.diff(self.bin_start)
        occupied = counts > 0
        img[occupied] = self.depth[self.bin_start[:-1][occupied]]
        return img.reshape(w, h)


def project_to_grid(scene: PointCloud, config: RaycastConfig) -> RangeImageGrid:
    """Assign every in-FOV scene point to its range-image bin."""
    if len(scene) == 0:
        raise ValueError("cannot project an empty scene")
    d, az, el = spherical_coords(scene.xyz)
    col, row, in_fov = config.bin_indices(az, el)
    in_fov &= d > 0  # points at the sensor origin have no direction
    dropped = int(len(scene) - np.count_nonzero(in_fov))

    idx = np.nonzero(in_fov)[0]
    flat = col[idx] * config.image_height + row[idx]
    order = np.lexsort((idx, d[idx], flat))
    idx = idx[order]
    flat = flat[order]

    n_bins = config.image_width * config.image_height
    counts = np.bincount(flat, minlength=n_bins)
    bin_start = np.concatenate([[0], np.cumsum(counts)])
    return RangeImageGrid(
        config=config,
        point_index=idx,
        bin_start=bin_start,
        depth=d[idx],
        azimuth=az[idx],
        elevation=el[idx],
        dropped=dropped,
    )


def first_peak(depths: np.ndarray, peak_width: float) -> np.ndarray:
    """Mask of members in the closest depth peak [d_min, d_min + peak_width]."""
    depths = np.asarray(depths, dtype=np.float64)
    if depths.size == 0:
        raise ValueError("first_peak requires a non-empty bin")
    if peak_width <= 0:
        raise ValueError(f"peak_width must be > 0, got {peak_width}")
    return depths <= depths.min() + peak_width


def idw_weights(
    azimuth: np.ndarray,
    elevation: np.ndarray,
    ray_azimuth: float,
    ray_elevation: float,
    power: float = 1.0,
) -> np.ndarray:
    """Normalized inverse angular-distance weights of points around a ray.

    The weight of point i is 1/dist_i^power with
    dist_i = sqrt((az_i - az_ray)^2 + (el_i - el_ray)^2), normalized to
    sum to 1. A point angularly coincident with the ray takes all the
    weight (the continuous limit of the diverging inverse distance);
    power 0 degenerates to a plain mean.
    """
    daz = wrap_angle(np.asarray(azimuth, dtype=np.float64) - ray_azimuth)
    del_ = np.asarray(elevation, dtype=np.float64) - ray_elevation
    dist = np.hypot(daz, del_)
    w = np.zeros(dist.shape)
    hit = dist < COINCIDENT_ANGLE
    if np.any(hit):
        w[np.argmax(hit)] = 1.0
        return w
    if power == 0:
        w[:] = 1.0 / len(w)
        return w
    w = dist ** (-power)
    return w / w.sum()


def idw_average(
    azimuth: np.ndarray,
    elevation: np.ndarray,
    features: np.ndarray,
    ray_azimuth: float,
    ray_elevation: float,
    power: float = 1.0,
) -> np.ndarray:
    """Blend per-point feature rows (e.g. x, y, z, intensity) toward a ray."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    w = idw_weights(azimuth, elevation, ray_azimuth, ray_elevation, power)
    return w @ features


@dataclass(frozen=True)
class SimulatedFrame:
    """Raycasting output: at most one point per ray, in the sensor frame."""

    cloud: PointCloud
    ray_index: np.ndarray  # (P,) beam-table row that produced each point
    hit: np.ndarray  # (M,) per-beam return flag
    normal_valid: np.ndarray | None = None

    def __post_init__(self):
        ri = np.array(self.ray_index, dtype=np.int64)
        hit = np.array(self.hit, dtype=bool)
        if ri.shape != (len(self.cloud),):
            raise ValueError("ray_index length must match the cloud")
        if len(np.unique(ri)) != len(ri):
            raise ValueError("a ray may contribute at most one point")
        if int(hit.sum()) != len(ri):
            raise ValueError("hit count must match the number of points")
        ri.flags.writeable = False
        hit.flags.writeable = False
        object.__setattr__(self, "ray_index", ri)
        object.__setattr__(self, "hit", hit)
        if self.normal_valid is not None:
            nv = np.array(self.normal_valid, dtype=bool)
            if nv.shape != (len(self.cloud),):
                raise ValueError("normal_valid length must match the cloud")
            nv.flags.writeable = False
            object.__setattr__(self, "normal_valid", nv)


def _scene_in_sensor_frame(scene: PointCloud, sensor_pose: RigidTransform) -> PointCloud:
    return transform_cloud(scene, sensor_pose.inverse())


def raycast_fpa(
    scene: PointCloud,
    sensor_pose: RigidTransform,
    beams: BeamTable,
    config: RaycastConfig,
) -> SimulatedFrame:
    """First-peak-averaging raycast of a global-frame scene.

    Each beam reads its bin, screens the first depth peak, and takes the
    inverse-distance-weighted average of the peak's coordinates and
    feature channels. Beams with empty bins, out-of-FOV directions, or
    averaged depth beyond the beam table's max range produce no return.
    """
    local = _scene_in_sensor_frame(scene, sensor_pose)
    if len(local) == 0:
        return _empty_frame(local, beams)
    grid = project_to_grid(local, config)

    feat_names = [c for c in _FEATURE_CHANNELS if getattr(local, c) is not None]
    # columns: x, y, z, then optional feature channels
    table = np.concatenate(
        [local.xyz] + [getattr(local, c)[:, None] for c in feat_names], axis=1
    )

    col, row, in_fov = config.bin_indices(beams.azimuth, beams.elevation)
    h = config.image_height
    starts, ends = grid.bin_start[:-1], grid.bin_start[1:]

    points = []
    rays = []
    for m in np.nonzero(in_fov)[0]:
        b = col[m] * h + row[m]
        lo, hi = starts[b], ends[b]
        if lo == hi:
            continue
        depths = grid.depth[lo:hi]
        k = np.searchsorted(depths, depths[0] + config.peak_width, side="right")
        sel = grid.point_index[lo : lo + k]
        f = idw_average(
            grid.azimuth[lo : lo + k],
            grid.elevation[lo : lo + k],
            table[sel],
            beams.azimuth[m],
            beams.elevation[m],
            config.idw_power,
        )[0]
        if np.linalg.norm(f[:3]) > beams.max_range:
            continue
        points.append(f)
        rays.append(m)

    return _assemble_frame(points, rays, feat_names, beams, local)


def raycast_cp(
    scene: PointCloud,
    sensor_pose: RigidTransform,
    beams: BeamTable,
    config: RaycastConfig,
) -> SimulatedFrame:
    """Closest-point raycast baseline: copy each bin's nearest member."""
    local = _scene_in_sensor_frame(scene, sensor_pose)
    if len(local) == 0:
        return _empty_frame(local, beams)
    grid = project_to_grid(local, config)
    feat_names = [c for c in _FEATURE_CHANNELS if getattr(local, c) is not None]

    col, row, in_fov = config.bin_indices(beams.azimuth, beams.elevation)
    h = config.image_height
    starts, ends = grid.bin_start[:-1], grid.bin_start[1:]

    points = []
    rays = []
    for m in np.nonzero(in_fov)[0]:
        b = col[m] * h + row[m]
        lo, hi = starts[b], ends[b]
        if lo == hi or grid.depth[lo] > beams.max_range:
            continue
        i = grid.point_index[lo]  # members sorted by depth: first is closest
        points.append(
            np.concatenate([local.xyz[i], [getattr(local, c)[i] for c in feat_names]])
        )
        rays.append(m)

    return _assemble_frame(points, rays, feat_names, beams, local)


def _empty_frame(local: PointCloud, beams: BeamTable) -> SimulatedFrame:
    return SimulatedFrame(
        cloud=PointCloud.empty(),
        ray_index=np.zeros(0, dtype=np.int64),
        hit=np.zeros(len(beams), dtype=bool),
    )


def _assemble_frame(points, rays, feat_names, beams: BeamTable, local: PointCloud) -> SimulatedFrame:
    hit = np.zeros(len(beams), dtype=bool)
    if not points:
        return SimulatedFrame(PointCloud.empty(), np.zeros(0, dtype=np.int64), hit)
    data = np.asarray(points)
    rays = np.asarray(rays, dtype=np.int64)
    hit[rays] = True
    kw = {name: data[:, 3 + j] for j, name in enumerate(feat_names)}
    kw["beam_id"] = beams.beam_id[rays]
    return SimulatedFrame(PointCloud(data[:, :3], **kw), rays, hit)


def estimate_normals(
    cloud: PointCloud,
    k: int,
    sensor_origin=(0.0, 0.0, 0.0),
) -> tuple[PointCloud, np.ndarray]:
    """Per-point normals from a k-nearest-neighbor plane fit.

    The normal is the smallest-eigenvector of the neighborhood
    covariance, oriented so it faces the sensor origin. Returns the
    cloud with normals attached plus a validity mask; points whose
    neighborhoods are degenerate (collinear or coincident) get a
    placeholder normal pointing at the sensor and valid=False.
    """
    n = len(cloud)
    if not 3 <= k <= n:
        raise ValueError(f"need N >= k >= 3, got N={n}, k={k}")
    origin = np.asarray(sensor_origin, dtype=np.float64).reshape(3)

    tree = cKDTree(cloud.xyz)
    _, nbr = tree.query(cloud.xyz, k=k)
    nbr = nbr.reshape(n, k)
    hood = cloud.xyz[nbr]  # (n, k, 3)
    centered = hood - hood.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)  # ascending eigenvalues
    normals = evecs[:, :, 0]

    # collinear/coincident neighborhoods: no usable second spread direction
    valid = evals[:, 1] > np.maximum(1e-9 * evals[:, 2], 1e-18)

    to_sensor = origin - cloud.xyz
    flip = np.einsum("ni,ni->n", normals, to_sensor) < 0
    normals = np.where(flip[:, None], -normals, normals)

    if np.any(~valid):
        fallback = to_sensor[~valid]
        norms = np.linalg.norm(fallback, axis=1, keepdims=True)
        fallback = np.divide(fallback, norms, out=np.tile([[0.0, 0.0, 1.0]], (len(fallback), 1)), where=norms > 0)
        normals[~valid] = fallback

    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return cloud.with_channels(normals=normals), valid


def attach_normals(
    frame: SimulatedFrame, k: int = 16, sensor_origin=(0.0, 0.0, 0.0)
) -> SimulatedFrame:
    """Simulated frame with estimated normals and their validity mask."""
    if len(frame.cloud) == 0:
        return SimulatedFrame(frame.cloud, frame.ray_index, frame.hit,
                              normal_valid=np.zeros(0, dtype=bool))
    k = min(k, len(frame.cloud))
    if k < 3:
        # too few points to fit planes: everything invalid
        cloud, valid = frame.cloud, np.zeros(len(frame.cloud), dtype=bool)
        to_sensor = np.asarray(sensor_origin) - cloud.xyz
        norms = np.linalg.norm(to_sensor, axis=1, keepdims=True)
        normals = np.divide(to_sensor, norms, out=np.tile([[0.0, 0.0, 1.0]], (len(cloud), 1)), where=norms > 0)
        cloud = cloud.with_channels(normals=normals)
    else:
        cloud, valid = estimate_normals(frame.cloud, k, sensor_origin)
    return SimulatedFrame(cloud, frame.ray_index, frame.hit, normal_valid=valid)
