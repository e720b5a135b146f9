"""Dense background map and per-object asset library from a labeled drive.

Foreground object points are cropped out of every frame (with enlarged
boxes for moving objects whose annotations are less reliable), the
remainder is accumulated in the global frame, then voxel downsampling and
radius outlier removal shrink and clean the map. Object clusters from all
frames of a track are returned to an x-axis-aligned box frame and merged,
with ICP refinement when both sides have enough points for it to help.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .core import (
    OrientedBox3,
    PointCloud,
    RigidTransform,
    box_interior_mask,
    crop_by_box,
    transform_cloud,
)
from .ingest import FrameRecord, SequenceDataset, read_cloud, write_cloud
from .raycast import estimate_normals

DEFAULT_MOVEMENT_THRESHOLD = 0.5  # meters of box-center motion
DEFAULT_DYNAMIC_MARGIN = (0.1, 0.1, 0.1)
DEFAULT_ICP_MIN_POINTS = 200


class ReconstructionError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrackObservation:
    frame_index: int
    box: OrientedBox3  # global frame
    cloud: PointCloud  # box frame


@dataclass(frozen=True)
class ObjectTrack:
    track_id: str
    class_label: str
    observations: tuple[TrackObservation, ...]

    def __post_init__(self):
        obs = tuple(self.observations)
        if not obs:
            raise ValueError("a track needs at least one observation")
        if any(o.box.track_id != self.track_id for o in obs):
            raise ValueError("observation boxes must share the track id")
        object.__setattr__(self, "observations", obs)


@dataclass(frozen=True)
class ObjectAsset:
    """Merged object cloud in an x-axis-aligned frame centered at origin."""

    track_id: str
    class_label: str
    cloud: PointCloud
    canonical_box: OrientedBox3
    source: str  # "reconstructed" | "mesh_sampled"
    provenance: tuple[str, ...] = ()

    def __post_init__(self):
        if self.source not in ("reconstructed", "mesh_sampled"):
            raise ValueError(f"unknown asset source {self.source!r}")
        box = self.canonical_box
        if box.yaw != 0.0 or np.any(box.center != 0.0):
            raise ValueError("canonical box must sit at the origin with zero yaw")
        if len(self.cloud):
            overshoot = np.abs(self.cloud.xyz).max(axis=0) - box.dims / 2.0
            if np.any(overshoot > 0.01):
                raise ValueError("asset cloud spills out of its canonical box (> 1 cm)")
        object.__setattr__(self, "provenance", tuple(self.provenance))


@dataclass(frozen=True)
class BackgroundMap:
    cloud: PointCloud  # global frame
    provenance: Mapping[str, object]


@dataclass(frozen=True)
class EnlargementPolicy:
    """Per-axis crop margins; dynamic tracks get the larger margin."""

    dynamic_track_ids: frozenset[str] = frozenset()
    dynamic_margin: tuple[float, float, float] = DEFAULT_DYNAMIC_MARGIN
    static_margin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def margin_for(self, track_id: str) -> tuple[float, float, float]:
        if track_id in self.dynamic_track_ids:
            return self.dynamic_margin
        return self.static_margin


def extract_tracks(seq: SequenceDataset) -> list[ObjectTrack]:
    """Group box annotations by track id and crop each frame's cluster.

    Observation clouds are tightly cropped (no enlargement) and expressed
    in the box frame; boxes are lifted to the global frame via the frame
    pose.
    """
    by_track: dict[str, list[TrackObservation]] = {}
    labels: dict[str, str] = {}
    for fi, frame in enumerate(seq.frames):
        for box in frame.boxes:
            inside, _ = crop_by_box(frame.cloud, box)
            local = transform_cloud(inside, box.pose().inverse())
            obs = TrackObservation(fi, box.transformed(frame.sensor_pose), local)
            by_track.setdefault(box.track_id, []).append(obs)
            labels[box.track_id] = box.class_label
    return [
        ObjectTrack(tid, labels[tid], tuple(obs))
        for tid, obs in sorted(by_track.items())
    ]


def classify_dynamic(track: ObjectTrack, movement_threshold: float = DEFAULT_MOVEMENT_THRESHOLD) -> bool:
    """True iff the track's box center moves more than the threshold.

    Motion is the maximum pairwise displacement of global-frame box
    centers, so slow drift over many frames still counts.
    """
    centers = np.array([o.box.center for o in track.observations])
    if len(centers) < 2:
        return False
    diff = centers[:, None, :] - centers[None, :, :]
    return float(np.sqrt((diff**2).sum(-1)).max()) > movement_threshold


def remove_foreground(frame: FrameRecord, policy: EnlargementPolicy) -> PointCloud:
    """Frame cloud minus the union of (enlarged) annotated box interiors."""
    if not frame.boxes:
        return frame.cloud
    drop = np.zeros(len(frame.cloud), dtype=bool)
    for box in frame.boxes:
        drop |= box_interior_mask(frame.cloud, box, policy.margin_for(box.track_id))
    return frame.cloud.select(~drop)


def dynamic_policy(
    seq: SequenceDataset,
    movement_threshold: float = DEFAULT_MOVEMENT_THRESHOLD,
    dynamic_margin: tuple[float, float, float] = DEFAULT_DYNAMIC_MARGIN,
) -> EnlargementPolicy:
    """Classify every track in the sequence and build the crop policy."""
    dynamic = {
        t.track_id
        for t in extract_tracks(seq)
        if classify_dynamic(t, movement_threshold)
    }
    return EnlargementPolicy(frozenset(dynamic), dynamic_margin)


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """One point per occupied voxel: the centroid, with channels averaged.

    Normals are re-normalized after averaging (falling back to the
    voxel's first member when opposing normals cancel); beam ids average
    to the nearest integer.
    """
    if voxel <= 0:
        raise ValueError(f"voxel size must be > 0, got {voxel}")
    if len(cloud) <= 1:
        return cloud
    keys = np.floor(cloud.xyz / voxel).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    n_vox = len(uniq)
    counts = np.bincount(inverse, minlength=n_vox).astype(np.float64)

    def mean_per_voxel(values: np.ndarray) -> np.ndarray:
        if values.ndim == 1:
            return np.bincount(inverse, weights=values, minlength=n_vox) / counts
        return np.stack(
            [np.bincount(inverse, weights=values[:, j], minlength=n_vox) / counts
             for j in range(values.shape[1])],
            axis=1,
        )

    kw = {}
    for name in cloud.channel_names:
        vals = getattr(cloud, name).astype(np.float64)
        mean = mean_per_voxel(vals)
        if name == "normals":
            norm = np.linalg.norm(mean, axis=1)
            bad = norm < 1e-9
            if np.any(bad):
                first = np.full(n_vox, -1, dtype=np.int64)
                # keep the first (lowest point index) member's normal
                for i in range(len(inverse) - 1, -1, -1):
                    first[inverse[i]] = i
                mean[bad] = getattr(cloud, name)[first[bad]]
                norm = np.linalg.norm(mean, axis=1)
            mean /= norm[:, None]
        elif name == "beam_id":
            mean = np.rint(mean).astype(np.int64)
        kw[name] = mean
    return PointCloud(mean_per_voxel(cloud.xyz), **kw)


def radius_outlier_removal(cloud: PointCloud, radius: float, min_neighbors: int) -> PointCloud:
    """Keep points with at least `min_neighbors` others within `radius`."""
    if radius <= 0:
        raise ValueError(f"radius must be > 0, got {radius}")
    if min_neighbors < 1:
        raise ValueError(f"min_neighbors must be >= 1, got {min_neighbors}")
    if len(cloud) == 0:
        return cloud
    tree = cKDTree(cloud.xyz)
    counts = tree.query_ball_point(cloud.xyz, r=radius, return_length=True)
    return cloud.select(counts - 1 >= min_neighbors)  # query includes self


def accumulate_background(
    seq: SequenceDataset,
    voxel: float = 0.05,
    outlier_radius: float = 0.3,
    min_neighbors: int = 3,
    policy: EnlargementPolicy | None = None,
    movement_threshold: float = DEFAULT_MOVEMENT_THRESHOLD,
    workers: int = 1,
) -> BackgroundMap:
    """Foreground-free global map of the whole sequence.

    Per-frame work runs in a thread pool; frames are merged in order so
    the result is identical for any worker count.
    """
    if policy is None:
        policy = dynamic_policy(seq, movement_threshold)

    def clean(frame: FrameRecord) -> PointCloud:
        return transform_cloud(remove_foreground(frame, policy), frame.sensor_pose)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(clean, seq.frames))
    else:
        parts = [clean(f) for f in seq.frames]

    merged = PointCloud.concatenate(parts)
    merged = voxel_downsample(merged, voxel)
    merged = radius_outlier_removal(merged, outlier_radius, min_neighbors)
    if len(merged) == 0:
        raise ReconstructionError(
            "background map is empty after filtering; relax outlier removal "
            "or check the annotations"
        )
    provenance = {
        "sensor_name": seq.sensor_name,
        "n_frames": len(seq.frames),
        "voxel": voxel,
        "outlier_radius": outlier_radius,
        "min_neighbors": min_neighbors,
        "movement_threshold": movement_threshold,
        "dynamic_margin": list(policy.dynamic_margin),
        "n_dynamic_tracks": len(policy.dynamic_track_ids),
    }
    return BackgroundMap(merged, provenance)


# ---------------------------------------------------------------------------
# ICP
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IcpParams:
    max_iter: int = 50
    tol: float = 1e-10
    normal_k: int = 16
    rejection_factor: float = 3.0  # drop pairs beyond factor * median distance


@dataclass(frozen=True)
class IcpResult:
    transform: RigidTransform
    residual: float  # final RMS (point-to-plane, or Euclidean in fallback mode)
    iterations: int
    converged: bool
    point_to_point: bool  # degenerate-normal fallback engaged


def _rotation_from_vector(w: np.ndarray) -> np.ndarray:
    """Rodrigues rotation for a rotation vector."""
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return np.eye(3)
    k = w / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * (kx @ kx)


def _orthonormalize(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def _kabsch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    r = vt.T @ u.T
    if np.linalg.det(r) < 0:
        vt[-1, :] *= -1
        r = vt.T @ u.T
    return r, cd - r @ cs


def icp_align(
    source: PointCloud,
    target: PointCloud,
    init: RigidTransform | None = None,
    params: IcpParams = IcpParams(),
) -> IcpResult:
    """Iterative closest point with point-to-plane residuals.

    Correspondences farther than `rejection_factor` times the median
    nearest-neighbor distance are discarded each iteration. When the
    target's normals span fewer than three directions (e.g. a single
    plane) the point-to-plane system is rank deficient, so the solver
    falls back to point-to-point Kabsch alignment and flags it.
    """
    if len(source) < 10 or len(target) < 10:
        raise ValueError("icp_align needs at least 10 points on each side")
    init = RigidTransform.identity() if init is None else init

    k = min(params.normal_k, len(target))
    target_n, n_valid = estimate_normals(target, k, sensor_origin=target.xyz.mean(axis=0))
    normals = target_n.normals

    cov = (normals[n_valid].T @ normals[n_valid]) if np.any(n_valid) else np.zeros((3, 3))
    evals = np.linalg.eigvalsh(cov)
    point_to_point = evals[0] < 1e-6 * max(evals[2], 1e-30)

    tree = cKDTree(target.xyz)
    r_cur = init.rotation.copy()
    t_cur = init.translation.copy()
    iterations = 0
    converged = False

    for iterations in range(1, params.max_iter + 1):
        moved = source.xyz @ r_cur.T + t_cur
        dist, nn = tree.query(moved)
        med = np.median(dist)
        keep = dist <= params.rejection_factor * med if med > 0 else np.ones(len(dist), bool)
        p = moved[keep]
        q = target.xyz[nn[keep]]

        if point_to_point:
            dr, dt = _kabsch(p, q)
        else:
            n = normals[nn[keep]]
            ok = n_valid[nn[keep]]
            p2, q2, n2 = p[ok], q[ok], n[ok]
            a = np.concatenate([np.cross(p2, n2), n2], axis=1)
            b = np.einsum("ij,ij->i", q2 - p2, n2)
            x, *_ = np.linalg.lstsq(a, b, rcond=None)
            dr = _rotation_from_vector(x[:3])
            dt = x[3:]

        r_cur = dr @ r_cur
        t_cur = dr @ t_cur + dt
        step = np.linalg.norm(dt) + np.linalg.norm(dr - np.eye(3))
        if step < params.tol:
            converged = True
            break

    moved = source.xyz @ r_cur.T + t_cur
    dist, nn = tree.query(moved)
    med = np.median(dist)
    keep = dist <= params.rejection_factor * med if med > 0 else np.ones(len(dist), bool)
    if point_to_point:
        residual = float(np.sqrt(np.mean(dist[keep] ** 2)))
    else:
        n = normals[nn[keep]]
        plane_d = np.einsum("ij,ij->i", moved[keep] - target.xyz[nn[keep]], n)
        residual = float(np.sqrt(np.mean(plane_d**2)))

    transform = RigidTransform(_orthonormalize(r_cur), t_cur)
    return IcpResult(transform, residual, iterations, converged, point_to_point)


def cloud_rms(a: PointCloud, b: PointCloud) -> float:
    """RMS nearest-neighbor distance from a's points to b."""
    if len(a) == 0 or len(b) == 0:
        raise ValueError("cloud_rms requires non-empty clouds")
    dist, _ = cKDTree(b.xyz).query(a.xyz)
    return float(np.sqrt(np.mean(dist**2)))


def reconstruct_object(
    track: ObjectTrack,
    icp_min_points: int = DEFAULT_ICP_MIN_POINTS,
    icp_params: IcpParams = IcpParams(),
) -> ObjectAsset:
    """Merge a track's box-frame clusters into one asset.

    Each new cluster is aligned to the running accumulation with ICP
    only when both sides exceed `icp_min_points`; the refined pose is
    kept only if it actually lowers the cluster-to-accumulation RMS, so
    the merge never does worse than plain box-frame stacking.
    """
    obs = sorted(track.observations, key=lambda o: o.frame_index)
    notes = []
    merged = obs[0].cloud
    for o in obs[1:]:
        cluster = o.cloud
        if len(cluster) == 0:
            continue
        if len(merged) == 0:
            merged = cluster
            continue
        use_icp = len(merged) > icp_min_points and len(cluster) > icp_min_points
        if use_icp:
            before = cloud_rms(cluster, merged)
            result = icp_align(cluster, merged, params=icp_params)
            aligned = transform_cloud(cluster, result.transform)
            after = cloud_rms(aligned, merged)
            if after < before:
                cluster = aligned
                notes.append(f"frame {o.frame_index}: icp rms {before:.4f}->{after:.4f}")
            else:
                notes.append(f"frame {o.frame_index}: icp rejected ({before:.4f}->{after:.4f})")
        merged = PointCloud.concatenate([merged, cluster])

    base_dims = np.max([o.box.dims for o in obs], axis=0)
    if len(merged):
        needed = 2.0 * np.abs(merged.xyz).max(axis=0)
        base_dims = np.maximum(base_dims, needed)
    box = OrientedBox3(
        np.zeros(3), base_dims, 0.0,
        track_id=track.track_id, class_label=track.class_label,
    )
    return ObjectAsset(track.track_id, track.class_label, merged, box,
                       source="reconstructed", provenance=tuple(notes))


# ---------------------------------------------------------------------------
# persistence (asset library and background map directories)
# ---------------------------------------------------------------------------


def save_asset(asset: ObjectAsset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_cloud(asset.cloud, directory / f"{asset.track_id}.lfpc")
    meta = {
        "track_id": asset.track_id,
        "class": asset.class_label,
        "dims": asset.canonical_box.dims.tolist(),
        "source": asset.source,
        "provenance": list(asset.provenance),
    }
    meta_path = directory / f"{asset.track_id}.json"
    meta_path.write_text(json.dumps(meta, indent=2) + "\n")
    return meta_path


def load_asset(directory, track_id: str) -> ObjectAsset:
    directory = Path(directory)
    meta = json.loads((directory / f"{track_id}.json").read_text())
    cloud = read_cloud(directory / f"{track_id}.lfpc")
    box = OrientedBox3(np.zeros(3), meta["dims"], 0.0,
                       track_id=meta["track_id"], class_label=meta["class"])
    return ObjectAsset(meta["track_id"], meta["class"], cloud, box,
                       source=meta["source"], provenance=tuple(meta.get("provenance", ())))


def load_asset_library(directory) -> dict[str, ObjectAsset]:
    directory = Path(directory)
    library = {}
    for meta_path in sorted(directory.glob("*.json")):
        asset = load_asset(directory, meta_path.stem)
        library[asset.track_id] = asset
    return library
