"""Geometric primitives shared by the whole pipeline.

Conventions: right-handed sensor frame with x forward, y left, z up.
Azimuth is measured from +x toward +y, elevation from the xy-plane
toward +z. Boxes are yaw-only (heading about z), matching driving
dataset annotations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

CLASS_LABELS = ("vehicle", "pedestrian", "cyclist", "other")

_CHANNELS = ("intensity", "elongation", "normals", "beam_id")


def wrap_angle(a):
    """Wrap angle(s) into [-pi, pi)."""
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


def yaw_rotation(yaw: float) -> np.ndarray:
    """3x3 rotation about +z by `yaw` radians."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class PointCloud:
    """Columnar point set: xyz in meters plus optional per-point channels.

    Immutable after construction; arrays are copied and marked read-only
    so clouds can be shared freely across threads.
    """

    xyz: np.ndarray
    intensity: np.ndarray | None = None
    elongation: np.ndarray | None = None
    normals: np.ndarray | None = None
    beam_id: np.ndarray | None = None

    def __post_init__(self):
        xyz = np.array(self.xyz, dtype=np.float64)
        if xyz.size == 0:
            xyz = xyz.reshape(0, 3)
        if xyz.ndim != 2 or xyz.shape[1] != 3:
            raise ValueError(f"xyz must have shape (N, 3), got {xyz.shape}")
        if not np.all(np.isfinite(xyz)):
            raise ValueError("xyz contains non-finite coordinates")
        object.__setattr__(self, "xyz", _frozen(xyz))
        n = len(xyz)

        for name in ("intensity", "elongation"):
            ch = getattr(self, name)
            if ch is None:
                continue
            ch = np.array(ch, dtype=np.float64)
            if ch.shape != (n,):
                raise ValueError(f"{name} must have shape ({n},), got {ch.shape}")
            object.__setattr__(self, name, _frozen(ch))

        if self.normals is not None:
            nr = np.array(self.normals, dtype=np.float64)
            if nr.size == 0:
                nr = nr.reshape(0, 3)
            if nr.shape != (n, 3):
                raise ValueError(f"normals must have shape ({n}, 3), got {nr.shape}")
            if n and np.max(np.abs(np.linalg.norm(nr, axis=1) - 1.0)) > 1e-6:
                raise ValueError("normals must be unit vectors (within 1e-6)")
            object.__setattr__(self, "normals", _frozen(nr))

        if self.beam_id is not None:
            b = np.array(self.beam_id)
            if b.shape != (n,):
                raise ValueError(f"beam_id must have shape ({n},), got {b.shape}")
            object.__setattr__(self, "beam_id", _frozen(b.astype(np.int64)))

    def __len__(self) -> int:
        return len(self.xyz)

    @property
    def channel_names(self) -> tuple[str, ...]:
        return tuple(c for c in _CHANNELS if getattr(self, c) is not None)

    def select(self, index) -> "PointCloud":
        """Subset by boolean mask or index array; all channels follow."""
        kw = {c: getattr(self, c)[index] for c in self.channel_names}
        return PointCloud(self.xyz[index], **kw)

    def with_channels(self, **channels) -> "PointCloud":
        """Copy of this cloud with the given channels replaced or added."""
        return replace(self, **channels)

    @staticmethod
    def empty(like: "PointCloud | None" = None) -> "PointCloud":
        kw = {}
        if like is not None:
            for c in like.channel_names:
                width = getattr(like, c).shape[1:] if getattr(like, c).ndim > 1 else ()
                kw[c] = np.zeros((0,) + width)
        return PointCloud(np.zeros((0, 3)), **kw)

    @staticmethod
    def concatenate(clouds: Sequence["PointCloud"]) -> "PointCloud":
        """Concatenate clouds; optional channels survive only if present in
        every input (mixed-schema inputs degrade to the common subset)."""
        if not clouds:
            raise ValueError("cannot concatenate zero clouds")
        xyz = np.concatenate([c.xyz for c in clouds])
        common = set(clouds[0].channel_names)
        for c in clouds[1:]:
            common &= set(c.channel_names)
        kw = {name: np.concatenate([getattr(c, name) for c in clouds]) for name in common}
        return PointCloud(xyz, **kw)


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) pose: p_out = rotation @ p_in + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9:
            raise ValueError("rotation is not orthonormal (R^T R != I within 1e-9)")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation must have det +1 (proper rotation)")
        object.__setattr__(self, "rotation", _frozen(r))
        object.__setattr__(self, "translation", _frozen(t))

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected 4x4 matrix, got {m.shape}")
        return RigidTransform(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self.compose(other)).apply(p) == self.apply(other.apply(p))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)


@dataclass(frozen=True)
class OrientedBox3:
    """7-DoF box: center, length/width/height dims, yaw about z."""

    center: np.ndarray
    dims: np.ndarray
    yaw: float
    track_id: str = ""
    class_label: str = "other"

    def __post_init__(self):
        c = np.array(self.center, dtype=np.float64).reshape(3)
        d = np.array(self.dims, dtype=np.float64).reshape(3)
        if np.any(d <= 0):
            raise ValueError(f"box dims must be strictly positive, got {d}")
        if self.class_label not in CLASS_LABELS:
            raise ValueError(f"unknown class label {self.class_label!r}")
        object.__setattr__(self, "center", _frozen(c))
        object.__setattr__(self, "dims", _frozen(d))
        object.__setattr__(self, "yaw", float(wrap_angle(self.yaw)))

    def pose(self) -> RigidTransform:
        """Box frame -> parent frame."""
        return RigidTransform(yaw_rotation(self.yaw), self.center)

    def transformed(self, t: RigidTransform) -> "OrientedBox3":
        """Box expressed in the frame `t` maps into.

        The new yaw is the heading of the rotated box x-axis projected to
        the xy-plane; exact whenever t's rotation is about z.
        """
        new_center = t.apply(self.center)
        x_axis = t.rotation @ yaw_rotation(self.yaw)[:, 0]
        new_yaw = math.atan2(x_axis[1], x_axis[0])
        return replace(self, center=new_center, yaw=new_yaw)


@dataclass(frozen=True)
class SphericalDirection:
    """Direction (azimuth, elevation) with optional depth in meters."""

    azimuth: float
    elevation: float
    depth: float | None = None

    def __post_init__(self):
        el = float(self.elevation)
        if not -math.pi / 2 - 1e-12 <= el <= math.pi / 2 + 1e-12:
            raise ValueError(f"elevation {el} outside [-pi/2, pi/2]")
        object.__setattr__(self, "azimuth", float(wrap_angle(self.azimuth)))
        object.__setattr__(self, "elevation", min(max(el, -math.pi / 2), math.pi / 2))
        if self.depth is not None:
            d = float(self.depth)
            if d < 0:
                raise ValueError(f"depth must be >= 0, got {d}")
            object.__setattr__(self, "depth", d)


def transform_cloud(cloud: PointCloud, t: RigidTransform) -> PointCloud:
    """Rigidly move a cloud: positions get R p + t, normals get R n."""
    kw = {c: getattr(cloud, c) for c in cloud.channel_names}
    if cloud.normals is not None:
        kw["normals"] = cloud.normals @ t.rotation.T
    return PointCloud(t.apply(cloud.xyz), **kw)


def crop_by_box(
    cloud: PointCloud,
    box: OrientedBox3,
    enlargement: Sequence[float] = (0.0, 0.0, 0.0),
) -> tuple[PointCloud, PointCloud]:
    """Partition a cloud into (inside, outside) of an enlarged box.

    A point is inside iff its box-frame coordinates satisfy
    |p_k| <= (dims_k + enlargement_k) / 2 on every axis.
    """
    margin = np.asarray(enlargement, dtype=np.float64).reshape(3)
    if np.any(margin < 0):
        raise ValueError(f"enlargement must be non-negative, got {margin}")
    half = (box.dims + margin) / 2.0
    local = (cloud.xyz - box.center) @ yaw_rotation(box.yaw)
    inside = np.all(np.abs(local) <= half, axis=1)
    return cloud.select(inside), cloud.select(~inside)


def box_interior_mask(
    cloud: PointCloud,
    box: OrientedBox3,
    enlargement: Sequence[float] = (0.0, 0.0, 0.0),
) -> np.ndarray:
    """Boolean inside-mask for `crop_by_box` semantics, without copying."""
    margin = np.asarray(enlargement, dtype=np.float64).reshape(3)
    if np.any(margin < 0):
        raise ValueError(f"enlargement must be non-negative, got {margin}")
    half = (box.dims + margin) / 2.0
    local = (cloud.xyz - box.center) @ yaw_rotation(box.yaw)
    return np.all(np.abs(local) <= half, axis=1)


def cartesian_to_spherical(p: Sequence[float]) -> SphericalDirection:
    """Spherical direction of a single point; the zero vector has none."""
    x, y, z = np.asarray(p, dtype=np.float64).reshape(3)
    d = math.sqrt(x * x + y * y + z * z)
    if d == 0.0:
        raise ValueError("zero vector has no spherical direction")
    return SphericalDirection(math.atan2(y, x), math.asin(z / d), d)


def spherical_to_cartesian(s: SphericalDirection) -> np.ndarray:
    d = 1.0 if s.depth is None else s.depth
    ce = math.cos(s.elevation)
    return d * np.array(
        [ce * math.cos(s.azimuth), ce * math.sin(s.azimuth), math.sin(s.elevation)]
    )


def spherical_coords(xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized (depth, azimuth, elevation) for an (N, 3) array.

    Zero-depth rows get azimuth 0 and elevation 0 so callers can mask
    them out by depth without tripping over NaNs.
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    d = np.linalg.norm(xyz, axis=1)
    az = np.arctan2(xyz[:, 1], xyz[:, 0])
    safe = np.where(d > 0, d, 1.0)
    el = np.arcsin(np.clip(xyz[:, 2] / safe, -1.0, 1.0))
    el = np.where(d > 0, el, 0.0)
    return d, az, el


def unit_directions(azimuth: np.ndarray, elevation: np.ndarray) -> np.ndarray:
    """(N, 3) unit vectors from azimuth/elevation arrays."""
    az = np.asarray(azimuth, dtype=np.float64)
    el = np.asarray(elevation, dtype=np.float64)
    ce = np.cos(el)
    return np.stack([ce * np.cos(az), ce * np.sin(az), np.sin(el)], axis=-1)


def ground_pixel_width(h: float, l: float, delta: float) -> float:
    """Ground footprint length of one range-image pixel.

    For a sensor at height h looking at flat ground a horizontal distance
    l away, a pixel spanning `delta` radians of elevation covers roughly
    (h^2 + l^2) * delta / h meters of ground. Quantifies how coarse the
    vertical resolution is at grazing incidence.
    """
    if h <= 0:
        raise ValueError(f"sensor height must be > 0, got {h}")
    if l < 0:
        raise ValueError(f"horizontal distance must be >= 0, got {l}")
    if delta <= 0:
        raise ValueError(f"pixel elevation span must be > 0, got {delta}")
    return (h * h + l * l) * delta / h
