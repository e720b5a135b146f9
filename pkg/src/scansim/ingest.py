"""Dataset interchange: clouds, poses, box labels, sequence manifests.

Formats
-------
- clouds: ascii PLY (x, y, z and optional intensity/elongation) or the
  LFPC binary columnar format (magic ``LFPC``, version, point count,
  explicit channel list, float64 little-endian payloads). LFPC round
  trips are bit-exact; new channels need no version bump.
- poses: JSON 4x4 row-major matrices.
- labels: JSON-lines, one box per line with keys
  {frame, track_id, class, center, dims, yaw}.
- manifest: JSON with sensor name, max range, frame entries and an
  optional sequence-wide labels file.
- range images: PFM (portable float map), row-major over a (W, H) grid,
  -1.0 marking empty bins.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import CLASS_LABELS, OrientedBox3, PointCloud, RigidTransform

LFPC_MAGIC = b"LFPC"
LFPC_VERSION = 1

# channel name -> vector width
_LFPC_CHANNELS = {"xyz": 3, "intensity": 1, "elongation": 1, "normals": 3, "beam_id": 1}


class ParseError(ValueError):
    """Malformed cloud/range-image payload; `offset` is the failing byte."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class LoadError(ValueError):
    """Sequence-level load failure; `frame` names the offending frame."""

    def __init__(self, message: str, frame: int | None = None):
        if frame is not None:
            message = f"frame {frame}: {message}"
        super().__init__(message)
        self.frame = frame


@dataclass(frozen=True)
class FrameRecord:
    """One sensor frame: timestamp, pose, cloud and its box annotations."""

    timestamp: int  # microseconds
    sensor_pose: RigidTransform  # sensor -> global
    cloud: PointCloud  # sensor frame
    boxes: tuple[OrientedBox3, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "timestamp", int(self.timestamp))
        object.__setattr__(self, "boxes", tuple(self.boxes))


@dataclass(frozen=True)
class SequenceDataset:
    frames: tuple[FrameRecord, ...]
    sensor_name: str
    max_range: float

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise ValueError("sequence must contain at least one frame")
        schema = frames[0].cloud.channel_names
        for i, f in enumerate(frames):
            if i and f.timestamp <= frames[i - 1].timestamp:
                raise LoadError("timestamps must strictly increase", frame=i)
            if f.cloud.channel_names != schema:
                raise LoadError(
                    f"channel schema {f.cloud.channel_names} differs from "
                    f"first frame's {schema}",
                    frame=i,
                )
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "max_range", float(self.max_range))

    def __len__(self) -> int:
        return len(self.frames)


# ---------------------------------------------------------------------------
# clouds
# ---------------------------------------------------------------------------


def write_cloud(cloud: PointCloud, path, format: str = "binary-columnar") -> Path:
    path = Path(path)
    if format == "binary-columnar":
        data = _encode_lfpc(cloud)
    elif format == "ascii-ply":
        data = _encode_ply(cloud)
    else:
        raise ValueError(f"unknown cloud format {format!r}")
    path.write_bytes(data)
    return path


def read_cloud(path) -> PointCloud:
    data = Path(path).read_bytes()
    if data[:4] == LFPC_MAGIC:
        return _decode_lfpc(data)
    if data[:3] == b"ply":
        return _decode_ply(data)
    raise ParseError(f"{path}: not an LFPC or PLY cloud", offset=0)


def _encode_lfpc(cloud: PointCloud) -> bytes:
    channels = ["xyz"] + list(cloud.channel_names)
    out = [LFPC_MAGIC, struct.pack("<IQ", LFPC_VERSION, len(cloud)),
           struct.pack("<I", len(channels))]
    for name in channels:
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
    for name in channels:
        arr = cloud.xyz if name == "xyz" else getattr(cloud, name)
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def _decode_lfpc(data: bytes) -> PointCloud:
    if data[:4] != LFPC_MAGIC:
        raise ParseError("bad magic bytes", offset=0)
    if len(data) < 20:
        raise ParseError("truncated header", offset=len(data))
    version, count = struct.unpack_from("<IQ", data, 4)
    if version != LFPC_VERSION:
        raise ParseError(f"unsupported version {version}", offset=4)
    (n_channels,) = struct.unpack_from("<I", data, 16)
    offset = 20
    names = []
    for _ in range(n_channels):
        if offset + 4 > len(data):
            raise ParseError("truncated channel list", offset=offset)
        (ln,) = struct.unpack_from("<I", data, offset)
        offset += 4
        if offset + ln > len(data):
            raise ParseError("truncated channel name", offset=offset)
        name = data[offset : offset + ln].decode("utf-8")
        if name not in _LFPC_CHANNELS:
            raise ParseError(f"unknown channel {name!r}", offset=offset)
        names.append(name)
        offset += ln
    if "xyz" not in names:
        raise ParseError("cloud is missing the xyz channel", offset=offset)

    arrays = {}
    for name in names:
        width = _LFPC_CHANNELS[name]
        nbytes = count * width * 8
        if offset + nbytes > len(data):
            raise ParseError(f"truncated payload for channel {name!r}", offset=offset)
        arr = np.frombuffer(data, dtype="<f8", count=count * width, offset=offset)
        arrays[name] = arr.reshape(count, width) if width > 1 else arr.copy()
        offset += nbytes
    if offset != len(data):
        raise ParseError("trailing bytes after payload", offset=offset)

    xyz = arrays.pop("xyz")
    if "beam_id" in arrays:
        arrays["beam_id"] = arrays["beam_id"].astype(np.int64)
    return PointCloud(xyz, **arrays)


def _encode_ply(cloud: PointCloud) -> bytes:
    props = ["x", "y", "z"]
    columns = [cloud.xyz[:, 0], cloud.xyz[:, 1], cloud.xyz[:, 2]]
    for name in ("intensity", "elongation"):
        ch = getattr(cloud, name)
        if ch is not None:
            props.append(name)
            columns.append(ch)
    header = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}"]
    header += [f"property double {p}" for p in props]
    header.append("end_header")
    lines = [" ".join(repr(float(col[i])) for col in columns) for i in range(len(cloud))]
    return ("\n".join(header + lines) + "\n").encode("ascii")


def _decode_ply(data: bytes) -> PointCloud:
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError as e:
        raise ParseError("PLY payload is not ascii", offset=e.start) from None
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing ply header", offset=0)
    count = None
    props: list[str] = []
    body_at = None
    for i, line in enumerate(lines[1:], start=1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            if tok[1] != "ascii":
                raise ParseError(f"unsupported PLY format {tok[1]!r}")
        elif tok[0] == "element":
            if tok[1] != "vertex":
                raise ParseError(f"unsupported PLY element {tok[1]!r}")
            count = int(tok[2])
        elif tok[0] == "property":
            if tok[1] not in ("double", "float"):
                raise ParseError(f"unsupported PLY property type {tok[1]!r}")
            props.append(tok[2])
        elif tok[0] == "end_header":
            body_at = i + 1
            break
    if count is None or body_at is None:
        raise ParseError("incomplete PLY header")
    known = ("x", "y", "z", "intensity", "elongation")
    if props[:3] != ["x", "y", "z"] or any(p not in known for p in props):
        raise ParseError(f"unsupported PLY properties {props}")

    rows = [ln for ln in lines[body_at:] if ln.strip()]
    if len(rows) != count:
        raise ParseError(f"expected {count} vertex rows, found {len(rows)}")
    if count == 0:
        values = np.zeros((0, len(props)))
    else:
        values = np.array([[float(v) for v in r.split()] for r in rows])
        if values.shape != (count, len(props)):
            raise ParseError("vertex row width does not match property list")
    kw = {p: values[:, j] for j, p in enumerate(props) if j >= 3}
    return PointCloud(values[:, :3], **kw)


# ---------------------------------------------------------------------------
# range images (PFM)
# ---------------------------------------------------------------------------


def export_range_image(grid_depths: np.ndarray, path) -> Path:
    """Write a (W, H) depth grid as a little-endian PFM file.

    Values are stored row-major over the (W, H) array as float32; use
    -1.0 for empty bins.
    """
    grid = np.asarray(grid_depths, dtype="<f4")
    if grid.ndim != 2 or grid.size == 0:
        raise ValueError(f"grid must be a non-empty 2D array, got shape {grid.shape}")
    w, h = grid.shape
    path = Path(path)
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(grid).tobytes())
    return path


def read_range_image(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"Pf":
        raise ParseError("not a Pf range image", offset=0)
    try:
        w, h = (int(v) for v in parts[1].split())
        scale = float(parts[2])
    except ValueError:
        raise ParseError("malformed PFM header") from None
    dtype = "<f4" if scale < 0 else ">f4"
    body = parts[3]
    expected = w * h * 4
    if len(body) != expected:
        raise ParseError(
            f"expected {expected} payload bytes, found {len(body)}",
            offset=len(data) - len(body),
        )
    return np.frombuffer(body, dtype=dtype).reshape(w, h).astype(np.float32)


# ---------------------------------------------------------------------------
# poses and labels
# ---------------------------------------------------------------------------


def write_pose(pose: RigidTransform, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(pose.matrix().tolist()) + "\n")
    return path


def read_pose(path) -> RigidTransform:
    m = json.loads(Path(path).read_text())
    return RigidTransform.from_matrix(np.asarray(m, dtype=np.float64))


def write_labels(boxes_per_frame: Sequence[Sequence[OrientedBox3]], path) -> Path:
    path = Path(path)
    with open(path, "w") as f:
        for frame, boxes in enumerate(boxes_per_frame):
            for b in boxes:
                f.write(
                    json.dumps(
                        {
                            "frame": frame,
                            "track_id": b.track_id,
                            "class": b.class_label,
                            "center": b.center.tolist(),
                            "dims": b.dims.tolist(),
                            "yaw": b.yaw,
                        }
                    )
                    + "\n"
                )
    return path


def read_labels(path, n_frames: int) -> list[list[OrientedBox3]]:
    out: list[list[OrientedBox3]] = [[] for _ in range(n_frames)]
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            frame = int(rec["frame"])
            label = rec["class"]
            if label not in CLASS_LABELS:
                raise ValueError(f"unknown class {label!r}")
            box = OrientedBox3(
                rec["center"], rec["dims"], rec["yaw"],
                track_id=str(rec["track_id"]), class_label=label,
            )
        except (KeyError, ValueError, TypeError) as e:
            raise LoadError(f"{path} line {lineno}: {e}") from None
        if not 0 <= frame < n_frames:
            raise LoadError(f"{path} line {lineno}: frame {frame} out of range")
        out[frame].append(box)
    return out


# ---------------------------------------------------------------------------
# sequences
# ---------------------------------------------------------------------------


def read_sequence(manifest_path) -> SequenceDataset:
    """Load a sequence manifest; failures name the offending frame/path."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise LoadError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise LoadError(f"{manifest_path}: invalid JSON ({e})") from None
    for key in ("sensor_name", "max_range", "frames"):
        if key not in manifest:
            raise LoadError(f"{manifest_path}: manifest missing key {key!r}")
    root = manifest_path.parent
    entries = manifest["frames"]
    if not entries:
        raise LoadError(f"{manifest_path}: manifest lists no frames")

    boxes_per_frame: list[list[OrientedBox3]] = [[] for _ in entries]
    if manifest.get("labels"):
        labels_path = root / manifest["labels"]
        if not labels_path.exists():
            raise LoadError(f"labels file not found: {labels_path}")
        boxes_per_frame = read_labels(labels_path, len(entries))

    frames = []
    last_ts = None
    for i, entry in enumerate(entries):
        for key in ("timestamp", "cloud", "pose"):
            if key not in entry:
                raise LoadError(f"manifest entry missing key {key!r}", frame=i)
        cloud_path = root / entry["cloud"]
        pose_path = root / entry["pose"]
        if not cloud_path.exists():
            raise LoadError(f"cloud file not found: {cloud_path}", frame=i)
        if not pose_path.exists():
            raise LoadError(f"pose file not found: {pose_path}", frame=i)
        try:
            cloud = read_cloud(cloud_path)
            pose = read_pose(pose_path)
        except (ParseError, ValueError) as e:
            raise LoadError(str(e), frame=i) from None
        ts = int(entry["timestamp"])
        if last_ts is not None and ts <= last_ts:
            raise LoadError(f"timestamp {ts} not after previous {last_ts}", frame=i)
        last_ts = ts
        frames.append(FrameRecord(ts, pose, cloud, tuple(boxes_per_frame[i])))

    return SequenceDataset(tuple(frames), manifest["sensor_name"], manifest["max_range"])


def write_sequence(seq: SequenceDataset, out_dir) -> Path:
    """Write manifest + per-frame LFPC clouds, poses, and a labels file.

    Returns the manifest path; `read_sequence` of it reproduces the
    dataset with bit-exact float fields.
    """
    out_dir = Path(out_dir)
    (out_dir / "clouds").mkdir(parents=True, exist_ok=True)
    (out_dir / "poses").mkdir(exist_ok=True)
    entries = []
    for i, frame in enumerate(seq.frames):
        cloud_rel = f"clouds/{i:06d}.lfpc"
        pose_rel = f"poses/{i:06d}.json"
        write_cloud(frame.cloud, out_dir / cloud_rel)
        write_pose(frame.sensor_pose, out_dir / pose_rel)
        entries.append({"timestamp": frame.timestamp, "cloud": cloud_rel, "pose": pose_rel})
    write_labels([f.boxes for f in seq.frames], out_dir / "labels.jsonl")
    manifest = {
        "sensor_name": seq.sensor_name,
        "max_range": seq.max_range,
        "labels": "labels.jsonl",
        "frames": entries,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest_path
