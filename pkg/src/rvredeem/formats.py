"""Binary artifact formats.

All formats are little-endian with 4-byte ASCII magics and 32-bit float
payloads, so a write-read cycle is bit-identical byte-for-byte:

* RRI1: range image. magic, u32 height, width, plane count, then each
  plane as h*w f32 row-major, then h*w validity bytes (0/1).
* RFP1: feature point cloud. magic, u32 point count, u32 feature dim,
  then per point (x, y, z, intensity) f32 followed by the features.
* RWT1: named tensors. magic, u32 record count, then per record a u16
  name length, UTF-8 name, u8 rank, u32 dims, f32 payload row-major.
* RRF1: pooled RoI features. magic, u32 box count, u32 feature length,
  then one f32 vector per box.

KITTI-style .bin clouds are raw little-endian f32 quadruples
(x, y, z, intensity) with no header. Box list files are UTF-8 text, one
`cx cy cz l w h yaw` line per box.

Values are stored in single precision; readers widen to float64. Code that
needs bit-stable composition across process boundaries must therefore
round-trip its data through these formats (write, then read back) before
feeding the next stage.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .core import Box3D, FeaturePointCloud, Point, RangeImage, SensorModel

_POINT_RECORD = 16  # four little-endian f32 per KITTI point


class FormatError(ValueError):
    """Raised when a binary artifact violates its format contract."""


def _read_bytes(path) -> bytes:
    return Path(path).read_bytes()


def _check_magic(data: bytes, magic: bytes, path):
    if len(data) < 4 or data[:4] != magic:
        raise FormatError(f"{path}: missing {magic.decode()} magic")


def _take(data: bytes, offset: int, size: int, path) -> tuple[bytes, int]:
    if offset + size > len(data):
        raise FormatError(f"{path}: truncated file")
    return data[offset : offset + size], offset + size


# ---------------------------------------------------------------------------
# RRI1 range images
# ---------------------------------------------------------------------------

def write_rri1(path, img: RangeImage) -> None:
    h, w = img.sensor.height, img.sensor.width
    parts = [
        b"RRI1",
        struct.pack("<III", h, w, img.plane_count),
        np.ascontiguousarray(img.channels, dtype="<f4").tobytes(),
        np.ascontiguousarray(img.valid, dtype=np.uint8).tobytes(),
    ]
    Path(path).write_bytes(b"".join(parts))


def read_rri1(path, sensor: SensorModel) -> RangeImage:
    data = _read_bytes(path)
    _check_magic(data, b"RRI1", path)
    head, offset = _take(data, 4, 12, path)
    h, w, planes = struct.unpack("<III", head)
    if (h, w) != (sensor.height, sensor.width):
        raise FormatError(
            f"{path}: image is {h}x{w}, sensor expects "
            f"{sensor.height}x{sensor.width}"
        )
    body, offset = _take(data, offset, planes * h * w * 4, path)
    mask, offset = _take(data, offset, h * w, path)
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing byte(s)")
    channels = np.frombuffer(body, dtype="<f4").astype(np.float64)
    valid = np.frombuffer(mask, dtype=np.uint8) != 0
    return RangeImage(
        sensor, channels.reshape(planes, h, w), valid.reshape(h, w)
    )


# ---------------------------------------------------------------------------
# RFP1 feature point clouds
# ---------------------------------------------------------------------------

def write_rfp1(path, cloud: FeaturePointCloud) -> None:
    n = len(cloud)
    d_f = cloud.feature_dim
    records = np.empty((n, 4 + d_f), dtype="<f4")
    records[:, :3] = cloud.xyz
    records[:, 3] = cloud.intensity
    records[:, 4:] = cloud.features
    Path(path).write_bytes(
        b"RFP1" + struct.pack("<II", n, d_f) + records.tobytes()
    )


def read_rfp1(path) -> FeaturePointCloud:
    data = _read_bytes(path)
    _check_magic(data, b"RFP1", path)
    head, offset = _take(data, 4, 8, path)
    n, d_f = struct.unpack("<II", head)
    body, offset = _take(data, offset, n * (4 + d_f) * 4, path)
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing byte(s)")
    records = np.frombuffer(body, dtype="<f4").astype(np.float64)
    records = records.reshape(n, 4 + d_f)
    return FeaturePointCloud(records[:, :3], records[:, 3], records[:, 4:])


# ---------------------------------------------------------------------------
# RWT1 named tensors
# ---------------------------------------------------------------------------

def write_rwt1(path, tensors: dict[str, np.ndarray]) -> None:
    parts = [b"RWT1", struct.pack("<I", len(tensors))]
    for name, tensor in tensors.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        # ascontiguousarray would promote rank-0 tensors to rank 1.
        arr = np.asarray(tensor, dtype="<f4", order="C")
        if arr.ndim > 0xFF:
            raise FormatError(f"{name}: rank {arr.ndim} exceeds format limit")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_rwt1(path) -> dict[str, np.ndarray]:
    data = _read_bytes(path)
    _check_magic(data, b"RWT1", path)
    head, offset = _take(data, 4, 4, path)
    (count,) = struct.unpack("<I", head)
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        head, offset = _take(data, offset, 2, path)
        (name_len,) = struct.unpack("<H", head)
        raw_name, offset = _take(data, offset, name_len, path)
        name = raw_name.decode("utf-8")
        head, offset = _take(data, offset, 1, path)
        rank = head[0]
        head, offset = _take(data, offset, 4 * rank, path)
        dims = struct.unpack(f"<{rank}I", head)
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        body, offset = _take(data, offset, size * 4, path)
        if name in out:
            raise FormatError(f"{path}: duplicate tensor name {name!r}")
        out[name] = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(dims)
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing byte(s)")
    return out


# ---------------------------------------------------------------------------
# RRF1 pooled RoI features
# ---------------------------------------------------------------------------

def write_rrf1(path, vectors: np.ndarray) -> None:
    arr = np.ascontiguousarray(vectors, dtype="<f4")
    if arr.ndim != 2:
        raise FormatError(f"RoI payload must be (boxes, length), got {arr.shape}")
    Path(path).write_bytes(
        b"RRF1" + struct.pack("<II", arr.shape[0], arr.shape[1]) + arr.tobytes()
    )


def read_rrf1(path) -> np.ndarray:
    data = _read_bytes(path)
    _check_magic(data, b"RRF1", path)
    head, offset = _take(data, 4, 8, path)
    boxes, length = struct.unpack("<II", head)
    body, offset = _take(data, offset, boxes * length * 4, path)
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing byte(s)")
    return (
        np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(boxes, length)
    )


# ---------------------------------------------------------------------------
# KITTI-style raw clouds
# ---------------------------------------------------------------------------

def read_kitti_bin(path) -> list[Point]:
    """Raw f32 quadruples to points; range is derived on load.

    Rejects files whose size is not a multiple of 16 and reports the record
    index of any non-finite value.
    """
    data = _read_bytes(path)
    if len(data) % _POINT_RECORD != 0:
        raise FormatError(
            f"{path}: size {len(data)} is not a multiple of {_POINT_RECORD}"
        )
    records = np.frombuffer(data, dtype="<f4").astype(np.float64).reshape(-1, 4)
    bad = np.flatnonzero(~np.all(np.isfinite(records), axis=1))
    if bad.size:
        raise FormatError(f"{path}: non-finite values at record {int(bad[0])}")
    return [Point(x, y, z, i) for x, y, z, i in records]


def read_kitti_bin_array(path) -> np.ndarray:
    """(N, 4) float64 (x, y, z, intensity) with the same validation."""
    data = _read_bytes(path)
    if len(data) % _POINT_RECORD != 0:
        raise FormatError(
            f"{path}: size {len(data)} is not a multiple of {_POINT_RECORD}"
        )
    records = np.frombuffer(data, dtype="<f4").astype(np.float64).reshape(-1, 4)
    bad = np.flatnonzero(~np.all(np.isfinite(records), axis=1))
    if bad.size:
        raise FormatError(f"{path}: non-finite values at record {int(bad[0])}")
    return records


def write_kitti_bin(path, points) -> None:
    """Store (x, y, z, intensity) rows or Point objects as raw f32."""
    if isinstance(points, np.ndarray):
        arr = np.ascontiguousarray(points[:, :4], dtype="<f4")
    else:
        arr = np.array(
            [(p.x, p.y, p.z, p.intensity) for p in points], dtype="<f4"
        ).reshape(-1, 4)
    Path(path).write_bytes(arr.tobytes())


# ---------------------------------------------------------------------------
# Box list files
# ---------------------------------------------------------------------------

def read_boxes(path) -> list[Box3D]:
    """One `cx cy cz l w h yaw` line per box; `#` comments allowed."""
    boxes = []
    for lineno, raw in enumerate(
        Path(path).read_text(encoding="utf-8").splitlines(), start=1
    ):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 7:
            raise FormatError(
                f"{path}:{lineno}: expected 7 fields, got {len(fields)}"
            )
        try:
            values = [float(f) for f in fields]
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-numeric field") from None
        try:
            boxes.append(Box3D(*values))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    return boxes


def write_boxes(path, boxes) -> None:
    lines = [
        f"{b.cx!r} {b.cy!r} {b.cz!r} {b.length!r} {b.width!r} {b.height!r} {b.yaw!r}"
        for b in boxes
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    digest.update(Path(path).read_bytes())
    return digest.hexdigest()
