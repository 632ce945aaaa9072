"""Bijective pixel-point mapping and range-image construction.

The projection ties a real-valued pixel (u, v) with range r to a 3D point:

    theta = (1 - 2u/w) * pi          azimuth, +pi at u=0 down to -pi at u=w
    phi   = (1 - v/h) * f_total - f_up   elevation
    x = r cos(phi) cos(theta)
    y = r cos(phi) sin(theta)
    z = r sin(phi)

and back via theta = atan2(y, x), phi = asin(z/r). Azimuth covers the full
circle, so only elevation can put a point out of the field of view. The
elevation interval reachable by rows v in [0, h) is (-f_up, f_total - f_up];
the open bottom end keeps the row invariant 0 <= v < h strict.

Whether `fov_up` names the above-horizon magnitude depends on the sensor
vendor's datasheet convention; the formulas above are the contract, and the
row order simply follows from them.

All math here runs in 64-bit floats: the round-trip guarantees are only
meaningful without single-precision noise.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .core import (
    BASE_CHANNELS,
    CH_INTENSITY,
    CH_RANGE,
    FeaturePointCloud,
    Point,
    RangeImage,
    SensorModel,
    points_to_array,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PixelCoord:
    """Real-valued pixel location plus the range measured there."""

    u: float
    v: float
    r: float

    def validate(self, sensor: SensorModel) -> "PixelCoord":
        if not (0.0 <= self.u < sensor.width):
            raise ValueError(f"pixel u={self.u!r} outside [0, {sensor.width})")
        if not (0.0 <= self.v < sensor.height):
            raise ValueError(f"pixel v={self.v!r} outside [0, {sensor.height})")
        if not (math.isfinite(self.r) and self.r > 0.0):
            raise ValueError(f"pixel range must be positive, got {self.r!r}")
        return self


def pixel_angles(u, v, sensor: SensorModel):
    """(theta, phi) for real-valued pixel coordinates. Vectorized."""
    theta = (1.0 - 2.0 * np.asarray(u, dtype=np.float64) / sensor.width) * math.pi
    phi = (
        1.0 - np.asarray(v, dtype=np.float64) / sensor.height
    ) * sensor.fov_total - sensor.fov_up
    return theta, phi


def pixel_to_point(px: PixelCoord, sensor: SensorModel, intensity: float = 0.0) -> Point:
    """3D point for a pixel; |(x, y, z)| agrees with px.r to a few ulps.

    Delegates to the vectorized kernel so scalar and batch paths are
    bit-identical.
    """
    px.validate(sensor)
    x, y, z = unproject_pixels(px.u, px.v, px.r, sensor)
    return Point(float(x), float(y), float(z), intensity, px.r)


def unproject_pixels(u, v, r, sensor: SensorModel) -> np.ndarray:
    """Vectorized pixel_to_point over coordinate arrays; returns (N, 3) xyz."""
    theta, phi = pixel_angles(u, v, sensor)
    r = np.asarray(r, dtype=np.float64)
    cos_phi = np.cos(phi)
    return np.stack(
        [r * cos_phi * np.cos(theta), r * cos_phi * np.sin(theta), r * np.sin(phi)],
        axis=-1,
    )


def point_to_pixel(p: Point, sensor: SensorModel) -> PixelCoord | None:
    """Algebraic inverse of pixel_to_point; None when out of the field of view.

    atan2 yields theta in (-pi, pi], which maps to u in [0, w): the azimuth
    never leaves the image. Elevation outside (-f_up, f_total - f_up], i.e. a
    row index outside [0, h), is out of view. Delegates to the vectorized
    kernel so scalar and batch paths are bit-identical.
    """
    if not (p.range > 0.0):
        raise ValueError("cannot project a zero-range point")
    xyz = np.array([[p.x, p.y, p.z]], dtype=np.float64)
    u, v, r, in_fov = project_points(xyz, sensor)
    if not in_fov[0]:
        return None
    return PixelCoord(float(u[0]), float(v[0]), float(r[0]))


def project_points(xyz: np.ndarray, sensor: SensorModel):
    """Vectorized point_to_pixel over an (N, 3) array.

    Returns (u, v, r, in_fov). u and v are real-valued; entries where
    `in_fov` is False are unspecified.
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    r = np.sqrt(np.sum(xyz * xyz, axis=1))
    safe_r = np.where(r > 0.0, r, 1.0)
    theta = np.arctan2(xyz[:, 1], xyz[:, 0])
    phi = np.arcsin(np.clip(xyz[:, 2] / safe_r, -1.0, 1.0))
    u = sensor.width * (1.0 - theta / math.pi) / 2.0
    v = sensor.height * (1.0 - (phi + sensor.fov_up) / sensor.fov_total)
    in_fov = (r > 0.0) & (v >= 0.0) & (v < sensor.height)
    u = np.where(u >= sensor.width, u - sensor.width, u)
    return u, v, r, in_fov


def build_range_image(cloud, sensor: SensorModel) -> RangeImage:
    """Bin points into the five-plane range image.

    Each in-view point lands at (floor(u), floor(v)). When several points
    share a pixel the smallest range wins, ties broken by lowest input index,
    so the result never depends on traversal order. Out-of-view points are
    skipped and counted in a log line.
    """
    arr = points_to_array(cloud)
    arr[:, CH_INTENSITY] = np.clip(arr[:, CH_INTENSITY], 0.0, 1.0)
    h, w = sensor.height, sensor.width
    planes = np.zeros((BASE_CHANNELS, h, w), dtype=np.float64)
    valid = np.zeros((h, w), dtype=bool)
    if arr.shape[0] == 0:
        return RangeImage(sensor, planes, valid)

    u, v, r, in_fov = project_points(arr[:, :3], sensor)
    dropped = int(arr.shape[0] - np.sum(in_fov))
    if dropped:
        logger.info("build_range_image: %d point(s) outside the field of view", dropped)
    keep = np.flatnonzero(in_fov)
    if keep.size == 0:
        return RangeImage(sensor, planes, valid)

    cols = np.floor(u[keep]).astype(np.int64)
    rows = np.floor(v[keep]).astype(np.int64)
    pixel_id = rows * w + cols
    # Sort by (pixel, range, input index); the first entry per pixel is the
    # nearest point with the lowest index among equals.
    order = np.lexsort((keep, r[keep], pixel_id))
    pixel_sorted = pixel_id[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = pixel_sorted[1:] != pixel_sorted[:-1]
    winners = keep[order[first]]
    win_rows = rows[order[first]]
    win_cols = cols[order[first]]

    planes[:, win_rows, win_cols] = arr[winners].T
    valid[win_rows, win_cols] = True
    return RangeImage(sensor, planes, valid)


def redeem_feature_points(
    img: RangeImage, expected_dim: int | None = None
) -> FeaturePointCloud:
    """One feature point per valid pixel, in row-major pixel order.

    Coordinates and intensity come from the stored planes, never re-derived
    from pixel centers, so no quantization error enters the cloud. The
    embedding is the pixel's feature-plane vector and `source_pixel` records
    (row, col). Output count equals the valid-mask popcount.
    """
    d_f = img.plane_count - BASE_CHANNELS
    if expected_dim is not None and d_f != expected_dim:
        raise ValueError(
            f"expected {expected_dim} feature plane(s), image has {d_f}"
        )
    rows, cols = np.nonzero(img.valid)
    xyz = img.channels[:3, rows, cols].T
    intensity = img.channels[CH_INTENSITY, rows, cols]
    features = img.feature_planes[:, rows, cols].T.reshape(rows.size, d_f)
    source = np.column_stack([rows, cols])
    return FeaturePointCloud(xyz, intensity, features, source)
