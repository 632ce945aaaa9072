"""Domain types and configuration shared by the whole pipeline.

Angles are stored in radians everywhere. Config files may provide degrees by
suffixing a key with `_deg`; the value is converted once at load time. The
vertical field of view is stored as two nonnegative magnitudes (above and
below the reference row mapping); the sign conventions of the projection all
live in `range_geometry`.

All types here are immutable after construction and safe to share across
workers. Array-backed fields are marked read-only.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

# Fixed channel layout of the first five range-image planes.
CH_X = 0
CH_Y = 1
CH_Z = 2
CH_INTENSITY = 3
CH_RANGE = 4
BASE_CHANNELS = 5


class ConfigError(ValueError):
    """Raised on a missing, unparsable, or invariant-violating config key."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    # Always copy: freezing an array the caller still holds would silently
    # make their object read-only.
    out = np.array(arr, order="C")
    out.setflags(write=False)
    return out


def clamp_intensity(value, key: str = "intensity"):
    """Clamp intensities into [0, 1], warning once per call on violations.

    Calibrated sensor intensities occasionally exceed 1; rejecting them would
    make real scans unloadable, so out-of-range values are clamped instead.
    Works on scalars and arrays.
    """
    arr = np.asarray(value, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        n = int(np.sum((arr < 0.0) | (arr > 1.0)))
        logger.warning("%s: clamped %d value(s) outside [0, 1]", key, n)
        arr = np.clip(arr, 0.0, 1.0)
    if np.ndim(value) == 0:
        return float(arr)
    return arr


@dataclass(frozen=True)
class SensorModel:
    """Angular geometry of the scanner and the range-image dimensions.

    `fov_up` and `fov_down` are the nonnegative magnitudes of the vertical
    field of view split; `fov_total = fov_up + fov_down` must stay within
    [0, pi] so elevations remain inside [-pi/2, pi/2].
    """

    height: int
    width: int
    fov_up: float
    fov_down: float

    def __post_init__(self):
        if self.height < 1:
            raise ValueError(f"sensor height must be >= 1, got {self.height}")
        if self.width < 1:
            raise ValueError(f"sensor width must be >= 1, got {self.width}")
        if not math.isfinite(self.fov_up) or self.fov_up < 0.0:
            raise ValueError(f"fov_up must be nonnegative, got {self.fov_up}")
        if not math.isfinite(self.fov_down) or self.fov_down < 0.0:
            raise ValueError(f"fov_down must be nonnegative, got {self.fov_down}")
        total = self.fov_up + self.fov_down
        if total <= 0.0:
            raise ValueError("total vertical field of view must be positive")
        if total > math.pi:
            raise ValueError(
                f"total vertical field of view {total:.6f} exceeds pi"
            )

    @property
    def fov_total(self) -> float:
        return self.fov_up + self.fov_down


@dataclass(frozen=True)
class Point:
    """A single return: Cartesian coordinates, intensity, and derived range."""

    x: float
    y: float
    z: float
    intensity: float = 0.0
    range: float = field(default=math.nan)

    def __post_init__(self):
        for name in ("x", "y", "z"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"point coordinate {name} must be finite")
        object.__setattr__(
            self, "intensity", clamp_intensity(self.intensity, "point intensity")
        )
        r = math.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)
        if math.isnan(self.range):
            object.__setattr__(self, "range", r)
        else:
            if not math.isfinite(self.range):
                raise ValueError("point range must be finite")
            if abs(self.range - r) > 1e-9 * max(r, 1e-300):
                raise ValueError(
                    f"stored range {self.range!r} disagrees with |xyz| = {r!r}"
                )


def points_to_array(points) -> np.ndarray:
    """(N, 5) float64 array of (x, y, z, intensity, range) from Point list.

    ndarray inputs may have 3 columns (intensity defaults to 0), 4 columns
    (range derived), or the full 5.
    """
    if isinstance(points, np.ndarray):
        arr = np.asarray(points, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] not in (3, 4, 5):
            raise ValueError(f"point array must be (N, 3..5), got {arr.shape}")
        if arr.shape[1] == 3:
            arr = np.column_stack([arr, np.zeros(arr.shape[0])])
        if arr.shape[1] == 4:
            r = np.sqrt(np.sum(arr[:, :3] * arr[:, :3], axis=1))
            arr = np.column_stack([arr, r])
        return arr
    out = np.empty((len(points), 5), dtype=np.float64)
    for i, p in enumerate(points):
        out[i] = (p.x, p.y, p.z, p.intensity, p.range)
    return out


@dataclass(frozen=True)
class RangeImage:
    """H x W grid of per-pixel value planes plus a validity mask.

    The first five planes are fixed as (x, y, z, intensity, range); any
    further planes carry features. Invalid pixels hold zero in every plane,
    and the range plane is strictly positive wherever `valid` is set.
    """

    sensor: SensorModel
    channels: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        ch = np.ascontiguousarray(self.channels, dtype=np.float64)
        mask = np.ascontiguousarray(self.valid, dtype=bool)
        h, w = self.sensor.height, self.sensor.width
        if ch.ndim != 3 or ch.shape[1:] != (h, w):
            raise ValueError(
                f"channels must be (P, {h}, {w}), got {ch.shape}"
            )
        if ch.shape[0] < BASE_CHANNELS:
            raise ValueError(
                f"need at least {BASE_CHANNELS} planes, got {ch.shape[0]}"
            )
        if mask.shape != (h, w):
            raise ValueError(f"valid mask must be ({h}, {w}), got {mask.shape}")
        if not np.all(np.isfinite(ch)):
            raise ValueError("range image planes must be finite")
        invalid = ~mask
        if np.any(ch[:, invalid] != 0.0):
            raise ValueError("invalid pixels must hold 0 in all planes")
        if np.any(ch[CH_RANGE][mask] <= 0.0):
            raise ValueError("valid pixels must have strictly positive range")
        object.__setattr__(self, "channels", _freeze(ch))
        object.__setattr__(self, "valid", _freeze(mask))

    @property
    def plane_count(self) -> int:
        return self.channels.shape[0]

    @property
    def feature_planes(self) -> np.ndarray:
        return self.channels[BASE_CHANNELS:]

    def with_features(self, features: np.ndarray) -> "RangeImage":
        """New image keeping the five base planes, replacing feature planes.

        Feature planes are zeroed at invalid pixels to preserve the type
        invariant.
        """
        feats = np.asarray(features, dtype=np.float64)
        h, w = self.sensor.height, self.sensor.width
        if feats.ndim != 3 or feats.shape[1:] != (h, w):
            raise ValueError(f"feature planes must be (F, {h}, {w}), got {feats.shape}")
        feats = feats * self.valid
        stacked = np.concatenate([self.channels[:BASE_CHANNELS], feats], axis=0)
        return RangeImage(self.sensor, stacked, self.valid)


@dataclass(frozen=True)
class FeaturePointCloud:
    """Points with intensity and a fixed-width feature embedding per point.

    Backed by arrays rather than Point objects; `to_points()` materializes
    the list form when needed. `source_pixel` records per-point (u, v)
    provenance when the cloud came out of a range image.
    """

    xyz: np.ndarray
    intensity: np.ndarray
    features: np.ndarray
    source_pixel: np.ndarray | None = None

    def __post_init__(self):
        xyz = np.ascontiguousarray(self.xyz, dtype=np.float64)
        inten = np.ascontiguousarray(self.intensity, dtype=np.float64)
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        if xyz.ndim != 2 or xyz.shape[1] != 3:
            raise ValueError(f"xyz must be (N, 3), got {xyz.shape}")
        n = xyz.shape[0]
        if inten.shape != (n,):
            raise ValueError(f"intensity must be ({n},), got {inten.shape}")
        if feats.ndim != 2 or feats.shape[0] != n:
            raise ValueError(f"features must be ({n}, d), got {feats.shape}")
        if not (np.all(np.isfinite(xyz)) and np.all(np.isfinite(feats))):
            raise ValueError("cloud arrays must be finite")
        inten = clamp_intensity(inten, "cloud intensity")
        object.__setattr__(self, "xyz", _freeze(xyz))
        object.__setattr__(self, "intensity", _freeze(inten))
        object.__setattr__(self, "features", _freeze(feats))
        if self.source_pixel is not None:
            src = np.ascontiguousarray(self.source_pixel, dtype=np.int64)
            if src.shape != (n, 2):
                raise ValueError(f"source_pixel must be ({n}, 2), got {src.shape}")
            object.__setattr__(self, "source_pixel", _freeze(src))

    def __len__(self) -> int:
        return self.xyz.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def ranges(self) -> np.ndarray:
        return np.sqrt(np.sum(self.xyz * self.xyz, axis=1))

    def to_points(self) -> list[Point]:
        return [
            Point(float(x), float(y), float(z), float(i))
            for (x, y, z), i in zip(self.xyz, self.intensity)
        ]

    @classmethod
    def from_points(cls, points, features=None, source_pixel=None) -> "FeaturePointCloud":
        arr = points_to_array(points)
        if features is None:
            features = np.zeros((arr.shape[0], 0), dtype=np.float64)
        return cls(arr[:, :3], arr[:, 3], features, source_pixel)


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    a = math.remainder(yaw, math.tau)
    if a <= -math.pi:
        a = math.pi
    return a


@dataclass(frozen=True)
class Box3D:
    """Rotated 3D box: center, sizes (length along x at yaw 0), z-axis yaw."""

    cx: float
    cy: float
    cz: float
    length: float
    width: float
    height: float
    yaw: float

    def __post_init__(self):
        for name in ("cx", "cy", "cz", "length", "width", "height", "yaw"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"box field {name} must be finite")
        for name in ("length", "width", "height"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"box {name} must be strictly positive")
        # Plain floats, so repr-based box files never see numpy scalars.
        for name in ("cx", "cy", "cz", "length", "width", "height"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "yaw", normalize_yaw(float(self.yaw)))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz], dtype=np.float64)

    @property
    def dims(self) -> np.ndarray:
        return np.array([self.length, self.width, self.height], dtype=np.float64)


@dataclass(frozen=True)
class SGridConfig:
    """Dual-grid RoI pooling configuration.

    The default grid sizes are 3 (fine) and 2 (coarse). Radii of None resolve
    per box to half the cell diagonal of that branch's grid, which guarantees
    neighboring grid-point balls leave no gaps.
    """

    fine_grid: int = 3
    coarse_grid: int = 2
    fine_radius: float | None = None
    coarse_radius: float | None = None
    neighbor_cap: int = 16
    pool_hidden: int = 32
    fine_channels: int = 32
    coarse_channels: int = 32
    head_hidden: int = 128
    upsample_mode: str = "trilinear"

    def __post_init__(self):
        for name in (
            "fine_grid",
            "coarse_grid",
            "neighbor_cap",
            "pool_hidden",
            "fine_channels",
            "coarse_channels",
            "head_hidden",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"sgrid {name} must be >= 1")
        for name in ("fine_radius", "coarse_radius"):
            r = getattr(self, name)
            if r is not None and not (math.isfinite(r) and r > 0.0):
                raise ValueError(f"sgrid {name} must be positive or auto")
        if self.upsample_mode not in ("trilinear", "nearest"):
            raise ValueError(
                f"sgrid upsample_mode must be trilinear or nearest, got {self.upsample_mode}"
            )

    @property
    def roi_feature_length(self) -> int:
        return self.fine_grid**3 * (self.fine_channels + self.coarse_channels)


@dataclass(frozen=True)
class PipelineConfig:
    """Fully validated pipeline configuration."""

    sensor: SensorModel
    conv_channels: int = 32
    mlp_hidden: int = 32
    feature_dim: int = 64
    wrap_horizontal: bool = True
    keypoint_count: int = 2048
    voxel_size: tuple[float, float, float] = (0.4, 0.4, 0.25)
    range_min: tuple[float, float, float] = (-48.0, -48.0, -3.0)
    range_max: tuple[float, float, float] = (48.0, 48.0, 3.0)
    sgrid: SGridConfig = field(default_factory=SGridConfig)
    seed: int = 0

    def __post_init__(self):
        for name in ("conv_channels", "mlp_hidden", "feature_dim", "keypoint_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.feature_dim % 2 != 0:
            raise ValueError(
                f"feature_dim must be even (two equal half-width branches), got {self.feature_dim}"
            )
        for axis, size in zip("xyz", self.voxel_size):
            if not (math.isfinite(size) and size > 0.0):
                raise ValueError(f"voxel size_{axis} must be strictly positive")
        for axis, lo, hi in zip("xyz", self.range_min, self.range_max):
            if not (hi > lo):
                raise ValueError(f"spatial range on {axis} must satisfy max > min")
        if self.seed < 0:
            raise ValueError("seed must be a nonnegative integer")


# ---------------------------------------------------------------------------
# Config file loading: line-oriented `key = value`, `#` comments, dotted keys.
# ---------------------------------------------------------------------------

_SENSOR_REQUIRED = ("sensor.height", "sensor.width")
_ANGLE_KEYS = ("sensor.fov_up", "sensor.fov_down")


def parse_kv_file(path) -> dict[str, str]:
    """Parse a `key = value` file into a string map.

    `#` starts a comment; blank lines are skipped; keys may be dotted.
    Duplicate keys are rejected so a typo cannot silently win.
    """
    text = Path(path).read_text(encoding="utf-8")
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected `key = value`, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"duplicate key: {key}")
        out[key] = value
    return out


class _KeyReader:
    def __init__(self, raw: dict[str, str]):
        self.raw = dict(raw)
        self.used: set[str] = set()

    def _take(self, key: str) -> str | None:
        if key in self.raw:
            self.used.add(key)
            return self.raw[key]
        return None

    def require(self, key: str) -> str:
        value = self._take(key)
        if value is None:
            raise ConfigError(f"missing required key: {key}")
        return value

    def get_int(self, key: str, default: int | None = None) -> int:
        value = self._take(key)
        if value is None:
            if default is None:
                raise ConfigError(f"missing required key: {key}")
            return default
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {value!r}") from None

    def get_float(self, key: str, default: float | None = None) -> float:
        value = self._take(key)
        if value is None:
            if default is None:
                raise ConfigError(f"missing required key: {key}")
            return default
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None

    def get_bool(self, key: str, default: bool) -> bool:
        value = self._take(key)
        if value is None:
            return default
        lowered = value.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")

    def get_radius(self, key: str) -> float | None:
        value = self._take(key)
        if value is None or value.lower() == "auto":
            return None
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{key}: expected a number or `auto`, got {value!r}") from None

    def get_angle(self, key: str) -> float:
        """Radians from `key`, or degrees from `key_deg`; exactly one required."""
        rad = self._take(key)
        deg = self._take(key + "_deg")
        if rad is not None and deg is not None:
            raise ConfigError(f"{key}: give either {key} or {key}_deg, not both")
        if rad is not None:
            try:
                return float(rad)
            except ValueError:
                raise ConfigError(f"{key}: expected a number, got {rad!r}") from None
        if deg is not None:
            try:
                return math.radians(float(deg))
            except ValueError:
                raise ConfigError(
                    f"{key}_deg: expected a number, got {deg!r}"
                ) from None
        raise ConfigError(f"missing required key: {key} (or {key}_deg)")


def load_config(path) -> PipelineConfig:
    """Load and fully validate a pipeline config from a key-value file.

    Every error names the offending key. Loading is pure: the same file
    always yields an identical configuration.
    """
    reader = _KeyReader(parse_kv_file(path))
    try:
        sensor = SensorModel(
            height=reader.get_int("sensor.height"),
            width=reader.get_int("sensor.width"),
            fov_up=reader.get_angle("sensor.fov_up"),
            fov_down=reader.get_angle("sensor.fov_down"),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"sensor: {exc}") from None

    def build(cls, prefix, **kwargs):
        try:
            return cls(**kwargs)
        except ValueError as exc:
            raise ConfigError(f"{prefix}: {exc}") from None

    sgrid = build(
        SGridConfig,
        "sgrid",
        fine_grid=reader.get_int("sgrid.fine_grid", 3),
        coarse_grid=reader.get_int("sgrid.coarse_grid", 2),
        fine_radius=reader.get_radius("sgrid.fine_radius"),
        coarse_radius=reader.get_radius("sgrid.coarse_radius"),
        neighbor_cap=reader.get_int("sgrid.neighbor_cap", 16),
        pool_hidden=reader.get_int("sgrid.pool_hidden", 32),
        fine_channels=reader.get_int("sgrid.fine_channels", 32),
        coarse_channels=reader.get_int("sgrid.coarse_channels", 32),
        head_hidden=reader.get_int("sgrid.head_hidden", 128),
        upsample_mode=reader._take("sgrid.upsample_mode") or "trilinear",
    )
    config = build(
        PipelineConfig,
        "config",
        sensor=sensor,
        conv_channels=reader.get_int("rvfe.conv_channels", 32),
        mlp_hidden=reader.get_int("rvfe.mlp_hidden", 32),
        feature_dim=reader.get_int("rvfe.feature_dim", 64),
        wrap_horizontal=reader.get_bool("rvfe.wrap_horizontal", True),
        keypoint_count=reader.get_int("keypoints.count", 2048),
        voxel_size=(
            reader.get_float("voxel.size_x", 0.4),
            reader.get_float("voxel.size_y", 0.4),
            reader.get_float("voxel.size_z", 0.25),
        ),
        range_min=(
            reader.get_float("voxel.min_x", -48.0),
            reader.get_float("voxel.min_y", -48.0),
            reader.get_float("voxel.min_z", -3.0),
        ),
        range_max=(
            reader.get_float("voxel.max_x", 48.0),
            reader.get_float("voxel.max_y", 48.0),
            reader.get_float("voxel.max_z", 3.0),
        ),
        sgrid=sgrid,
        seed=reader.get_int("seed", 0),
    )
    unknown = set(reader.raw) - reader.used
    if unknown:
        raise ConfigError(f"unknown key: {sorted(unknown)[0]}")
    return config
