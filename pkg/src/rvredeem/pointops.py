"""Point-set primitives: sampling, neighborhoods, voxel grids, BEV maps.

All operations are pure and deterministic. Ties are broken by the lowest
point index everywhere, and every distance comparison uses squared
Euclidean distance, so ordering never depends on square-root rounding.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .core import FeaturePointCloud

logger = logging.getLogger(__name__)


def _squared_distances(xyz: np.ndarray, point: np.ndarray) -> np.ndarray:
    diff = xyz - point
    return np.sum(diff * diff, axis=1)


@dataclass(frozen=True)
class KeypointSet:
    """Points retained by sampling: source indices, coordinates, features."""

    indices: np.ndarray  # (C,) int64 into the source cloud
    xyz: np.ndarray  # (C, 3)
    features: np.ndarray  # (C, d_f)

    def __post_init__(self):
        # np.array always copies, so freezing never reaches caller arrays.
        idx = np.array(self.indices, dtype=np.int64, order="C")
        xyz = np.array(self.xyz, dtype=np.float64, order="C")
        feats = np.array(self.features, dtype=np.float64, order="C")
        if idx.ndim != 1:
            raise ValueError("indices must be one-dimensional")
        if np.unique(idx).size != idx.size:
            raise ValueError("keypoint indices must be unique")
        if xyz.shape != (idx.size, 3):
            raise ValueError(f"xyz must be ({idx.size}, 3), got {xyz.shape}")
        if feats.ndim != 2 or feats.shape[0] != idx.size:
            raise ValueError(f"features must be ({idx.size}, d), got {feats.shape}")
        for name, arr in (("indices", idx), ("xyz", xyz), ("features", feats)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return self.indices.size


@dataclass(frozen=True)
class VoxelGrid:
    """Sparse voxelization: occupied cells hold a count and a mean feature.

    `shape` is the full grid extent (nx, ny, nz); `voxels` maps integer
    (ix, iy, iz) to (count, mean feature vector). Every occupied index lies
    inside the extents, and the counts sum to the number of in-range points
    that produced the grid.
    """

    voxel_size: tuple[float, float, float]
    range_min: tuple[float, float, float]
    range_max: tuple[float, float, float]
    shape: tuple[int, int, int]
    feature_dim: int
    voxels: dict[tuple[int, int, int], tuple[int, np.ndarray]]

    def __post_init__(self):
        for axis in range(3):
            if self.voxel_size[axis] <= 0.0:
                raise ValueError("voxel sizes must be positive")
            if self.range_max[axis] <= self.range_min[axis]:
                raise ValueError("grid range must satisfy max > min")
            if self.shape[axis] < 1:
                raise ValueError("grid shape must be positive")
        frozen = {}
        for key, (count, mean) in self.voxels.items():
            if not all(0 <= key[a] < self.shape[a] for a in range(3)):
                raise ValueError(f"occupied voxel {key} outside grid shape {self.shape}")
            if count < 1:
                raise ValueError(f"voxel {key} has nonpositive count")
            mean = np.array(mean, dtype=np.float64, order="C")
            if mean.shape != (self.feature_dim,):
                raise ValueError(f"voxel {key} feature must be ({self.feature_dim},)")
            mean.setflags(write=False)
            frozen[key] = (int(count), mean)
        object.__setattr__(self, "voxels", frozen)

    @property
    def total_count(self) -> int:
        return sum(count for count, _ in self.voxels.values())


def furthest_point_sampling(
    cloud: FeaturePointCloud, count: int, seed_index: int = 0
) -> KeypointSet:
    """Greedy max-min downsampling to `count` points.

    Starts at seed_index; each step picks the point whose squared distance
    to the selected set is largest, lowest index on ties (argmax returns the
    first maximum). Asking for C >= N returns all points in selection order.
    """
    n = len(cloud)
    if n == 0:
        raise ValueError("cannot sample from an empty cloud")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if not (0 <= seed_index < n):
        raise ValueError(f"seed_index {seed_index} outside [0, {n})")
    xyz = cloud.xyz
    count = min(count, n)
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = seed_index
    best = np.full(n, np.inf, dtype=np.float64)
    last = seed_index
    for step in range(1, count):
        best = np.minimum(best, _squared_distances(xyz, xyz[last]))
        best[last] = -1.0  # never reselect
        last = int(np.argmax(best))
        chosen[step] = last
    return KeypointSet(chosen, xyz[chosen], cloud.features[chosen])


def ball_query(
    center: np.ndarray, radius: float, cloud: FeaturePointCloud, max_k: int
) -> np.ndarray:
    """Indices of points with distance <= radius, nearest first, capped.

    Comparison is on squared distances. Ordering is (distance, index), so
    truncation at max_k is deterministic.
    """
    if radius < 0.0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    if max_k < 1:
        raise ValueError(f"max_k must be >= 1, got {max_k}")
    center = np.asarray(center, dtype=np.float64).reshape(3)
    d2 = _squared_distances(cloud.xyz, center)
    hits = np.flatnonzero(d2 <= radius * radius)
    order = np.lexsort((hits, d2[hits]))
    return hits[order][:max_k].astype(np.int64)


@dataclass(frozen=True)
class SharedMlp:
    """Dense layers applied per point, rectified after every layer."""

    layers: tuple[tuple[np.ndarray, np.ndarray], ...]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("need at least one layer")
        frozen = []
        prev_out = None
        for weight, bias in self.layers:
            weight = np.array(weight, dtype=np.float64, order="C")
            bias = np.array(bias, dtype=np.float64, order="C")
            if weight.ndim != 2 or bias.shape != (weight.shape[0],):
                raise ValueError("each layer needs (out, in) weight and (out,) bias")
            if prev_out is not None and weight.shape[1] != prev_out:
                raise ValueError("layer widths must chain")
            if not (np.all(np.isfinite(weight)) and np.all(np.isfinite(bias))):
                raise ValueError("layer parameters must be finite")
            prev_out = weight.shape[0]
            weight.setflags(write=False)
            bias.setflags(write=False)
            frozen.append((weight, bias))
        object.__setattr__(self, "layers", tuple(frozen))

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    def apply(self, columns: np.ndarray) -> np.ndarray:
        """Run the stack on (in_dim, n) column data."""
        out = columns
        for weight, bias in self.layers:
            out = np.maximum(weight @ out + bias[:, None], 0.0)
        return out


def pointnet_aggregate(
    center: np.ndarray,
    neighbor_xyz: np.ndarray,
    neighbor_features: np.ndarray,
    mlp: SharedMlp,
) -> np.ndarray:
    """Max-pooled local feature with an emptiness flag channel.

    Each neighbor is encoded as concat(xyz - center, features), pushed
    through the shared MLP, then reduced by channel-wise max. The returned
    vector has out_dim + 1 entries: the pooled feature followed by a flag
    that is 1.0 when the neighbor list was empty (pooled part all zero) and
    0.0 otherwise.
    """
    center = np.asarray(center, dtype=np.float64).reshape(3)
    xyz = np.asarray(neighbor_xyz, dtype=np.float64).reshape(-1, 3)
    feats = np.asarray(neighbor_features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] != xyz.shape[0]:
        raise ValueError(
            f"features must be ({xyz.shape[0]}, d), got {feats.shape}"
        )
    out = np.zeros(mlp.out_dim + 1, dtype=np.float64)
    if xyz.shape[0] == 0:
        out[-1] = 1.0
        return out
    encoded = np.concatenate([xyz - center, feats], axis=1).T
    if encoded.shape[0] != mlp.in_dim:
        raise ValueError(
            f"MLP expects {mlp.in_dim} inputs, encoding has {encoded.shape[0]}"
        )
    out[:-1] = np.max(mlp.apply(encoded), axis=1)
    return out


def voxelize(
    cloud: FeaturePointCloud,
    voxel_size: tuple[float, float, float],
    range_min: tuple[float, float, float],
    range_max: tuple[float, float, float],
) -> VoxelGrid:
    """Mean-pool features into a sparse voxel grid.

    A point belongs to voxel floor((p - min) / size); a point exactly on a
    cell boundary therefore lands in the higher-index cell. Points whose
    index falls outside the grid are counted in a log line and excluded.
    """
    size = np.asarray(voxel_size, dtype=np.float64)
    vmin = np.asarray(range_min, dtype=np.float64)
    vmax = np.asarray(range_max, dtype=np.float64)
    shape = tuple(int(math.ceil((vmax[a] - vmin[a]) / size[a])) for a in range(3))
    grid_kwargs = dict(
        voxel_size=tuple(float(s) for s in size),
        range_min=tuple(float(v) for v in vmin),
        range_max=tuple(float(v) for v in vmax),
        shape=shape,
        feature_dim=cloud.feature_dim,
    )
    n = len(cloud)
    if n == 0:
        return VoxelGrid(voxels={}, **grid_kwargs)

    idx = np.floor((cloud.xyz - vmin) / size).astype(np.int64)
    in_range = np.all((idx >= 0) & (idx < np.asarray(shape)), axis=1)
    dropped = int(n - np.sum(in_range))
    if dropped:
        logger.info("voxelize: %d point(s) outside the grid range", dropped)
    idx = idx[in_range]
    feats = cloud.features[in_range]
    if idx.shape[0] == 0:
        return VoxelGrid(voxels={}, **grid_kwargs)

    # Group by flattened voxel id with a stable sort; summation order inside
    # each group follows ascending point index, so results are reproducible.
    flat = (idx[:, 0] * shape[1] + idx[:, 1]) * shape[2] + idx[:, 2]
    order = np.argsort(flat, kind="stable")
    flat_sorted = flat[order]
    boundaries = np.flatnonzero(
        np.concatenate([[True], flat_sorted[1:] != flat_sorted[:-1]])
    )
    counts = np.diff(np.concatenate([boundaries, [flat_sorted.size]]))
    sums = np.add.reduceat(feats[order], boundaries, axis=0)
    voxels = {}
    for b, (start, count) in enumerate(zip(boundaries, counts)):
        fid = int(flat_sorted[start])
        key = (
            fid // (shape[1] * shape[2]),
            (fid // shape[2]) % shape[1],
            fid % shape[2],
        )
        voxels[key] = (int(count), sums[b] / count)
    return VoxelGrid(voxels=voxels, **grid_kwargs)


def bev_flatten(grid: VoxelGrid) -> np.ndarray:
    """(nx, ny, nz * d_f) map: z-layer k fills channel block [k*d_f, (k+1)*d_f).

    Empty voxels contribute zeros.
    """
    nx, ny, nz = grid.shape
    d_f = grid.feature_dim
    out = np.zeros((nx, ny, nz * d_f), dtype=np.float64)
    for (ix, iy, iz), (_, mean) in grid.voxels.items():
        out[ix, iy, iz * d_f : (iz + 1) * d_f] = mean
    return out
