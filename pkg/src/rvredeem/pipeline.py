"""End-to-end stage orchestration.

Each stage is a function that reads its inputs from artifact files and
writes its outputs back to artifact files: scene points to range image,
range image to redeemed feature cloud, cloud to keypoints and BEV map,
keypoints plus boxes to pooled RoI vectors and refined detections. The
single-shot `run_pipeline` and the per-stage CLI subcommands call the same
functions, so composing subcommands reproduces the one-shot run bit for bit.

Inside a stage, any freshly written artifact that feeds a later computation
is first read back from disk. Artifacts store values in single precision;
the read-back makes that rounding part of the stage's defined output rather
than an accident of process boundaries.

Parameters are generated from the config seed, quantized to the
single-precision grid at initialization, and round-trip through RWT1 files
without loss.
"""

from __future__ import annotations

import logging
import time
from pathlib import Path

import numpy as np

from . import formats
from .core import (
    BASE_CHANNELS,
    FeaturePointCloud,
    PipelineConfig,
    RangeImage,
    SensorModel,
)
from .pointops import (
    KeypointSet,
    SharedMlp,
    VoxelGrid,
    bev_flatten,
    furthest_point_sampling,
    voxelize,
)
from .range_geometry import build_range_image, redeem_feature_points, unproject_pixels
from .rng import STREAM_SCENE, DetRng, derive_seed
from .rvfe import (
    BasicBlockParams,
    BranchParams,
    HdMetaKernelParams,
    basicblock_forward,
    hdmk_backward,
    hdmk_forward,
    hdmk_forward_planes,
    init_basicblock,
    init_params,
)
from .sgrid import RoIFeature, SGridParams, init_sgrid_params, refine_head_forward, sgrid_pool
from .synth import gen_synthetic_scene, parse_synth_spec

log = logging.getLogger(__name__)

# Artifact file names, fixed so runs are comparable across machines.
POINTS_FILE = "points.bin"
GT_BOXES_FILE = "boxes_gt.txt"
RANGE_FILE = "range.rri1"
WEIGHTS_FILE = "weights.rwt1"
BLOCK_FILE = "block.rri1"
FEATURES_FILE = "features.rri1"
CLOUD_FILE = "cloud.rfp1"
KEYPOINTS_FILE = "keypoints.rfp1"
VOXEL_IDX_FILE = "voxels_idx.npy"
VOXEL_COUNT_FILE = "voxels_count.npy"
VOXEL_MEAN_FILE = "voxels_mean.npy"
SGRID_WEIGHTS_FILE = "sgrid_weights.rwt1"
ROI_FILE = "roi.rrf1"
REFINED_FILE = "refined.txt"
SUMMARY_FILE = "summary.txt"
CHECKSUMS_FILE = "checksums.txt"

# Checksum order for reports; summary and checksum files are excluded
# because the summary carries wall-clock timings.
ARTIFACT_ORDER = (
    POINTS_FILE,
    GT_BOXES_FILE,
    RANGE_FILE,
    WEIGHTS_FILE,
    BLOCK_FILE,
    FEATURES_FILE,
    CLOUD_FILE,
    KEYPOINTS_FILE,
    VOXEL_IDX_FILE,
    VOXEL_COUNT_FILE,
    VOXEL_MEAN_FILE,
    SGRID_WEIGHTS_FILE,
    ROI_FILE,
    REFINED_FILE,
)


class PipelineError(RuntimeError):
    """A stage failed; `stage` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage} failed: {message}")
        self.stage = stage


# ---------------------------------------------------------------------------
# Parameter packing for RWT1 files
# ---------------------------------------------------------------------------

_BRANCH_FIELDS = ("w1", "b1", "w2", "b2", "w_acc", "b_acc")


def _taker(tensors: dict[str, np.ndarray], source: str):
    remaining = dict(tensors)

    def take(name: str) -> np.ndarray:
        try:
            return remaining.pop(name)
        except KeyError:
            raise ValueError(f"{source}: missing tensor {name!r}") from None

    def finish():
        if remaining:
            raise ValueError(f"{source}: unexpected tensor {sorted(remaining)[0]!r}")

    return take, finish


def pack_rvfe_weights(
    block: BasicBlockParams, hdmk: HdMetaKernelParams
) -> dict[str, np.ndarray]:
    out = {
        "block.conv1": block.conv1,
        "block.scale1": block.scale1,
        "block.shift1": block.shift1,
        "block.conv2": block.conv2,
        "block.scale2": block.scale2,
        "block.shift2": block.shift2,
    }
    if block.proj is not None:
        out["block.proj"] = block.proj
    for tag, branch in (("branch1", hdmk.branch1), ("branch2", hdmk.branch2)):
        for field in _BRANCH_FIELDS:
            out[f"hdmk.{tag}.{field}"] = getattr(branch, field)
    return out


def unpack_rvfe_weights(
    tensors: dict[str, np.ndarray], source: str = "weights"
) -> tuple[BasicBlockParams, HdMetaKernelParams]:
    take, finish = _taker(tensors, source)
    block = BasicBlockParams(
        conv1=take("block.conv1"),
        scale1=take("block.scale1"),
        shift1=take("block.shift1"),
        conv2=take("block.conv2"),
        scale2=take("block.scale2"),
        shift2=take("block.shift2"),
        proj=take("block.proj") if "block.proj" in tensors else None,
    )
    branches = []
    for tag in ("branch1", "branch2"):
        fields = {f: take(f"hdmk.{tag}.{f}") for f in _BRANCH_FIELDS}
        branches.append(BranchParams(**fields))
    finish()
    return block, HdMetaKernelParams(*branches)


def _pack_mlp(out: dict, prefix: str, mlp: SharedMlp):
    for i, (weight, bias) in enumerate(mlp.layers):
        out[f"{prefix}.{i}.w"] = weight
        out[f"{prefix}.{i}.b"] = bias


def _unpack_mlp(tensors, take, prefix: str) -> SharedMlp:
    layers = []
    while f"{prefix}.{len(layers)}.w" in tensors:
        i = len(layers)
        layers.append((take(f"{prefix}.{i}.w"), take(f"{prefix}.{i}.b")))
    if not layers:
        raise ValueError(f"no layers found under {prefix!r}")
    return SharedMlp(tuple(layers))


def pack_sgrid_weights(params: SGridParams) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    _pack_mlp(out, "sgrid.fine", params.mlp_fine)
    _pack_mlp(out, "sgrid.coarse", params.mlp_coarse)
    _pack_mlp(out, "sgrid.head.trunk", params.trunk)
    out["sgrid.head.conf.w"] = params.w_conf
    out["sgrid.head.conf.b"] = params.b_conf
    out["sgrid.head.res.w"] = params.w_res
    out["sgrid.head.res.b"] = params.b_res
    return out


def unpack_sgrid_weights(
    tensors: dict[str, np.ndarray], source: str = "weights"
) -> SGridParams:
    take, finish = _taker(tensors, source)
    params = SGridParams(
        mlp_fine=_unpack_mlp(tensors, take, "sgrid.fine"),
        mlp_coarse=_unpack_mlp(tensors, take, "sgrid.coarse"),
        trunk=_unpack_mlp(tensors, take, "sgrid.head.trunk"),
        w_conf=take("sgrid.head.conf.w"),
        b_conf=take("sgrid.head.conf.b"),
        w_res=take("sgrid.head.res.w"),
        b_res=take("sgrid.head.res.b"),
    )
    finish()
    return params


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def stage_synth(spec_path, out_dir) -> dict:
    """Scene spec file to raw points plus ground-truth boxes."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scene = gen_synthetic_scene(parse_synth_spec(spec_path))
    records = np.concatenate(
        [scene.cloud.xyz, scene.cloud.intensity[:, None]], axis=1
    )
    formats.write_kitti_bin(out_dir / POINTS_FILE, records)
    formats.write_boxes(out_dir / GT_BOXES_FILE, scene.boxes)
    return {
        "boxes": len(scene.boxes),
        "foreground": scene.foreground_count,
        "background": scene.background_count,
    }


def stage_project(cfg: PipelineConfig, points_path, out_dir) -> dict:
    """Raw points to a five-plane range image."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = formats.read_kitti_bin_array(points_path)
    img = build_range_image(records, cfg.sensor)
    formats.write_rri1(out_dir / RANGE_FILE, img)
    return {
        "points": int(records.shape[0]),
        "valid_pixels": int(np.count_nonzero(img.valid)),
    }


def stage_redeem(cfg: PipelineConfig, range_path, out_dir) -> dict:
    """Range image through the conv block and meta kernel to a feature cloud."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    img = formats.read_rri1(range_path, cfg.sensor)

    block = init_basicblock(cfg.seed, cfg.conv_channels)
    hdmk = init_params(cfg.seed, (cfg.conv_channels, cfg.mlp_hidden, cfg.feature_dim))
    formats.write_rwt1(out_dir / WEIGHTS_FILE, pack_rvfe_weights(block, hdmk))
    block, hdmk = unpack_rvfe_weights(
        formats.read_rwt1(out_dir / WEIGHTS_FILE), WEIGHTS_FILE
    )

    block_img = basicblock_forward(img, block, cfg.wrap_horizontal)
    formats.write_rri1(out_dir / BLOCK_FILE, block_img)
    block_img = formats.read_rri1(out_dir / BLOCK_FILE, cfg.sensor)

    feat_img = hdmk_forward(block_img, hdmk, cfg.wrap_horizontal)
    formats.write_rri1(out_dir / FEATURES_FILE, feat_img)
    feat_img = formats.read_rri1(out_dir / FEATURES_FILE, cfg.sensor)

    cloud = redeem_feature_points(feat_img, cfg.feature_dim)
    formats.write_rfp1(out_dir / CLOUD_FILE, cloud)
    return {"redeemed_points": len(cloud), "feature_dim": cloud.feature_dim}


def stage_fps(cfg: PipelineConfig, cloud_path, out_dir) -> dict:
    """Feature cloud down to the configured keypoint budget."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cloud = formats.read_rfp1(cloud_path)
    keypoints = furthest_point_sampling(cloud, cfg.keypoint_count)
    kp_cloud = FeaturePointCloud(
        keypoints.xyz, cloud.intensity[keypoints.indices], keypoints.features
    )
    formats.write_rfp1(out_dir / KEYPOINTS_FILE, kp_cloud)
    return {"requested": cfg.keypoint_count, "kept": len(kp_cloud)}


def write_voxel_grid(out_dir, grid: VoxelGrid) -> None:
    """Persist a voxel grid losslessly as three npy arrays.

    The dense BEV map is huge but almost entirely zero, so the artifact
    stores the occupied cells in their deterministic (sorted flat index)
    order; `read_voxel_grid` plus `bev_flatten` reproduces the dense map
    bit for bit.
    """
    out_dir = Path(out_dir)
    cells = list(grid.voxels.items())
    idx = np.array([c[0] for c in cells], dtype=np.int64).reshape(len(cells), 3)
    counts = np.array([c[1][0] for c in cells], dtype=np.int64)
    means = (
        np.stack([c[1][1] for c in cells])
        if cells
        else np.zeros((0, grid.feature_dim))
    )
    np.save(out_dir / VOXEL_IDX_FILE, idx)
    np.save(out_dir / VOXEL_COUNT_FILE, counts)
    np.save(out_dir / VOXEL_MEAN_FILE, means)


def read_voxel_grid(out_dir, cfg: PipelineConfig) -> VoxelGrid:
    """Rebuild the persisted voxel grid; geometry comes from the config."""
    out_dir = Path(out_dir)
    idx = np.load(out_dir / VOXEL_IDX_FILE)
    counts = np.load(out_dir / VOXEL_COUNT_FILE)
    means = np.load(out_dir / VOXEL_MEAN_FILE)
    size = np.asarray(cfg.voxel_size)
    lo = np.asarray(cfg.range_min)
    hi = np.asarray(cfg.range_max)
    shape = tuple(int(s) for s in np.ceil((hi - lo) / size))
    voxels = {
        tuple(int(i) for i in idx[k]): (int(counts[k]), means[k])
        for k in range(idx.shape[0])
    }
    return VoxelGrid(
        tuple(cfg.voxel_size), tuple(cfg.range_min), tuple(cfg.range_max),
        shape, means.shape[1], voxels,
    )


def stage_voxelize(cfg: PipelineConfig, cloud_path, out_dir) -> dict:
    """Feature cloud to a BEV feature map, persisted as its sparse grid."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cloud = formats.read_rfp1(cloud_path)
    grid = voxelize(cloud, cfg.voxel_size, cfg.range_min, cfg.range_max)
    bev = bev_flatten(grid)
    write_voxel_grid(out_dir, grid)
    return {
        "in_range_points": grid.total_count,
        "occupied_voxels": len(grid.voxels),
        "bev_shape": "x".join(str(s) for s in bev.shape),
    }


def stage_pool(cfg: PipelineConfig, keypoints_path, boxes_path, out_dir) -> dict:
    """Keypoints plus boxes to pooled RoI vectors and refined detections."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    kp_cloud = formats.read_rfp1(keypoints_path)
    boxes = formats.read_boxes(boxes_path)

    params = init_sgrid_params(cfg.seed, cfg.sgrid, kp_cloud.feature_dim)
    formats.write_rwt1(out_dir / SGRID_WEIGHTS_FILE, pack_sgrid_weights(params))
    params = unpack_sgrid_weights(
        formats.read_rwt1(out_dir / SGRID_WEIGHTS_FILE), SGRID_WEIGHTS_FILE
    )

    keypoints = KeypointSet(
        np.arange(len(kp_cloud)), kp_cloud.xyz, kp_cloud.features
    )
    rois = sgrid_pool(keypoints, boxes, cfg.sgrid, params)
    roi_len = cfg.sgrid.fine_grid**3 * (
        cfg.sgrid.fine_channels + cfg.sgrid.coarse_channels
    )
    vectors = (
        np.stack([roi.vector for roi in rois])
        if rois
        else np.zeros((0, roi_len))
    )
    formats.write_rrf1(out_dir / ROI_FILE, vectors)
    vectors = formats.read_rrf1(out_dir / ROI_FILE)

    lines = ["# confidence dcx dcy dcz dlength dwidth dheight dyaw"]
    for roi, vector in zip(rois, vectors):
        conf, residuals = refine_head_forward(
            RoIFeature(vector, roi.fine_empty, roi.coarse_empty), params
        )
        lines.append(" ".join(repr(float(v)) for v in (conf, *residuals)))
    (out_dir / REFINED_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return {"boxes": len(boxes), "roi_length": roi_len}


# ---------------------------------------------------------------------------
# One-shot pipeline
# ---------------------------------------------------------------------------

def _checksum_artifacts(out_dir: Path) -> dict[str, str]:
    out = {}
    for name in ARTIFACT_ORDER:
        path = out_dir / name
        if path.exists():
            out[name] = formats.sha256_file(path)
    return out


def _write_reports(
    out_dir: Path,
    status: str,
    input_path,
    infos: dict,
    timings: dict,
    notes: list[str],
) -> dict[str, str]:
    checksums = _checksum_artifacts(out_dir)
    (out_dir / CHECKSUMS_FILE).write_text(
        "".join(f"{digest}  {name}\n" for name, digest in checksums.items()),
        encoding="utf-8",
    )
    lines = [f"status: {status}", f"input: {Path(input_path).name}"]
    lines += [f"note: {note}" for note in notes]
    for name, info in infos.items():
        counts = " ".join(f"{k}={v}" for k, v in info.items())
        lines.append(f"stage {name}: {counts} ({timings[name]:.3f} s)")
    for name, digest in checksums.items():
        size = (out_dir / name).stat().st_size
        lines.append(f"artifact {name}: sha256={digest} ({size} bytes)")
    (out_dir / SUMMARY_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return checksums


def run_pipeline(
    cfg: PipelineConfig, input_path, out_dir, boxes_path=None
) -> dict:
    """Run every stage the input allows and write artifacts plus reports.

    `input_path` may be a synthetic scene spec (.synth), raw points (.bin),
    or a prebuilt range image (.rri1). Box pooling runs when a box file is
    supplied or the scene is synthetic (ground truth); otherwise it is
    skipped with a note. Any stage failure aborts with that stage's name;
    the summary then flags the artifact list as partial.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    input_path = Path(input_path)

    infos: dict[str, dict] = {}
    timings: dict[str, float] = {}
    notes: list[str] = []

    def run(name: str, fn, *args):
        start = time.perf_counter()
        try:
            result = fn(*args)
        except Exception as exc:
            notes.append("partial output: one stage failed, artifact list is incomplete")
            _write_reports(
                out_dir, f"failed at stage {name}: {exc}", input_path,
                infos, timings, notes,
            )
            raise PipelineError(name, str(exc)) from exc
        infos[name] = result
        timings[name] = time.perf_counter() - start
        return result

    suffix = input_path.suffix.lower()
    if suffix == ".synth":
        run("synth", stage_synth, input_path, out_dir)
        points_path = out_dir / POINTS_FILE
        if boxes_path is None:
            boxes_path = out_dir / GT_BOXES_FILE
    elif suffix == ".bin":
        points_path = input_path
    elif suffix == ".rri1":
        points_path = None
    else:
        raise PipelineError(
            "input", f"unrecognized input type {suffix!r}; want .synth, .bin, or .rri1"
        )

    if points_path is not None:
        run("project", stage_project, cfg, points_path, out_dir)
        range_path = out_dir / RANGE_FILE
    else:
        range_path = input_path

    run("redeem", stage_redeem, cfg, range_path, out_dir)
    run("voxelize", stage_voxelize, cfg, out_dir / CLOUD_FILE, out_dir)
    run("fps", stage_fps, cfg, out_dir / CLOUD_FILE, out_dir)

    if boxes_path is None:
        notes.append("pool skipped: no box file given and input has no ground truth")
    else:
        run("pool", stage_pool, cfg, out_dir / KEYPOINTS_FILE, boxes_path, out_dir)

    checksums = _write_reports(out_dir, "ok", input_path, infos, timings, notes)
    log.info("pipeline finished: %d artifacts in %s", len(checksums), out_dir)
    return {
        "status": "ok",
        "out_dir": str(out_dir),
        "stages": infos,
        "timings": timings,
        "notes": notes,
        "checksums": checksums,
    }


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def gradcheck_instance(
    seed: int, dims: tuple[int, int, int], height: int, width: int
):
    """Deterministic (image, params, upstream) triple for gradient checks.

    The image has plausible geometry: pixel-center rays at random ranges,
    about 15 percent of pixels dropped, features uniform in [-1, 1].
    """
    c_in = dims[0]
    sensor = SensorModel(height, width, fov_up=0.3, fov_down=0.3)
    rng = DetRng(derive_seed(seed, STREAM_SCENE))
    n = height * width
    valid = rng.uniforms(n) < 0.85
    if not valid.any():
        valid[0] = True
    ranges = rng.uniforms(n, 2.0, 10.0)
    intensity = rng.uniforms(n)
    feats = rng.uniforms(c_in * n, -1.0, 1.0).reshape(c_in, height, width)
    cols, rows = np.meshgrid(np.arange(width), np.arange(height))
    xyz = unproject_pixels(
        cols.ravel() + 0.5, rows.ravel() + 0.5, ranges, sensor
    )
    channels = np.concatenate(
        [
            xyz.T.reshape(3, height, width),
            intensity.reshape(1, height, width),
            ranges.reshape(1, height, width),
            feats,
        ]
    )
    channels *= valid.reshape(height, width)
    img = RangeImage(sensor, channels, valid.reshape(height, width))
    params = init_params(seed, dims)
    upstream = rng.uniforms(params.c_out * n, -1.0, 1.0).reshape(
        params.c_out, height, width
    )
    return img, params, upstream


def _branch_dict(branch: BranchParams) -> dict[str, np.ndarray]:
    return {field: getattr(branch, field) for field in _BRANCH_FIELDS}


def run_gradcheck(
    seed: int = 0,
    dims: tuple[int, int, int] = (4, 6, 8),
    height: int = 6,
    width: int = 10,
    step: float = 1e-5,
    wrap_horizontal: bool = True,
    params: HdMetaKernelParams | None = None,
) -> tuple[bool, list[dict]]:
    """Central finite differences against the analytic meta-kernel backward.

    Checks every element of the input feature planes and of every parameter
    tensor in both branches. An element passes when
    |analytic - fd| <= max(1e-4 * max(|analytic|, |fd|), 1e-7). Returns
    (all passed, per-slice reports).
    """
    if params is not None:
        dims = (params.c_in, params.c_mid, params.c_out)
    img, init, upstream = gradcheck_instance(seed, dims, height, width)
    if params is None:
        params = init

    coords = img.channels[:3]
    valid = img.valid
    base_feat = img.feature_planes.copy()
    tensors = {"feat": base_feat}
    for tag, branch in (("branch1", params.branch1), ("branch2", params.branch2)):
        for field, value in _branch_dict(branch).items():
            tensors[f"{tag}.{field}"] = value.copy()

    def loss(active: dict[str, np.ndarray]) -> float:
        rebuilt = HdMetaKernelParams(
            BranchParams(**{f: active[f"branch1.{f}"] for f in _BRANCH_FIELDS}),
            BranchParams(**{f: active[f"branch2.{f}"] for f in _BRANCH_FIELDS}),
        )
        out = hdmk_forward_planes(
            active["feat"] * valid, coords, valid, rebuilt, wrap_horizontal
        )
        return float(np.sum(upstream * out))

    grads = hdmk_backward(img, params, upstream, wrap_horizontal)
    analytic = {"feat": grads.feat}
    for tag, branch_grads in (("branch1", grads.branch1), ("branch2", grads.branch2)):
        for field in _BRANCH_FIELDS:
            analytic[f"{tag}.{field}"] = getattr(branch_grads, field)

    reports = []
    all_ok = True
    for name, tensor in tensors.items():
        worst_abs = 0.0
        worst_margin = 0.0
        for index in np.ndindex(tensor.shape):
            saved = tensor[index]
            tensor[index] = saved + step
            high = loss(tensors)
            tensor[index] = saved - step
            low = loss(tensors)
            tensor[index] = saved
            fd = (high - low) / (2.0 * step)
            a = float(analytic[name][index])
            diff = abs(a - fd)
            allowed = max(1e-4 * max(abs(a), abs(fd)), 1e-7)
            worst_abs = max(worst_abs, diff)
            worst_margin = max(worst_margin, diff / allowed)
        ok = worst_margin <= 1.0
        all_ok = all_ok and ok
        reports.append(
            {
                "slice": name,
                "elements": int(np.prod(tensor.shape)),
                "max_abs_diff": worst_abs,
                "worst_margin": worst_margin,
                "ok": ok,
            }
        )
    return all_ok, reports
