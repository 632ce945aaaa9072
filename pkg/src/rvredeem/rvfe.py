"""Range-view feature extraction.

Two layers operate on range images:

* BasicBlock: a residual unit of two masked 3x3 convolutions with
  per-channel affine normalization, lifting the five raw planes to c_in
  feature planes.
* The hierarchical-dilated meta kernel: two branches sample 3x3
  neighborhoods at strides 1 and 2. Each branch weights every neighbor's
  feature vector by a small perceptron applied to the 3D coordinate delta
  between neighbor and center, concatenates the nine weighted vectors, and
  maps them through a dense accumulator to half the output width. The two
  halves concatenate to the output embedding.

Boundary policy: rows never wrap (zero contribution outside the image);
columns wrap when `wrap_horizontal` is set, matching a full-circle scan.
A neighbor that is missing or masked invalid contributes an exact zero
vector, so masked pixels can never influence a valid pixel's output.

The meta kernel has an analytic backward pass (coordinates are constants;
gradients flow to input features and all parameters). BasicBlock is
forward-only.

All arithmetic is 64-bit. Initializers emit values that are exactly
representable in single precision so weights survive a 32-bit serialization
round trip bit-identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import BASE_CHANNELS, RangeImage
from .rng import STREAM_BASICBLOCK, STREAM_HDMK, DetRng, derive_seed

_OFFSET_UNIT = tuple(
    (dh, dw) for dh in (-1, 0, 1) for dw in (-1, 0, 1)
)


@dataclass(frozen=True)
class KernelOffsets:
    """Ordered (d_h, d_w) sampling offsets for one branch."""

    offsets: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if len(self.offsets) != 9:
            raise ValueError(f"expected 9 offsets, got {len(self.offsets)}")

    @classmethod
    def unit(cls) -> "KernelOffsets":
        """The 9 offsets with d_h, d_w in {-1, 0, 1}, row-major."""
        return cls(_OFFSET_UNIT)

    @classmethod
    def dilated(cls) -> "KernelOffsets":
        """The unit offsets doubled, reaching two pixels out."""
        return cls(tuple((2 * dh, 2 * dw) for dh, dw in _OFFSET_UNIT))


def _check_finite(name: str, arr: np.ndarray):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")


def _as_f64(arr) -> np.ndarray:
    # Always copy: freezing an array the caller still holds would silently
    # make their object read-only.
    out = np.array(arr, dtype=np.float64, order="C")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class BranchParams:
    """One meta-kernel branch: weight perceptron plus dense accumulator.

    The perceptron maps a 3D coordinate delta to a per-channel weight
    vector: w2 @ relu(w1 @ delta + b1) + b2. The accumulator maps the
    concatenated 9 weighted neighbor vectors to the branch output.
    """

    w1: np.ndarray  # (c_mid, 3)
    b1: np.ndarray  # (c_mid,)
    w2: np.ndarray  # (c_in, c_mid)
    b2: np.ndarray  # (c_in,)
    w_acc: np.ndarray  # (c_half, 9 * c_in)
    b_acc: np.ndarray  # (c_half,)

    def __post_init__(self):
        for name in ("w1", "b1", "w2", "b2", "w_acc", "b_acc"):
            arr = _as_f64(getattr(self, name))
            _check_finite(name, arr)
            object.__setattr__(self, name, arr)
        c_mid = self.w1.shape[0]
        c_in = self.w2.shape[0]
        if self.w1.shape != (c_mid, 3) or self.b1.shape != (c_mid,):
            raise ValueError("weight perceptron first layer must be (c_mid, 3)")
        if self.w2.shape != (c_in, c_mid) or self.b2.shape != (c_in,):
            raise ValueError("weight perceptron second layer must be (c_in, c_mid)")
        if self.w_acc.ndim != 2 or self.w_acc.shape[1] != 9 * c_in:
            raise ValueError(
                f"accumulator must take 9*c_in = {9 * c_in} inputs, got {self.w_acc.shape}"
            )
        if self.b_acc.shape != (self.w_acc.shape[0],):
            raise ValueError("accumulator bias shape mismatch")


@dataclass(frozen=True)
class HdMetaKernelParams:
    """Parameters of both branches; the branch outputs concatenate to c_out."""

    branch1: BranchParams
    branch2: BranchParams

    def __post_init__(self):
        if self.branch1.w2.shape[0] != self.branch2.w2.shape[0]:
            raise ValueError("branches must share c_in")
        if self.branch1.w_acc.shape[0] != self.branch2.w_acc.shape[0]:
            raise ValueError("branches must produce equal half-widths")

    @property
    def c_in(self) -> int:
        return self.branch1.w2.shape[0]

    @property
    def c_mid(self) -> int:
        return self.branch1.w1.shape[0]

    @property
    def c_out(self) -> int:
        return 2 * self.branch1.w_acc.shape[0]


@dataclass(frozen=True)
class BasicBlockParams:
    """Residual unit parameters: conv-norm-act twice plus a residual path.

    Normalization is a fixed per-channel affine (inference mode). `proj` is
    the 1x1 residual projection; None means identity, allowed only when the
    channel counts already agree.
    """

    conv1: np.ndarray  # (c_out, c_in, 3, 3)
    scale1: np.ndarray  # (c_out,)
    shift1: np.ndarray  # (c_out,)
    conv2: np.ndarray  # (c_out, c_out, 3, 3)
    scale2: np.ndarray  # (c_out,)
    shift2: np.ndarray  # (c_out,)
    proj: np.ndarray | None  # (c_out, c_in) or None

    def __post_init__(self):
        for name in ("conv1", "scale1", "shift1", "conv2", "scale2", "shift2"):
            arr = _as_f64(getattr(self, name))
            _check_finite(name, arr)
            object.__setattr__(self, name, arr)
        if self.conv1.ndim != 4 or self.conv1.shape[2:] != (3, 3):
            raise ValueError(f"conv1 must be (c_out, c_in, 3, 3), got {self.conv1.shape}")
        c_out, c_in = self.conv1.shape[:2]
        if self.conv2.shape != (c_out, c_out, 3, 3):
            raise ValueError(f"conv2 must be ({c_out}, {c_out}, 3, 3), got {self.conv2.shape}")
        for name in ("scale1", "shift1", "scale2", "shift2"):
            if getattr(self, name).shape != (c_out,):
                raise ValueError(f"{name} must be ({c_out},)")
        if self.proj is None:
            if c_in != c_out:
                raise ValueError(
                    f"identity residual needs matching channels, got {c_in} -> {c_out}"
                )
        else:
            proj = _as_f64(self.proj)
            _check_finite("proj", proj)
            if proj.shape != (c_out, c_in):
                raise ValueError(f"proj must be ({c_out}, {c_in}), got {proj.shape}")
            object.__setattr__(self, "proj", proj)

    @property
    def c_in(self) -> int:
        return self.conv1.shape[1]

    @property
    def c_out(self) -> int:
        return self.conv1.shape[0]


# ---------------------------------------------------------------------------
# Shifted views with the boundary policy
# ---------------------------------------------------------------------------

def shift_planes(arr: np.ndarray, dh: int, dw: int, wrap_horizontal: bool) -> np.ndarray:
    """Values at (r + dh, c + dw) per pixel, zero-filled outside the image.

    Rows never wrap. Columns wrap only when requested.
    """
    out = np.roll(arr, (-dh, -dw), axis=(-2, -1))
    h, w = arr.shape[-2], arr.shape[-1]
    if dh > 0:
        out[..., h - dh:, :] = 0
    elif dh < 0:
        out[..., : -dh, :] = 0
    if not wrap_horizontal:
        if dw > 0:
            out[..., :, w - dw:] = 0
        elif dw < 0:
            out[..., :, : -dw] = 0
    return out


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


# ---------------------------------------------------------------------------
# BasicBlock
# ---------------------------------------------------------------------------

def masked_conv3x3(
    planes: np.ndarray,
    valid: np.ndarray,
    weight: np.ndarray,
    wrap_horizontal: bool,
) -> np.ndarray:
    """3x3 convolution where masked or out-of-image neighbors contribute 0.

    Output is zeroed at invalid center pixels. Accumulation order over the
    9 taps is fixed, so results are deterministic.
    """
    c_out = weight.shape[0]
    h, w = planes.shape[-2], planes.shape[-1]
    masked = planes * valid
    out = np.zeros((c_out, h, w), dtype=np.float64)
    flat = masked.reshape(masked.shape[0], h * w)
    for k, (dh, dw) in enumerate(_OFFSET_UNIT):
        shifted = shift_planes(masked, dh, dw, wrap_horizontal)
        tap = weight[:, :, dh + 1, dw + 1]
        out += (tap @ shifted.reshape(flat.shape)).reshape(c_out, h, w)
    return out * valid


def basicblock_forward(
    img: RangeImage, params: BasicBlockParams, wrap_horizontal: bool = True
) -> RangeImage:
    """Residual conv unit over the five raw planes.

    out = relu(norm2(conv2(relu(norm1(conv1(x))))) + proj(x)), computed at
    valid pixels; the validity mask passes through unchanged.
    """
    if img.plane_count != BASE_CHANNELS:
        raise ValueError(
            f"expected a raw {BASE_CHANNELS}-plane image, got {img.plane_count} planes"
        )
    if params.c_in != BASE_CHANNELS:
        raise ValueError(
            f"params expect {params.c_in} input planes, image has {BASE_CHANNELS}"
        )
    x = img.channels
    valid = img.valid
    t = masked_conv3x3(x, valid, params.conv1, wrap_horizontal)
    t = _relu(t * params.scale1[:, None, None] + params.shift1[:, None, None] * valid)
    t = masked_conv3x3(t, valid, params.conv2, wrap_horizontal)
    t = t * params.scale2[:, None, None] + params.shift2[:, None, None] * valid
    if params.proj is None:
        res = x * valid
    else:
        h, w = valid.shape
        res = (params.proj @ (x * valid).reshape(x.shape[0], h * w)).reshape(
            params.c_out, h, w
        )
    out = _relu(t + res) * valid
    return img.with_features(out)


# ---------------------------------------------------------------------------
# HD meta kernel
# ---------------------------------------------------------------------------

_BRANCH_OFFSETS = (KernelOffsets.unit().offsets, KernelOffsets.dilated().offsets)


def _check_hdmk_input(feat: RangeImage, params: HdMetaKernelParams):
    d_f = feat.plane_count - BASE_CHANNELS
    if d_f < 1:
        raise ValueError("meta kernel input carries no feature planes")
    if d_f != params.c_in:
        raise ValueError(f"params expect c_in={params.c_in}, image has {d_f} feature planes")


def _branch_forward(
    branch: BranchParams,
    offsets,
    feats: np.ndarray,
    coords: np.ndarray,
    valid: np.ndarray,
    wrap_horizontal: bool,
):
    """Branch output (c_half, h*w) plus saved intermediates for backward."""
    c_in, h, w = feats.shape
    n_px = h * w
    coords_flat = coords.reshape(3, n_px)
    saved = []
    chunks = np.empty((9 * c_in, n_px), dtype=np.float64)
    for k, (dh, dw) in enumerate(offsets):
        neigh_feat = shift_planes(feats, dh, dw, wrap_horizontal).reshape(c_in, n_px)
        neigh_valid = shift_planes(valid, dh, dw, wrap_horizontal).reshape(n_px)
        delta = (
            shift_planes(coords, dh, dw, wrap_horizontal).reshape(3, n_px)
            - coords_flat
        ) * neigh_valid
        pre = branch.w1 @ delta + branch.b1[:, None]
        hid = _relu(pre)
        gate = branch.w2 @ hid + branch.b2[:, None]
        weighted = gate * neigh_feat * neigh_valid
        chunks[k * c_in : (k + 1) * c_in] = weighted
        saved.append((neigh_feat, neigh_valid, delta, pre, hid, gate))
    out = branch.w_acc @ chunks + branch.b_acc[:, None]
    return out, chunks, saved


def hdmk_forward_planes(
    feats: np.ndarray,
    coords: np.ndarray,
    valid: np.ndarray,
    params: HdMetaKernelParams,
    wrap_horizontal: bool = True,
) -> np.ndarray:
    """Raw-array meta kernel: (c_in, h, w) features to (c_out, h, w).

    Values stored at invalid pixels never reach the output; the result is
    zero at invalid pixels.
    """
    h, w = valid.shape
    if feats.ndim != 3 or feats.shape[1:] != (h, w):
        raise ValueError(f"features must be (c_in, {h}, {w}), got {feats.shape}")
    if coords.shape != (3, h, w):
        raise ValueError(f"coords must be (3, {h}, {w}), got {coords.shape}")
    halves = []
    for branch, offsets in zip((params.branch1, params.branch2), _BRANCH_OFFSETS):
        out, _, _ = _branch_forward(
            branch, offsets, feats, coords, valid, wrap_horizontal
        )
        halves.append(out)
    full = np.concatenate(halves, axis=0).reshape(params.c_out, h, w)
    return full * valid


def hdmk_forward(
    feat: RangeImage, params: HdMetaKernelParams, wrap_horizontal: bool = True
) -> RangeImage:
    """Two-branch dynamic convolution over a feature-bearing range image.

    Consumes the stored (x, y, z) planes for coordinate deltas and the
    feature planes for neighbor values; emits c_out feature planes on the
    same validity mask.
    """
    _check_hdmk_input(feat, params)
    full = hdmk_forward_planes(
        feat.feature_planes, feat.channels[:3], feat.valid, params, wrap_horizontal
    )
    return feat.with_features(full)


@dataclass(frozen=True)
class BranchGrads:
    """Gradients mirroring BranchParams."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w_acc: np.ndarray
    b_acc: np.ndarray


@dataclass(frozen=True)
class HdMetaKernelGrads:
    """Gradients of <upstream, output> for inputs and every parameter."""

    feat: np.ndarray  # (c_in, h, w)
    branch1: BranchGrads
    branch2: BranchGrads


def hdmk_backward(
    feat: RangeImage,
    params: HdMetaKernelParams,
    upstream_grad: np.ndarray,
    wrap_horizontal: bool = True,
) -> HdMetaKernelGrads:
    """Exact gradients of sum(upstream_grad * hdmk_forward(feat)).

    Coordinate planes are constants. Accumulation runs in a fixed order
    (branch, then offset), so repeated calls are bit-identical.
    """
    _check_hdmk_input(feat, params)
    c_in = params.c_in
    h, w = feat.valid.shape
    n_px = h * w
    grad = np.asarray(upstream_grad, dtype=np.float64)
    if grad.shape != (params.c_out, h, w):
        raise ValueError(
            f"upstream gradient must be ({params.c_out}, {h}, {w}), got {grad.shape}"
        )
    # Invalid output pixels are identically zero, so no gradient flows there.
    grad = (grad * feat.valid).reshape(params.c_out, n_px)
    feats = feat.feature_planes
    coords = feat.channels[:3]
    c_half = params.c_out // 2

    d_feat = np.zeros((c_in, h, w), dtype=np.float64)
    branch_grads = []
    for b, (branch, offsets) in enumerate(
        zip((params.branch1, params.branch2), _BRANCH_OFFSETS)
    ):
        _, chunks, saved = _branch_forward(
            branch, offsets, feats, coords, feat.valid, wrap_horizontal
        )
        g_out = grad[b * c_half : (b + 1) * c_half]
        d_w_acc = g_out @ chunks.T
        d_b_acc = np.sum(g_out, axis=1)
        d_chunks = branch.w_acc.T @ g_out  # (9*c_in, n_px)

        d_w1 = np.zeros_like(branch.w1)
        d_b1 = np.zeros_like(branch.b1)
        d_w2 = np.zeros_like(branch.w2)
        d_b2 = np.zeros_like(branch.b2)
        for k, (dh, dw) in enumerate(offsets):
            neigh_feat, neigh_valid, delta, pre, hid, gate = saved[k]
            d_weighted = d_chunks[k * c_in : (k + 1) * c_in] * neigh_valid
            # Feature gradient scatters back to where the neighbor lives.
            d_neigh = (d_weighted * gate).reshape(c_in, h, w)
            d_feat += shift_planes(d_neigh, -dh, -dw, wrap_horizontal)
            # Gate gradient stays at the center pixel.
            d_gate = d_weighted * neigh_feat
            d_w2 += d_gate @ hid.T
            d_b2 += np.sum(d_gate, axis=1)
            d_pre = (branch.w2.T @ d_gate) * (pre > 0.0)
            d_w1 += d_pre @ delta.T
            d_b1 += np.sum(d_pre, axis=1)
        branch_grads.append(
            BranchGrads(d_w1, d_b1, d_w2, d_b2, d_w_acc, d_b_acc)
        )
    return HdMetaKernelGrads(d_feat, branch_grads[0], branch_grads[1])


# ---------------------------------------------------------------------------
# Deterministic initialization
# ---------------------------------------------------------------------------

def _f32_grid(arr: np.ndarray) -> np.ndarray:
    """Round to the nearest single-precision value (stays float64).

    Keeps a 32-bit serialization round trip bit-exact.
    """
    return np.asarray(arr, dtype=np.float32).astype(np.float64)


def _uniform_tensor(rng: DetRng, shape, limit: float) -> np.ndarray:
    return _f32_grid(rng.uniforms(int(np.prod(shape)), -limit, limit).reshape(shape))


def _glorot_limit(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


BIAS_LIMIT = 0.1


def _init_branch(rng: DetRng, c_in: int, c_mid: int, c_half: int) -> BranchParams:
    return BranchParams(
        w1=_uniform_tensor(rng, (c_mid, 3), _glorot_limit(3, c_mid)),
        b1=_uniform_tensor(rng, (c_mid,), BIAS_LIMIT),
        w2=_uniform_tensor(rng, (c_in, c_mid), _glorot_limit(c_mid, c_in)),
        b2=_uniform_tensor(rng, (c_in,), BIAS_LIMIT),
        w_acc=_uniform_tensor(rng, (c_half, 9 * c_in), _glorot_limit(9 * c_in, c_half)),
        b_acc=_uniform_tensor(rng, (c_half,), BIAS_LIMIT),
    )


def init_params(seed: int, dims: tuple[int, int, int]) -> HdMetaKernelParams:
    """Deterministic meta-kernel parameters for (c_in, c_mid, c_out).

    Weights are uniform within the usual fan-balanced limit
    sqrt(6 / (fan_in + fan_out)); biases are uniform within 0.1. The same
    seed always yields bit-identical tensors.
    """
    c_in, c_mid, c_out = dims
    if min(c_in, c_mid, c_out) < 1:
        raise ValueError(f"dims must be positive, got {dims}")
    if c_out % 2 != 0:
        raise ValueError(f"c_out must be even, got {c_out}")
    rng = DetRng(derive_seed(seed, STREAM_HDMK))
    branch1 = _init_branch(rng, c_in, c_mid, c_out // 2)
    branch2 = _init_branch(rng, c_in, c_mid, c_out // 2)
    return HdMetaKernelParams(branch1, branch2)


def init_basicblock(seed: int, c_out: int, c_in: int = BASE_CHANNELS) -> BasicBlockParams:
    """Deterministic BasicBlock parameters lifting c_in planes to c_out."""
    if min(c_in, c_out) < 1:
        raise ValueError("channel counts must be positive")
    rng = DetRng(derive_seed(seed, STREAM_BASICBLOCK))
    lim1 = _glorot_limit(9 * c_in, c_out)
    lim2 = _glorot_limit(9 * c_out, c_out)
    conv1 = _uniform_tensor(rng, (c_out, c_in, 3, 3), lim1)
    scale1 = _f32_grid(rng.uniforms(c_out, 0.9, 1.1))
    shift1 = _uniform_tensor(rng, (c_out,), BIAS_LIMIT)
    conv2 = _uniform_tensor(rng, (c_out, c_out, 3, 3), lim2)
    scale2 = _f32_grid(rng.uniforms(c_out, 0.9, 1.1))
    shift2 = _uniform_tensor(rng, (c_out,), BIAS_LIMIT)
    proj = (
        None
        if c_in == c_out
        else _uniform_tensor(rng, (c_out, c_in), _glorot_limit(c_in, c_out))
    )
    return BasicBlockParams(conv1, scale1, shift1, conv2, scale2, shift2, proj)
