"""Shared builders for randomized test instances."""

from __future__ import annotations

import math

import numpy as np

from rvredeem.core import RangeImage, SensorModel
from rvredeem.rvfe import BasicBlockParams, BranchParams, HdMetaKernelParams


def make_sensor(h: int, w: int) -> SensorModel:
    return SensorModel(height=h, width=w, fov_up=math.pi / 8, fov_down=math.pi / 8)


def random_image(rng, h=8, w=16, n_feat=0, density=0.75) -> RangeImage:
    """Range image with a random mask and random per-pixel values.

    Coordinates are arbitrary (the type does not require projection
    consistency), ranges strictly positive, planes zeroed where invalid.
    """
    valid = rng.random((h, w)) < density
    planes = np.zeros((5 + n_feat, h, w), dtype=np.float64)
    planes[:3] = rng.uniform(-10.0, 10.0, size=(3, h, w))
    planes[3] = rng.uniform(0.0, 1.0, size=(h, w))
    planes[4] = rng.uniform(0.5, 40.0, size=(h, w))
    if n_feat:
        planes[5:] = rng.normal(size=(n_feat, h, w))
    planes *= valid
    return RangeImage(make_sensor(h, w), planes, valid)


def random_branch(rng, c_in, c_mid, c_half) -> BranchParams:
    return BranchParams(
        w1=rng.normal(scale=0.5, size=(c_mid, 3)),
        b1=rng.normal(scale=0.2, size=c_mid),
        w2=rng.normal(scale=0.5, size=(c_in, c_mid)),
        b2=rng.normal(scale=0.2, size=c_in),
        w_acc=rng.normal(scale=0.3, size=(c_half, 9 * c_in)),
        b_acc=rng.normal(scale=0.2, size=c_half),
    )


def random_hdmk_params(rng, c_in=4, c_mid=5, c_out=6) -> HdMetaKernelParams:
    half = c_out // 2
    return HdMetaKernelParams(
        random_branch(rng, c_in, c_mid, half),
        random_branch(rng, c_in, c_mid, half),
    )


def random_basicblock_params(rng, c_out=6, c_in=5) -> BasicBlockParams:
    return BasicBlockParams(
        conv1=rng.normal(scale=0.3, size=(c_out, c_in, 3, 3)),
        scale1=rng.uniform(0.8, 1.2, size=c_out),
        shift1=rng.normal(scale=0.1, size=c_out),
        conv2=rng.normal(scale=0.3, size=(c_out, c_out, 3, 3)),
        scale2=rng.uniform(0.8, 1.2, size=c_out),
        shift2=rng.normal(scale=0.1, size=c_out),
        proj=None if c_in == c_out else rng.normal(scale=0.3, size=(c_out, c_in)),
    )
