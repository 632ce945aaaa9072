"""Range-view 3D detection core: projection, dynamic kernels, point ops."""

import os as _os

# RR_THREADS caps the BLAS worker pools. The env vars only take effect if
# they are set before numpy first loads, hence this runs ahead of any
# submodule import. Already-set variables are left alone.
if "RR_THREADS" in _os.environ:
    _threads = _os.environ["RR_THREADS"]
    if not _threads.isdigit() or int(_threads) < 1:
        raise RuntimeError(f"RR_THREADS must be a positive integer, got {_threads!r}")
    for _var in (
        "OPENBLAS_NUM_THREADS",
        "OMP_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        _os.environ.setdefault(_var, _threads)

from .core import (
    Box3D,
    ConfigError,
    FeaturePointCloud,
    PipelineConfig,
    Point,
    RangeImage,
    SensorModel,
    SGridConfig,
    load_config,
)

__version__ = "0.1.0"

__all__ = [
    "Box3D",
    "ConfigError",
    "FeaturePointCloud",
    "PipelineConfig",
    "Point",
    "RangeImage",
    "SensorModel",
    "SGridConfig",
    "load_config",
    "__version__",
]
