"""Dual noise estimation for coarse-to-fine hand mesh refinement."""

import os as _os

# DNE_THREADS caps BLAS worker threads; it must be applied before numpy loads.
if _os.environ.get("DNE_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["DNE_THREADS"])

from .camera import Camera, RidgeConfig, correct_camera, project  # noqa: E402
from .features import (FeatureGrid, ViewFeatures, VoxelGrid, gather_view_features, interpolate,  # noqa: E402
                       regress_coords, synthesize_features, three_view_pool, voxelize)
from .mesh import HandMesh, make_template, mpjpe, mpvpe, mpvpe_2d, regress_joints  # noqa: E402
from .noise import NoiseField, NoiseSample, inference_noise, sample  # noqa: E402
from .pipeline import (DataConfig, DnePipelineParams, DneStageParams, PipelineConfig,  # noqa: E402
                       RefinementState, dne_stage, evaluate, loss_v, make_dataset,
                       make_synthetic_instance, refine, train)

__version__ = "0.1.0"
