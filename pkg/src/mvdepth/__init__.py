"""Multiview plane-sweep depth estimation toolkit.

Pipeline: pinhole/SE(3) geometry (``geometry``) -> plane-sweep cost volumes
(``cost_volume``) -> winner-take-all extraction (``classical_depth``) or the
encoder-decoder regressor (``depthnet``) -> evaluation (``metrics``), with
geometric augmentation (``augmentation``), TUM-layout sequence ingestion and
synthetic oracle scenes (``dataset_io``), rolling sequence mapping
(``sequence_mapper``), and a CLI front end (``cli``).
"""

from .geometry import (  # noqa: F401
    DepthHypotheses,
    Intrinsics,
    Pose,
    WarpMatrix,
    backproject,
    compose,
    identity_pose,
    invert,
    project,
    relative_pose,
    sample_inverse_depths,
    warp_matrix,
)
from .cost_volume import (  # noqa: F401
    CostVolume,
    Frame,
    build_cost_volume,
    sample_bilinear,
    warp_cost_slice,
)
from .classical_depth import DepthMap, argmin_depth, extract, subsample_refine  # noqa: F401
from .metrics import MetricsAccumulator, MetricsReport, evaluate  # noqa: F401
from .sequence_mapper import SequenceMapper, baseline, view_angle  # noqa: F401

__version__ = "0.1.0"
