"""Encoder-decoder inverse-depth regression network, implemented on numpy.

The graph, forward pass, reverse-mode gradients, and Adam training loop are
all in this subpackage; gradients are verified against central finite
differences in the test suite.
"""

from .graph import (  # noqa: F401
    LayerSpec,
    MultiScalePrediction,
    NetworkGraph,
    build_network,
    default_layer_specs,
    forward,
)
from .checkpoint import load_checkpoint, save_checkpoint  # noqa: F401
from .training import (  # noqa: F401
    TrainConfig,
    TrainingLog,
    backward,
    build_gt_pyramid,
    downsample_gt,
    gradient_check,
    loss,
    train_toy,
)
