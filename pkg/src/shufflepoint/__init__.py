"""Point-cloud classification and segmentation with shuffled group convolutions.

A small numpy library: a reverse-mode tensor engine, point-cloud neighborhood
operations, grouped 1x1 convolutions with channel shuffle, a two-stage
classifier / segmenter, analytic complexity accounting and a training loop.
"""

from .complexity import layer_flops, layer_params, model_complexity, sweep_groups
from .errors import ConfigurationError, DimensionError, InputError, TrainingError, VerificationError
from .geometry import (EdgeVariant, NeighborIndex, PointCloud, farthest_point_sample, knn_search,
                       radius_search)
from .model import ModelConfig, StageConfig, build_classifier, build_segmenter, default_config
from .sgc import GroupConvLayer, SGCUnit, SgcUnitConfig, channel_shuffle
from .tensor import Tensor, backward, finite_difference_check, no_grad
from .training import (ScheduleConfig, TrainConfig, bn_momentum_schedule, compute_miou,
                       lr_schedule, synth_dataset, train)

__version__ = "0.1.0"
