"""Monte-Carlo quadtree block sampling for fitting images with a mip-pyramid field."""

from .bench import (RunMetrics, Strategy, TrainConfig, ablate, composite_image,
                    measure_overhead, parse_strategy, run)
from .config import Config
from .estimator import MCBlockRegressor, check_blocks, check_image
from .image_core import (BlockOutOfBounds, BlockRect, Image, IntegralTables, block_mean,
                         block_variance, load_image, save_image)
from .mctree import MCForest, MCNode, MCTree, SamplerConfig, StaleHandleError, init_from_image
from .mipfield import MipField, TrainState, load_field, reconstruct, save_field, train_step

__version__ = "0.1.0"

__all__ = [
    "BlockOutOfBounds", "BlockRect", "Config", "Image", "IntegralTables", "MCBlockRegressor",
    "MCForest", "MCNode", "MCTree", "MipField", "RunMetrics", "SamplerConfig",
    "StaleHandleError", "Strategy", "TrainConfig", "TrainState", "ablate", "block_mean",
    "block_variance", "check_blocks", "check_image", "composite_image", "init_from_image",
    "load_field", "load_image", "measure_overhead", "parse_strategy", "reconstruct", "run",
    "save_field", "save_image", "train_step",
]
