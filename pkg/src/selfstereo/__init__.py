"""Self-supervised stereo matching with adaptive pseudo ground truth.

A siamese convolutional feature extractor and a learned similarity head are
trained from a rectified image pair alone: each epoch the engine predicts
disparities for both views, prunes left-right-inconsistent pixels, and uses
the surviving sparse map as training labels for the next epoch.
"""

from .consistency import ConsistencyConfig, ConsistencyResult, count_history_should_stop, lr_check
from .imgio import DisparityMap, load_gray, read_pfm, render_colormap, write_pfm
from .matcher import MatchConfig, build_cost_volume, cosine_similarity, predict_both, wta_disparity
from .model import (
    StereoModel,
    extract_features,
    hinge_loss,
    init_model,
    load_model,
    normalize_image,
    save_model,
    score_pair,
    score_pairs,
    triplet_loss,
)
from .postproc import MetricsConfig, MetricUndefinedError, SubpixelConfig, completion, point_error, subpixel_refine
from .sampler import PatchTriplet, SamplerConfig, SamplingExhaustedError, sample_batch, sample_triplet
from .synthetic import shifted_texture_pair
from .trainer import TrainConfig, TrainState, fit, initialize_pseudo_gt, track_correlation, train_epoch

__version__ = "0.1.0"

__all__ = [
    "ConsistencyConfig",
    "ConsistencyResult",
    "DisparityMap",
    "MatchConfig",
    "MetricsConfig",
    "MetricUndefinedError",
    "PatchTriplet",
    "SamplerConfig",
    "SamplingExhaustedError",
    "StereoModel",
    "SubpixelConfig",
    "TrainConfig",
    "TrainState",
    "build_cost_volume",
    "completion",
    "cosine_similarity",
    "count_history_should_stop",
    "extract_features",
    "fit",
    "hinge_loss",
    "init_model",
    "initialize_pseudo_gt",
    "load_gray",
    "load_model",
    "lr_check",
    "normalize_image",
    "point_error",
    "predict_both",
    "read_pfm",
    "render_colormap",
    "sample_batch",
    "sample_triplet",
    "save_model",
    "score_pair",
    "score_pairs",
    "shifted_texture_pair",
    "subpixel_refine",
    "track_correlation",
    "train_epoch",
    "triplet_loss",
    "wta_disparity",
    "write_pfm",
]
