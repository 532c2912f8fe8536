"""alikekit: differentiable sub-pixel keypoint detection and description."""

from .backbone import (ModelConfig, ModelOutput, PRESETS, count_flops,
                       count_params, forward, init_weights, receptive_field,
                       weight_shapes)
from .detect import (Detection, DetectorConfig, Keypoint, bilinear_sample,
                     detect_keypoints, nms, read_keypoints,
                     sample_descriptors, softargmax_offset, write_keypoints)
from .geometry import (Correspondence, ReprojectionTarget, WarpSpec,
                       assign_correspondences, homography_spec,
                       read_homography, reprojection_probability, warp,
                       write_homography)
from .losses import (LossConfig, LossReport, dispersity_peak_loss,
                     nre_descriptor_loss, reliability_loss,
                     reprojection_loss, total_loss)
from .matchmetrics import (HomographyEstimate, MatchSet, MetricCounts,
                           RansacConfig, compute_metrics, corner_error,
                           estimate_homography, homography_accuracy,
                           mutual_match)
from .netpbm import ImageFormatError, load_image, read_netpbm, write_netpbm
from .tensorgraph import Tensor, load_checkpoint, save_checkpoint
from .trainer import (SyntheticPair, TrainConfig, TrainError, TrainResult,
                      generate_pair, parse_train_config, train)

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "ModelOutput", "PRESETS", "count_flops", "count_params",
    "forward", "init_weights", "receptive_field", "weight_shapes",
    "Detection", "DetectorConfig", "Keypoint", "bilinear_sample",
    "detect_keypoints", "nms", "read_keypoints", "sample_descriptors",
    "softargmax_offset", "write_keypoints",
    "Correspondence", "ReprojectionTarget", "WarpSpec",
    "assign_correspondences", "homography_spec", "read_homography",
    "reprojection_probability", "warp", "write_homography",
    "LossConfig", "LossReport", "dispersity_peak_loss",
    "nre_descriptor_loss", "reliability_loss", "reprojection_loss",
    "total_loss",
    "HomographyEstimate", "MatchSet", "MetricCounts", "RansacConfig",
    "compute_metrics", "corner_error", "estimate_homography",
    "homography_accuracy", "mutual_match",
    "ImageFormatError", "load_image", "read_netpbm", "write_netpbm",
    "Tensor", "load_checkpoint", "save_checkpoint",
    "SyntheticPair", "TrainConfig", "TrainError", "TrainResult",
    "generate_pair", "parse_train_config", "train",
]
