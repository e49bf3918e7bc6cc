"""Test-time prompt inversion for attention-based semantic segmentation.

Cross-attention maps from a (toy or file-backed) diffusion-style backend are
refined with self-attention, scored with a contrastive soft-clustering loss
plus entropy over augmented views, and the prompt parameters are optimized
per image with a handful of Adam steps before the final argmax mask.
"""

from .backend import BackendConfig, PromptParams, StaticBackend, ToyBackend
from .bundle_io import (FixtureSpec, fixture_backend, load_bundle, load_manifest,
                        parse_fixture_spec, read_label_grid, read_tensor,
                        synth_fixture, validate_manifest, write_bundle,
                        write_mask_png, write_tensor)
from .distance import (DistanceMatrix, anchor_to_map_distance,
                       point_to_map_distance, skl_matrix, soft_anchors)
from .errors import (BackendStateError, BundleFormatError, BundleValidationError,
                     NonFiniteLossError, UndefinedMetricError)
from .loss import (AugmentSpec, CropWindow, LossBreakdown, cluster_loss,
                   entropy_loss, full_frame_spec, random_augment_spec, total_loss)
from .maps import (AggregationWeights, AttentionBundle, aggregate_attention,
                   bilinear_resize, minmax_norm, minmax_norm_cols)
from .metrics import ConfusionMatrix, accumulate, macc, miou
from .optim import (AdamState, InversionConfig, InversionResult, adam_step,
                    invert_prompt, moving_average)
from .refine import ClassMaps, class_maps, refine_cross
from .segment import SegmentationResult, predict_mask

__version__ = "0.1.0"

__all__ = [
    "AdamState", "AggregationWeights", "AttentionBundle", "AugmentSpec",
    "BackendConfig", "BackendStateError", "BundleFormatError",
    "BundleValidationError", "ClassMaps", "ConfusionMatrix", "CropWindow",
    "DistanceMatrix", "FixtureSpec", "InversionConfig", "InversionResult",
    "LossBreakdown", "NonFiniteLossError", "PromptParams", "SegmentationResult",
    "StaticBackend", "ToyBackend", "UndefinedMetricError", "accumulate",
    "adam_step", "aggregate_attention", "anchor_to_map_distance",
    "bilinear_resize", "class_maps", "cluster_loss", "entropy_loss",
    "fixture_backend", "full_frame_spec", "invert_prompt", "load_bundle",
    "load_manifest", "macc", "minmax_norm", "minmax_norm_cols", "miou",
    "moving_average", "parse_fixture_spec", "point_to_map_distance",
    "predict_mask", "random_augment_spec", "read_label_grid", "read_tensor",
    "refine_cross", "skl_matrix", "soft_anchors", "synth_fixture", "total_loss",
    "validate_manifest", "write_bundle", "write_mask_png", "write_tensor",
]
