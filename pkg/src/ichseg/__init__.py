"""Slice-wise 2D intracranial hemorrhage segmentation for head CT."""

__version__ = "0.1.0"

from .volume_io import (FoldAssignment, Mask, SyntheticSpec, Volume, generate_synthetic_case,
                        load_manifest, load_mask, load_volume, make_folds, save_mask, save_volume)
from .preprocessing import (AugmentConfig, CropConfig, InputStrategy, SliceSample, WindowSpec,
                            apply_window, augment, build_input, foreground_biased_crop,
                            stack_adjacent_slices)
from .network import NetworkConfig, build_model, forward, load_checkpoint, save_checkpoint
from .loss import LossConfig, deep_supervision_loss, deep_supervision_weights, dice_ce_loss, downsample_target
from .training import FoldResult, TrainConfig, cosine_lr, run_cross_validation, train_fold
from .inference import ProbabilityVolume, binarize, ensemble_mean, predict_volume
from .metrics import MetricReport, dice, evaluate_case, hausdorff, nsd, rvd, surface_distances
