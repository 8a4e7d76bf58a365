"""From-scratch CNN for source camera identification from 32x32 image patches."""

__version__ = "0.1.0"

from .data import (FoldAssignment, ImageRecord, Patch, PatchDataset, SyntheticCameraSpec,
                   extract_patches, generate_synthetic, load_manifest, make_camera_specs, normalize,
                   split_by_image)
from .errors import SciError
from .model import ArchitectureConfig, Network, build_network, load_checkpoint, save_checkpoint
from .tensor import Rng, tensor_new
from .training import (ConfusionMatrix, ExperimentReport, TrainConfig, cross_validate, evaluate,
                       run_ablation, train_fold)

__all__ = [
    "ArchitectureConfig", "ConfusionMatrix", "ExperimentReport", "FoldAssignment", "ImageRecord",
    "Network", "Patch", "PatchDataset", "Rng", "SciError", "SyntheticCameraSpec", "TrainConfig",
    "build_network", "cross_validate", "evaluate", "extract_patches", "generate_synthetic",
    "load_checkpoint", "load_manifest", "make_camera_specs", "normalize", "run_ablation",
    "save_checkpoint", "split_by_image", "tensor_new", "train_fold",
]
