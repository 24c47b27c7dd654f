"""Adversarial camouflage patches against grid-output object detectors.

Train patches that suppress detections under randomized physical transforms,
apply them to annotated datasets, and measure the damage with paired
CLEAN/NOISE/PATCH precision-recall benchmarks.
"""

from .detector import (Detection, DetectorOutput, ToyDetector, box_iou, decode,
                       load_detector, save_detector, train_toy_detector)
from .evaluator import (EvalReport, average_precision, derive_ground_truth,
                        evaluate_conditions, make_noise_patch, plot_pr_curves,
                        precision_recall)
from .geometry import (Annotation, Patch, PatchConfig, Placement,
                       TransformRanges, TransformSample, composite_patch,
                       load_patch, patch_id, patch_placements, sample_transform,
                       save_patch)
from .losses import (LossWeights, PrintableColorSet, nps_loss, saliency_loss,
                     total_loss, tv_loss)
from .trainer import TrainConfig, TrainingDiverged, apply_patch_to_dataset, train_patch

__version__ = "0.1.0"

__all__ = [
    "Annotation", "Detection", "DetectorOutput", "EvalReport", "LossWeights",
    "Patch", "PatchConfig", "Placement", "PrintableColorSet", "ToyDetector",
    "TrainConfig", "TrainingDiverged", "TransformRanges", "TransformSample",
    "apply_patch_to_dataset", "average_precision", "box_iou", "composite_patch",
    "decode", "derive_ground_truth", "evaluate_conditions", "load_detector",
    "load_patch", "make_noise_patch", "nps_loss", "patch_id", "patch_placements",
    "plot_pr_curves", "precision_recall", "sample_transform", "saliency_loss",
    "save_detector", "save_patch", "total_loss", "train_patch",
    "train_toy_detector", "tv_loss", "__version__",
]
