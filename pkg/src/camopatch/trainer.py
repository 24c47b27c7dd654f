"""Patch training: expectation-over-transformation gradient descent.

Every epoch the patch is composited onto each annotated object under freshly
sampled transforms, the detector's peak objectness per image is averaged into
the attack loss, and the gradient flows back through the detector and the
compositor into the patch pixels.  Printability, smoothness, and saliency
terms regularize the patch directly.  The detector weights stay frozen.
"""

import json
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (Patch, PatchConfig, TransformRanges, TransformSample,
                       composite_patch, composite_patch_backward,
                       patch_placements, sample_transform, save_patch)
from .losses import (LossWeights, PrintableColorSet, nps_loss, nps_loss_grad,
                     saliency_loss, saliency_loss_grad, tv_loss, tv_loss_grad)
from .nn import Adam

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; the last checkpoint survives."""


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    learning_rate: float = 0.03
    seed: int = 0
    patch_resolution: int = 48
    weights: LossWeights = field(default_factory=LossWeights)
    transforms: TransformRanges = field(default_factory=TransformRanges)
    plateau_patience: int = 8
    plateau_factor: float = 0.5
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be > 0")
        if self.patch_resolution < 2:
            raise ValueError("patch_resolution must be >= 2")


def _as_float(image):
    if image.dtype == np.uint8:
        return image.astype(np.float64) / 255.0
    return np.array(image, dtype=np.float64)


def _composite_all(image, patch, annotations, patch_config, rng, ranges):
    """Apply the patch at every placement of every annotation; returns the
    patched image and the (placement, transform) list in application order."""
    applied = []
    for ann in annotations:
        for placement in patch_placements(ann, patch_config):
            t = sample_transform(rng, ranges)
            image = composite_patch(image, patch, placement, t)
            applied.append((placement, t))
    return image, applied


def _patch_loss_and_grad(patch, weights, colors):
    terms = {
        "nps": nps_loss(patch.pixels, colors),
        "tv": tv_loss(patch.pixels),
        "sal": saliency_loss(patch.pixels) if weights.gamma > 0.0 else 0.0,
    }
    grad = weights.alpha * nps_loss_grad(patch.pixels, colors) \
        + weights.beta * tv_loss_grad(patch.pixels)
    if weights.gamma > 0.0:
        grad = grad + weights.gamma * saliency_loss_grad(patch.pixels)
    return terms, grad


def train_patch(detector, dataset, patch_config, train_config, run_dir=None,
                colors=None, initial_patch=None):
    """Optimize a patch against a frozen detector.

    dataset: (image, annotations) pairs sized to the detector input.
    Returns (patch, history); history rows carry per-epoch loss means.  When
    run_dir is given, writes train_log.jsonl, periodic checkpoints, the best
    patch (lowest mean objectness), and the final patch.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    if colors is None:
        colors = PrintableColorSet.default()
    weights = train_config.weights
    checksum_before = detector.weights_checksum()
    rng = np.random.default_rng(train_config.seed)
    res = train_config.patch_resolution
    if initial_patch is not None:
        patch = Patch(np.array(initial_patch.pixels, dtype=np.float64),
                      dict(initial_patch.meta))
    else:
        patch = Patch.random_uniform((res, res), seed=train_config.seed,
                                     meta={"config": patch_config.to_dict()})
    opt = Adam({"p": patch.pixels}, lr=train_config.learning_rate)
    log_path = ckpt_dir = None
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        ckpt_dir = os.path.join(run_dir, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)
        log_path = os.path.join(run_dir, "train_log.jsonl")
        if os.path.exists(log_path):
            os.remove(log_path)

    history = []
    best_obj = np.inf
    best_pixels = patch.pixels.copy()
    since_improve = 0
    n = len(dataset)
    for epoch in range(train_config.epochs):
        order = rng.permutation(n)
        sums = {"obj": 0.0, "nps": 0.0, "tv": 0.0, "sal": 0.0}
        n_images = 0
        for start in range(0, n, train_config.batch_size):
            idx = order[start : start + train_config.batch_size]
            canvases = []
            applied_per_image = []
            for i in idx:
                image, annotations = dataset[i]
                canvas, applied = _composite_all(_as_float(image), patch, annotations,
                                                 patch_config, rng, train_config.transforms)
                canvases.append(canvas)
                applied_per_image.append(applied)
            x = np.stack(canvases)
            output, backward = detector.forward_with_grad(x)
            obj = output.objectness
            B = obj.shape[0]
            flat = obj.reshape(B, -1)
            peaks = flat.max(axis=1)
            l_obj = float(peaks.mean())
            grad_obj = np.zeros_like(flat)
            grad_obj[np.arange(B), flat.argmax(axis=1)] = 1.0 / B
            grad_images = backward(grad_obj.reshape(obj.shape))

            grad_patch = np.zeros_like(patch.pixels)
            for b in range(B):
                for placement, t in reversed(applied_per_image[b]):
                    grad_patch += composite_patch_backward(grad_images[b], patch,
                                                           placement, t)
            terms, reg_grad = _patch_loss_and_grad(patch, weights, colors)
            total = l_obj + weights.alpha * terms["nps"] + weights.beta * terms["tv"] \
                + weights.gamma * terms["sal"]
            if not np.isfinite(total):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            opt.step({"p": grad_patch + reg_grad})
            np.clip(patch.pixels, 0.0, 1.0, out=patch.pixels)
            sums["obj"] += l_obj * B
            sums["nps"] += terms["nps"] * B
            sums["tv"] += terms["tv"] * B
            sums["sal"] += terms["sal"] * B
            n_images += B
        row = {k: sums[k] / n_images for k in sums}
        row["epoch"] = epoch
        row["total"] = row["obj"] + weights.alpha * row["nps"] \
            + weights.beta * row["tv"] + weights.gamma * row["sal"]
        history.append(row)
        log.info("patch epoch %d/%d obj %.4f total %.4f", epoch + 1,
                 train_config.epochs, row["obj"], row["total"])
        if log_path is not None:
            with open(log_path, "a") as f:
                f.write(json.dumps(row, sort_keys=True) + "\n")
        if row["obj"] < best_obj - 1e-6:
            best_obj = row["obj"]
            best_pixels = patch.pixels.copy()
            since_improve = 0
        else:
            since_improve += 1
            if since_improve >= train_config.plateau_patience:
                opt.lr *= train_config.plateau_factor
                since_improve = 0
                log.info("plateau, learning rate now %.4g", opt.lr)
        if ckpt_dir is not None and train_config.checkpoint_every > 0 \
                and (epoch + 1) % train_config.checkpoint_every == 0:
            save_patch(Patch(patch.pixels.copy(), dict(patch.meta)),
                       os.path.join(ckpt_dir, f"epoch_{epoch + 1:04d}.png"))

    if detector.weights_checksum() != checksum_before:
        raise RuntimeError("detector weights changed during patch training")
    patch.meta.update({
        "train_seed": train_config.seed,
        "epochs": train_config.epochs,
        "loss_weights": weights.to_dict(),
        "final_obj": history[-1]["obj"],
        "best_obj": best_obj,
    })
    if run_dir is not None:
        save_patch(Patch(best_pixels, {**patch.meta, "which": "best"}),
                   os.path.join(run_dir, "best_patch.png"))
        save_patch(patch, os.path.join(run_dir, "patch.png"))
    return patch, history


def apply_patch_to_dataset(dataset, patch, patch_config, policy="randomized",
                           seed=0, ranges=None):
    """Composite the patch onto every annotated object of every image.

    policy 'randomized' samples fresh transforms (seeded); 'identity' uses the
    unrotated, unjittered transform.  Returns (patched uint8 image,
    annotations) pairs in dataset order.
    """
    if policy not in ("randomized", "identity"):
        raise ValueError(f"unknown policy {policy!r}")
    if ranges is None:
        ranges = TransformRanges()
    rng = np.random.default_rng(seed)
    out = []
    for image, annotations in dataset:
        canvas = _as_float(image)
        for ann in annotations:
            for placement in patch_placements(ann, patch_config):
                if policy == "randomized":
                    t = sample_transform(rng, ranges)
                else:
                    t = TransformSample.identity()
                canvas = composite_patch(canvas, patch, placement, t)
        out.append(((np.clip(canvas, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8),
                    list(annotations)))
    return out
