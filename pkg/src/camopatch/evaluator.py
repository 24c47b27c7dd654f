"""Evaluation: precision-recall sweeps and AP under three conditions.

Ground truth is what the detector finds on clean images at a fixed confidence
threshold, so scores measure suppression of previously-confident detections
rather than absolute detector quality.  Conditions: CLEAN (untouched), NOISE
(a size-matched uniform-noise patch, the occlusion control), PATCH (the
optimized patch).  NOISE and PATCH share placement geometry and transform
seeds so the comparison is paired.
"""

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .detector import decode
from .geometry import Annotation, Patch, TransformRanges
from .trainer import apply_patch_to_dataset, _as_float

log = logging.getLogger(__name__)

CONDITIONS = ("CLEAN", "NOISE", "PATCH")
_BATCH = 16


def _batched_decode(detector, images, conf_threshold, nms_iou):
    out = []
    for start in range(0, len(images), _BATCH):
        x = np.stack([_as_float(im) for im in images[start : start + _BATCH]])
        out.extend(decode(detector.forward(x), conf_threshold, nms_iou))
    return out


def derive_ground_truth(detector, dataset, conf_threshold=0.4, nms_iou=0.45):
    """Replace annotations with the detector's own clean detections.

    Returns (image, annotations) pairs aligned with the input; images without
    confident detections keep an empty list (they still count false
    positives later).
    """
    decoded = _batched_decode(detector, [img for img, _ in dataset],
                              conf_threshold, nms_iou)
    gt_data = []
    for i, ((image, _), dets) in enumerate(zip(dataset, decoded)):
        image_id = f"eval-{i:05d}"
        anns = [Annotation(image_id=image_id, class_id=d.class_id, box=d.box)
                for d in dets]
        gt_data.append((image, anns))
    return gt_data


def make_noise_patch(shape, seed):
    """Uniform random RGB patch, the occlusion-only control."""
    return Patch.random_uniform(shape, seed=seed, meta={"kind": "noise", "seed": seed})


def precision_recall(detections, truths, match_iou):
    """PR points from per-image greedy matching.

    detections: image_id -> list of Detection; truths: image_id -> list of
    Annotation.  Detections are taken in descending confidence (ties broken
    by image id then cell); each claims the highest-IoU unmatched truth of
    its class at IoU >= match_iou.  One point per distinct confidence,
    thresholds descending; no detections yields [(1.0, 0.0, inf)].
    """
    from .detector import box_iou

    n_gt = sum(len(v) for v in truths.values())
    if n_gt == 0:
        raise ValueError("no ground truth boxes; nothing to evaluate against")
    rows = []
    for image_id, dets in detections.items():
        for d in dets:
            rows.append((-d.confidence, image_id, d.cell, d))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    if not rows:
        return [(1.0, 0.0, float("inf"))]
    matched = {image_id: [False] * len(v) for image_id, v in truths.items()}
    tp = fp = 0
    points = []
    for k, (negconf, image_id, _, det) in enumerate(rows):
        gts = truths.get(image_id, [])
        flags = matched.get(image_id, [])
        best, best_iou = -1, match_iou
        for gi, gt in enumerate(gts):
            if flags[gi] or gt.class_id != det.class_id:
                continue
            iou = box_iou(det.box, gt.box)
            if iou >= best_iou:
                best, best_iou = gi, iou
        if best >= 0:
            flags[best] = True
            tp += 1
        else:
            fp += 1
        last_of_threshold = k + 1 == len(rows) or rows[k + 1][0] != negconf
        if last_of_threshold:
            points.append((tp / (tp + fp), tp / n_gt, -negconf))
    return points


def average_precision(points):
    """All-points interpolated AP: area under the precision envelope."""
    pts = sorted(points, key=lambda p: p[1])
    recalls = [p[1] for p in pts]
    precisions = [p[0] for p in pts]
    for i in range(len(precisions) - 2, -1, -1):
        precisions[i] = max(precisions[i], precisions[i + 1])
    ap = 0.0
    prev_r = 0.0
    for p, r in zip(precisions, recalls):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def evaluate_condition(detector, data, truths, nms_iou=0.45, match_iou=0.5):
    """Full PR sweep for one condition: decode at threshold zero, match
    against the given truths.  Returns a result dict with ap and pr_points."""
    decoded = _batched_decode(detector, [img for img, _ in data], 0.0, nms_iou)
    detections = {f"eval-{i:05d}": dets for i, dets in enumerate(decoded)}
    points = precision_recall(detections, truths, match_iou)
    return {
        "ap": average_precision(points),
        "n_detections": sum(len(v) for v in detections.values()),
        "pr_points": [[t, p, r] for p, r, t in points],
    }


@dataclass
class EvalReport:
    conditions: dict
    meta: dict = field(default_factory=dict)

    def ap(self, condition):
        return self.conditions[condition]["ap"]

    def to_dict(self):
        return {"conditions": self.conditions, "meta": self.meta}

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        return path

    @classmethod
    def load(cls, path):
        with open(path) as f:
            d = json.load(f)
        return cls(conditions=d["conditions"], meta=d.get("meta", {}))

    def save_pr_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["condition", "threshold", "precision", "recall"])
            for name in sorted(self.conditions):
                for t, p, r in self.conditions[name]["pr_points"]:
                    writer.writerow([name, f"{t:.9g}", f"{p:.9g}", f"{r:.9g}"])
        return path


def evaluate_conditions(detector, dataset, patch, patch_config, seed=0,
                        ranges=None, policy="randomized", noise_seed=None,
                        gt_conf=0.4, nms_iou=0.45, match_iou=0.5,
                        eval_patch_config=None, noise_patch=None):
    """CLEAN/NOISE/PATCH benchmark on one dataset.

    Ground truth comes from the detector's clean detections at gt_conf.  The
    noise control is size-matched to the patch and applied with the same
    placement geometry and transform seed.  eval_patch_config overrides the
    geometry used at application time (cross-config evaluation); the report
    records both.
    """
    if ranges is None:
        ranges = TransformRanges()
    applied_config = eval_patch_config if eval_patch_config is not None else patch_config
    gt_data = derive_ground_truth(detector, dataset, gt_conf, nms_iou)
    truths = {f"eval-{i:05d}": anns for i, (_, anns) in enumerate(gt_data)}
    n_gt = sum(len(v) for v in truths.values())
    if n_gt == 0:
        raise ValueError("detector found nothing on clean images; no ground truth")
    if noise_patch is None:
        if noise_seed is None:
            noise_seed = seed + 1
        noise_patch = make_noise_patch(patch.pixels.shape[:2], noise_seed)

    conditions = {}
    conditions["CLEAN"] = evaluate_condition(detector, gt_data, truths, nms_iou, match_iou)
    noise_data = apply_patch_to_dataset(gt_data, noise_patch, applied_config,
                                        policy=policy, seed=seed, ranges=ranges)
    conditions["NOISE"] = evaluate_condition(detector, noise_data, truths, nms_iou, match_iou)
    patch_data = apply_patch_to_dataset(gt_data, patch, applied_config,
                                        policy=policy, seed=seed, ranges=ranges)
    conditions["PATCH"] = evaluate_condition(detector, patch_data, truths, nms_iou, match_iou)

    from .geometry import patch_id

    report = EvalReport(conditions=conditions, meta={
        "n_images": len(dataset),
        "n_ground_truth": n_gt,
        "gt_conf": gt_conf,
        "nms_iou": nms_iou,
        "match_iou": match_iou,
        "apply_policy": policy,
        "apply_seed": seed,
        "noise_patch_seed": int(noise_patch.meta.get("seed", -1)),
        "patch_id": patch_id(patch),
        "patch_train_config": patch_config.to_dict(),
        "patch_eval_config": applied_config.to_dict(),
        "detector_checksum": detector.weights_checksum(),
    })
    for name in CONDITIONS:
        log.info("%s AP %.4f", name, report.ap(name))
    return report


def plot_pr_curves(report, path):
    """One PR plot, fixed colors: CLEAN blue, NOISE orange, PATCH green."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    colors = {"CLEAN": "tab:blue", "NOISE": "tab:orange", "PATCH": "tab:green"}
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    for name in CONDITIONS:
        if name not in report.conditions:
            continue
        pts = sorted(report.conditions[name]["pr_points"], key=lambda q: q[2])
        ax.plot([q[2] for q in pts], [q[1] for q in pts], color=colors[name],
                label=f"{name} (AP {report.conditions[name]['ap']:.3f})")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0.0, 1.05)
    ax.set_ylim(0.0, 1.05)
    ax.legend(loc="lower left")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
