"""Grid-output detector interface, decoding/NMS, and a trainable toy detector.

The toy detector is a five-stage stride-32 fully-convolutional net with a
single anchor, small enough to train on a CPU in minutes while keeping the
grid-objectness output structure that the patch attack targets.  Real
detectors plug in behind the same forward/decode contract.
"""

import hashlib
import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .geometry import Annotation
from .nn import (Adam, bce_with_logits, conv2d, conv2d_backward, leaky_relu,
                 leaky_relu_backward, sigmoid, softmax)

log = logging.getLogger(__name__)

DEFAULT_CHANNELS = (12, 16, 24, 32, 48)
WEIGHTS_VERSION = "toy-fcn-v1"
_WH_CLIP = 8.0


@dataclass
class DetectorOutput:
    """Raw grid predictions: boxes in pixels, objectness in [0,1], class
    scores forming a distribution per cell-anchor."""

    boxes: np.ndarray        # (B, GH, GW, A, 4) as (cx, cy, w, h)
    objectness: np.ndarray   # (B, GH, GW, A)
    class_probs: np.ndarray  # (B, GH, GW, A, C)

    def validate(self):
        if self.objectness.min() < 0.0 or self.objectness.max() > 1.0:
            raise ValueError("objectness must lie in [0, 1]")
        sums = self.class_probs.sum(axis=-1)
        if np.abs(sums - 1.0).max() > 1e-5:
            raise ValueError("class scores must sum to 1 per cell-anchor")
        return self


@dataclass(frozen=True)
class Detection:
    """One decoded box; confidence = objectness x class score.

    ``cell`` is the flat grid index the detection came from, used as the
    deterministic tie-break for equal confidences.
    """

    box: tuple
    class_id: int
    confidence: float
    cell: int = -1


class GridDetector(Protocol):
    """Adapter contract for any grid-output detector.

    ``forward`` must be pure given the weights; ``forward_with_grad``
    additionally returns a closure mapping the loss gradient w.r.t. the
    objectness grid back to the input pixels.
    """

    input_size: tuple

    def forward(self, images) -> DetectorOutput: ...

    def forward_with_grad(self, images): ...


def box_iou(a, b):
    """IoU of two (cx, cy, w, h) boxes."""
    ax0, ay0 = a[0] - a[2] / 2.0, a[1] - a[3] / 2.0
    ax1, ay1 = a[0] + a[2] / 2.0, a[1] + a[3] / 2.0
    bx0, by0 = b[0] - b[2] / 2.0, b[1] - b[3] / 2.0
    bx1, by1 = b[0] + b[2] / 2.0, b[1] + b[3] / 2.0
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def decode(output, conf_threshold, nms_iou, class_independent_nms=False):
    """Decode a DetectorOutput batch into per-image Detection lists.

    Entries with confidence >= conf_threshold are kept, sorted by descending
    confidence (ties by flat cell index), then greedily suppressed at
    IoU >= nms_iou against already-kept boxes of the same class.
    """
    if not (0.0 <= conf_threshold <= 1.0 and 0.0 <= nms_iou <= 1.0):
        raise ValueError("conf_threshold and nms_iou must lie in [0, 1]")
    results = []
    B = output.objectness.shape[0]
    for n in range(B):
        obj = output.objectness[n].reshape(-1)
        cls = output.class_probs[n].reshape(obj.size, -1)
        boxes = output.boxes[n].reshape(obj.size, 4)
        class_id = cls.argmax(axis=1)
        conf = obj * cls[np.arange(obj.size), class_id]
        cand = np.nonzero(conf >= conf_threshold)[0]
        cand = cand[np.lexsort((cand, -conf[cand]))]
        kept = []
        for i in cand:
            suppressed = False
            for j in kept:
                if (class_independent_nms or class_id[i] == class_id[j]) \
                        and box_iou(boxes[i], boxes[j]) >= nms_iou:
                    suppressed = True
                    break
            if not suppressed:
                kept.append(i)
        results.append([
            Detection(box=tuple(float(v) for v in boxes[i]), class_id=int(class_id[i]),
                      confidence=float(conf[i]), cell=int(i))
            for i in kept
        ])
    return results


class ToyDetector:
    """Stride-32 single-anchor detector on 256x256 inputs.

    Head layout per cell: (tx, ty, tw, th, t_obj, class logits).  Weights are
    plain float64 arrays; forward/backward are hand-written over the conv
    kernels, so gradients w.r.t. the input pixels are available for patch
    training while the weights stay frozen.
    """

    def __init__(self, weights, meta):
        self.weights = weights
        self.meta = meta

    @classmethod
    def initialize(cls, seed=0, input_size=256, channels=DEFAULT_CHANNELS,
                   num_classes=1, anchor_px=128, leaky_slope=0.1):
        rng = np.random.default_rng(seed)
        weights = {}
        cin = 3
        for i, cout in enumerate(channels):
            weights[f"conv{i}_w"] = rng.normal(0.0, np.sqrt(2.0 / (9 * cin)), size=(3, 3, cin, cout))
            weights[f"conv{i}_b"] = np.zeros(cout)
            cin = cout
        head_out = 5 + num_classes
        weights["head_w"] = rng.normal(0.0, 0.01, size=(1, 1, cin, head_out))
        head_b = np.zeros(head_out)
        head_b[4] = -4.0  # start with near-zero objectness everywhere
        weights["head_b"] = head_b
        meta = {
            "version": WEIGHTS_VERSION,
            "input_size": int(input_size),
            "stride": 2 ** len(channels),
            "channels": list(channels),
            "num_classes": int(num_classes),
            "anchor_px": float(anchor_px),
            "leaky_slope": float(leaky_slope),
            "init_seed": int(seed),
        }
        return cls(weights, meta)

    @property
    def input_size(self):
        s = self.meta["input_size"]
        return (s, s)

    @property
    def stride(self):
        return self.meta["stride"]

    @property
    def grid_size(self):
        return self.meta["input_size"] // self.meta["stride"]

    @property
    def num_classes(self):
        return self.meta["num_classes"]

    def _check_images(self, images):
        s = self.meta["input_size"]
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[1] != s or images.shape[2] != s or images.shape[3] != 3:
            raise ValueError(f"expected image batch of shape (B, {s}, {s}, 3), got {images.shape}")
        return images

    def _forward_stack(self, x, keep_cols):
        slope = self.meta["leaky_slope"]
        caches = []
        n_layers = len(self.meta["channels"])
        for i in range(n_layers):
            w = self.weights[f"conv{i}_w"]
            z, col = conv2d(x, w, self.weights[f"conv{i}_b"], stride=2, pad=1)
            caches.append({"x_shape": x.shape, "col": col if keep_cols else None, "z": z})
            x = leaky_relu(z, slope)
        raw, col = conv2d(x, self.weights["head_w"], self.weights["head_b"], stride=1, pad=0)
        caches.append({"x_shape": x.shape, "col": col if keep_cols else None, "z": None})
        return raw, caches

    def _backward_stack(self, caches, d_raw, need_wgrads, need_input_grad=True):
        slope = self.meta["leaky_slope"]
        n_layers = len(self.meta["channels"])
        grads = {}
        head = caches[-1]
        g, gw, gb = conv2d_backward(d_raw, head["x_shape"], self.weights["head_w"], 1, 0,
                                    col=head["col"] if need_wgrads else None)
        if need_wgrads:
            grads["head_w"], grads["head_b"] = gw, gb
        for i in range(n_layers - 1, -1, -1):
            cache = caches[i]
            g = leaky_relu_backward(g, cache["z"], slope)
            if i == 0 and not need_input_grad:
                if need_wgrads:
                    gy = g.reshape(-1, g.shape[-1])
                    grads["conv0_w"] = (cache["col"].T @ gy).reshape(self.weights["conv0_w"].shape)
                    grads["conv0_b"] = gy.sum(axis=0)
                return grads, None
            g, gw, gb = conv2d_backward(g, cache["x_shape"], self.weights[f"conv{i}_w"], 2, 1,
                                        col=cache["col"] if need_wgrads else None)
            if need_wgrads:
                grads[f"conv{i}_w"], grads[f"conv{i}_b"] = gw, gb
        return grads, g

    def head_to_output(self, raw):
        stride = self.stride
        anchor = self.meta["anchor_px"]
        B, GH, GW, _ = raw.shape
        sxy = sigmoid(raw[..., 0:2])
        twh = np.clip(raw[..., 2:4], -_WH_CLIP, _WH_CLIP)
        obj = sigmoid(raw[..., 4])
        cls = softmax(raw[..., 5:], axis=-1)
        gx = np.arange(GW)[None, None, :]
        gy = np.arange(GH)[None, :, None]
        boxes = np.empty((B, GH, GW, 4))
        boxes[..., 0] = (gx + sxy[..., 0]) * stride
        boxes[..., 1] = (gy + sxy[..., 1]) * stride
        boxes[..., 2] = anchor * np.exp(twh[..., 0])
        boxes[..., 3] = anchor * np.exp(twh[..., 1])
        return DetectorOutput(boxes=boxes[:, :, :, None, :], objectness=obj[:, :, :, None],
                              class_probs=cls[:, :, :, None, :])

    def forward(self, images):
        x = self._check_images(images)
        raw, _ = self._forward_stack(x, keep_cols=False)
        return self.head_to_output(raw)

    def forward_with_grad(self, images):
        """Returns (output, backward) where backward maps d(loss)/d(objectness)
        back to d(loss)/d(input pixels).  Weights receive no gradient."""
        x = self._check_images(images)
        raw, caches = self._forward_stack(x, keep_cols=False)
        output = self.head_to_output(raw)

        def backward(grad_objectness):
            obj = output.objectness[..., 0]
            d_raw = np.zeros_like(raw)
            d_raw[..., 4] = grad_objectness[..., 0] * obj * (1.0 - obj)
            _, grad_x = self._backward_stack(caches, d_raw, need_wgrads=False)
            return grad_x

        return output, backward

    def weights_checksum(self):
        h = hashlib.sha256()
        for name in sorted(self.weights):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.weights[name]).tobytes())
        return h.hexdigest()


def save_detector(det, path):
    """Weight archive: stored zip with fixed timestamps (byte-reproducible),
    one .npy member per array plus architecture/version metadata."""
    meta = dict(det.meta)
    meta["weights_checksum"] = det.weights_checksum()
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("meta.json", date_time=(1980, 1, 1, 0, 0, 0)),
                    json.dumps(meta, indent=2, sort_keys=True))
        for name in sorted(det.weights):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(det.weights[name]))
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)),
                        buf.getvalue())
    return path


def load_detector(path):
    with zipfile.ZipFile(path, "r") as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("version") != WEIGHTS_VERSION:
            raise ValueError(f"unsupported weights version {meta.get('version')!r}")
        weights = {}
        for info in zf.infolist():
            if info.filename.endswith(".npy"):
                weights[info.filename[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(info.filename)))
    stored = meta.pop("weights_checksum", None)
    det = ToyDetector(weights, meta)
    if stored is not None and det.weights_checksum() != stored:
        raise ValueError("weights checksum mismatch, file corrupted")
    return det


@dataclass
class DetectorTrainConfig:
    epochs: int = 40
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    lambda_coord: float = 5.0
    lambda_noobj: float = 0.5
    lambda_class: float = 1.0
    # random noise squares pasted during training; makes the detector robust
    # to plain occlusion so that camouflage has to beat more than coverage
    occluders_per_image: int = 2
    occluder_size: tuple = (8, 24)
    lr_drop_at: float = 0.7
    lr_drop_factor: float = 0.3
    val_conf: float = 0.4
    val_nms_iou: float = 0.45
    val_match_iou: float = 0.5

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("bad batch_size/learning_rate")


def build_targets(annotations, grid_size, stride, anchor_px, num_classes):
    """Assign each box to the grid cell holding its center (largest box wins a
    contested cell)."""
    t_obj = np.zeros((grid_size, grid_size))
    t_xy = np.zeros((grid_size, grid_size, 2))
    t_wh = np.zeros((grid_size, grid_size, 2))
    t_cls = np.zeros((grid_size, grid_size), dtype=np.int64)
    for ann in sorted(annotations, key=lambda a: a.box[2] * a.box[3]):
        cx, cy, w, h = ann.box
        gx = min(max(int(cx // stride), 0), grid_size - 1)
        gy = min(max(int(cy // stride), 0), grid_size - 1)
        t_obj[gy, gx] = 1.0
        t_xy[gy, gx] = (cx / stride - gx, cy / stride - gy)
        t_wh[gy, gx] = (np.log(w / anchor_px), np.log(h / anchor_px))
        t_cls[gy, gx] = min(max(ann.class_id, 0), num_classes - 1)
    return t_obj, t_xy, t_wh, t_cls


def _paste_occluders(image, rng, count, size_range):
    h, w = image.shape[:2]
    for _ in range(count):
        s = int(rng.integers(size_range[0], size_range[1] + 1))
        x = int(rng.integers(0, max(w - s, 1)))
        y = int(rng.integers(0, max(h - s, 1)))
        image[y : y + s, x : x + s] = rng.uniform(0.0, 1.0, size=(s, s, 3))


def train_toy_detector(train_data, config, val_data=None, detector=None):
    """Train the toy detector on (image, annotations) pairs.

    Images may be uint8 or float in [0,1].  Returns (detector, log); the log
    carries per-epoch loss means and the final held-out AP when ``val_data``
    is given.  Same seed and data -> identical weights.
    """
    if detector is None:
        detector = ToyDetector.initialize(seed=config.seed)
    g = detector.grid_size
    stride = detector.stride
    anchor = detector.meta["anchor_px"]
    C = detector.num_classes
    rng = np.random.default_rng(config.seed + 1)
    opt = Adam(detector.weights, lr=config.learning_rate)
    n = len(train_data)
    targets = [build_targets(anns, g, stride, anchor, C) for _, anns in train_data]
    log_rows = []
    drop_epoch = int(config.epochs * config.lr_drop_at)
    for epoch in range(config.epochs):
        if epoch == drop_epoch and epoch > 0:
            opt.lr = config.learning_rate * config.lr_drop_factor
        order = rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            x = np.stack([_as_float_image(train_data[i][0]) for i in idx])
            if config.occluders_per_image > 0:
                for img in x:
                    _paste_occluders(img, rng, config.occluders_per_image, config.occluder_size)
            t_obj = np.stack([targets[i][0] for i in idx])
            t_xy = np.stack([targets[i][1] for i in idx])
            t_wh = np.stack([targets[i][2] for i in idx])
            t_cls = np.stack([targets[i][3] for i in idx])
            raw, caches = detector._forward_stack(x, keep_cols=True)
            loss, d_raw = _detection_loss(raw, t_obj, t_xy, t_wh, t_cls, config, C)
            if not np.isfinite(loss):
                raise RuntimeError(f"detector training diverged at epoch {epoch}")
            grads, _ = detector._backward_stack(caches, d_raw, need_wgrads=True, need_input_grad=False)
            opt.step(grads)
            epoch_loss += loss
            n_batches += 1
        log_rows.append({"epoch": epoch, "loss": epoch_loss / max(n_batches, 1)})
        log.info("detector epoch %d/%d loss %.4f", epoch + 1, config.epochs, log_rows[-1]["loss"])
    result = {"epochs": log_rows}
    if val_data is not None:
        ap = evaluate_detector_ap(detector, val_data, config.val_conf, config.val_nms_iou,
                                  config.val_match_iou)
        result["val_ap"] = ap
        if ap < 0.90:
            log.warning("toy detector did not converge to AP >= 0.90 (got %.3f)", ap)
    return detector, result


def _as_float_image(image):
    if image.dtype == np.uint8:
        return image.astype(np.float64) / 255.0
    return image.astype(np.float64, copy=True)


def _detection_loss(raw, t_obj, t_xy, t_wh, t_cls, config, num_classes):
    """YOLO-style loss on the raw head; returns (scalar, d_raw)."""
    B, GH, GW, _ = raw.shape
    d_raw = np.zeros_like(raw)
    n_cells = B * GH * GW

    z_obj = raw[..., 4]
    w_cell = np.where(t_obj > 0.5, 1.0, config.lambda_noobj)
    obj_loss = (w_cell * bce_with_logits(z_obj, t_obj)).sum() / n_cells
    d_raw[..., 4] = w_cell * (sigmoid(z_obj) - t_obj) / n_cells

    pos = t_obj > 0.5
    n_pos = int(pos.sum())
    coord_loss = 0.0
    class_loss = 0.0
    if n_pos > 0:
        sxy = sigmoid(raw[..., 0:2])
        exy = np.where(pos[..., None], sxy - t_xy, 0.0)
        coord_loss += (exy**2).sum() / (2 * n_pos)
        d_raw[..., 0:2] = config.lambda_coord * exy * sxy * (1.0 - sxy) / n_pos

        ewh = np.where(pos[..., None], raw[..., 2:4] - t_wh, 0.0)
        coord_loss += (ewh**2).sum() / (2 * n_pos)
        d_raw[..., 2:4] = config.lambda_coord * ewh / n_pos

        if num_classes > 1:
            p = softmax(raw[..., 5:], axis=-1)
            onehot = np.eye(num_classes)[t_cls]
            logp = np.log(np.clip(p, 1e-12, None))
            class_loss = -(np.where(pos[..., None], onehot * logp, 0.0)).sum() / n_pos
            d_raw[..., 5:] = config.lambda_class * np.where(pos[..., None], p - onehot, 0.0) / n_pos

    total = obj_loss + config.lambda_coord * coord_loss + config.lambda_class * class_loss
    return float(total), d_raw


def evaluate_detector_ap(detector, data, conf_threshold, nms_iou, match_iou, batch_size=16):
    """AP of the detector against true annotations (used for toy validation)."""
    from .evaluator import average_precision, precision_recall

    detections = {}
    truths = {}
    for start in range(0, len(data), batch_size):
        chunk = data[start : start + batch_size]
        x = np.stack([_as_float_image(img) for img, _ in chunk])
        decoded = decode(detector.forward(x), conf_threshold, nms_iou)
        for k, (dets, (_, anns)) in enumerate(zip(decoded, chunk)):
            image_id = f"img{start + k:05d}"
            detections[image_id] = dets
            truths[image_id] = [Annotation(image_id=image_id, class_id=a.class_id, box=a.box)
                                for a in anns]
    points = precision_recall(detections, truths, match_iou)
    return average_precision(points)
