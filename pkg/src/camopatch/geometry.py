"""Patch geometry: placement on annotated boxes, physical transform sampling,
and differentiable compositing of the patch into images."""

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

from . import _kernels

log = logging.getLogger(__name__)


class Placement(str, Enum):
    ON_TOP_CENTER = "on_top_center"
    SIDE_OFFSET = "side_offset"
    TWO_ON_TOP = "two_on_top"


@dataclass
class Patch:
    """Learnable pixel grid, shape (h, w, 3), values kept in [0, 1]."""

    pixels: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"patch pixels must be (h, w, 3), got {self.pixels.shape}")
        if self.pixels.shape[0] < 2 or self.pixels.shape[1] < 2:
            raise ValueError("patch must be at least 2x2")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("patch pixels must lie in [0, 1]")

    @property
    def shape(self):
        return self.pixels.shape

    @classmethod
    def random_uniform(cls, size_px, seed, meta=None):
        h, w = size_px
        rng = np.random.default_rng(seed)
        pixels = rng.uniform(0.0, 1.0, size=(h, w, 3))
        return cls(pixels, dict(meta or {}, init="uniform_random", seed=int(seed)))


@dataclass(frozen=True)
class PatchConfig:
    """Relative patch size and placement mode for one experiment row."""

    rel_width: float
    rel_height: float
    placement: Placement = Placement.ON_TOP_CENTER
    count: int = 1

    def __post_init__(self):
        if not (0.0 < self.rel_width <= 1.0 and 0.0 < self.rel_height <= 1.0):
            raise ValueError("rel_width/rel_height must be in (0, 1]")
        if (self.count == 2) != (self.placement is Placement.TWO_ON_TOP):
            raise ValueError("count must be 2 exactly for two_on_top placement")
        if self.count not in (1, 2):
            raise ValueError("count must be 1 or 2")

    def to_dict(self):
        return {
            "rel_width": self.rel_width,
            "rel_height": self.rel_height,
            "placement": self.placement.value,
            "count": self.count,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            rel_width=float(d["rel_width"]),
            rel_height=float(d["rel_height"]),
            placement=Placement(d["placement"]),
            count=int(d.get("count", 1)),
        )


@dataclass(frozen=True)
class TransformRanges:
    """Min/max bounds for each physical-jitter dimension.

    Angle defaults to the full circle; aerial objects have no preferred
    orientation.  The remaining defaults model mild recording variation.
    """

    angle: tuple = (0.0, 360.0)
    scale: tuple = (0.9, 1.1)
    noise_amplitude: tuple = (0.0, 0.1)
    contrast: tuple = (0.8, 1.2)
    brightness: tuple = (-0.1, 0.1)

    def __post_init__(self):
        for name in ("angle", "scale", "noise_amplitude", "contrast", "brightness"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"invalid {name} range: min {lo} > max {hi}")

    @classmethod
    def identity_jitter(cls):
        """Random rotation only; every other jitter frozen to the identity."""
        return cls(scale=(1.0, 1.0), noise_amplitude=(0.0, 0.0),
                   contrast=(1.0, 1.0), brightness=(0.0, 0.0))


@dataclass(frozen=True)
class TransformSample:
    """One draw of the physical transform applied to a patch before compositing.

    ``noise_seed`` reproduces the per-pixel additive noise deterministically,
    keeping compositing a pure function of its arguments.
    """

    angle_deg: float
    scale: float
    noise_amplitude: float
    contrast: float
    brightness: float
    noise_seed: int = 0

    @classmethod
    def identity(cls):
        return cls(angle_deg=0.0, scale=1.0, noise_amplitude=0.0,
                   contrast=1.0, brightness=0.0, noise_seed=0)


@dataclass(frozen=True)
class Annotation:
    """Axis-aligned object box (cx, cy, w, h) in pixels with a class label."""

    image_id: str
    class_id: int
    box: tuple

    def __post_init__(self):
        cx, cy, w, h = self.box
        if w <= 0 or h <= 0:
            raise ValueError(f"annotation box must have positive size, got w={w} h={h}")
        object.__setattr__(self, "box", (float(cx), float(cy), float(w), float(h)))

    def to_dict(self):
        return {"image_id": self.image_id, "class_id": self.class_id, "box": list(self.box)}

    @classmethod
    def from_dict(cls, d):
        return cls(image_id=d["image_id"], class_id=int(d["class_id"]), box=tuple(d["box"]))


def sample_transform(rng, ranges):
    """Draw one TransformSample from ``ranges`` using generator ``rng``.

    Draw order is fixed (angle, scale, noise, contrast, brightness, seed) so a
    seeded generator reproduces the same sequence.
    """
    angle = float(rng.uniform(*ranges.angle))
    scale = float(rng.uniform(*ranges.scale))
    noise_amp = float(rng.uniform(*ranges.noise_amplitude))
    contrast = float(rng.uniform(*ranges.contrast))
    brightness = float(rng.uniform(*ranges.brightness))
    noise_seed = int(rng.integers(0, 2**63 - 1))
    return TransformSample(angle, scale, noise_amp, contrast, brightness, noise_seed)


def patch_placements(annotation, config, side_gap=0.05):
    """Placement rectangles (center_x, center_y, target_w, target_h) for one object.

    on_top_center: one rectangle at the box center.
    side_offset: displaced right of the box by (0.5 + rel_width/2 + side_gap) * w,
    which keeps it fully outside the box for any rel size.
    two_on_top: two rectangles at cx -/+ w/4.
    """
    cx, cy, w, h = annotation.box
    tw = config.rel_width * w
    th = config.rel_height * h
    if config.placement is Placement.ON_TOP_CENTER:
        return [(cx, cy, tw, th)]
    if config.placement is Placement.SIDE_OFFSET:
        dx = (0.5 + config.rel_width / 2.0 + side_gap) * w
        return [(cx + dx, cy, tw, th)]
    if config.placement is Placement.TWO_ON_TOP:
        return [(cx - w / 4.0, cy, tw, th), (cx + w / 4.0, cy, tw, th)]
    raise ValueError(f"unknown placement {config.placement}")


def _warp_params(placement, transform, image_shape):
    """Shared forward/backward geometry: pivot, half-extents, rotation, clipped bbox."""
    H, W = image_shape[0], image_shape[1]
    cx, cy, tw, th = placement
    half_w = 0.5 * tw * transform.scale
    half_h = 0.5 * th * transform.scale
    theta = math.radians(transform.angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    ex = abs(cos_t) * half_w + abs(sin_t) * half_h
    ey = abs(sin_t) * half_w + abs(cos_t) * half_h
    x0 = max(int(math.floor(cx - ex)), 0)
    y0 = max(int(math.floor(cy - ey)), 0)
    x1 = min(int(math.ceil(cx + ex)), W)
    y1 = min(int(math.ceil(cy + ey)), H)
    return cx, cy, half_w, half_h, cos_t, sin_t, x0, y0, max(x1 - x0, 0), max(y1 - y0, 0)


def _transform_noise(transform, bh, bw):
    if transform.noise_amplitude > 0.0:
        rng = np.random.default_rng(transform.noise_seed)
        return rng.uniform(-transform.noise_amplitude, transform.noise_amplitude, size=(bh, bw, 3))
    return np.zeros((bh, bw, 3), dtype=np.float64)


def composite_patch(image, patch, placement, transform):
    """Composite ``patch`` over ``image`` at ``placement`` under ``transform``.

    The patch is rotated by the transform angle, scaled to the placement size
    times the scale jitter (bilinear resampling), jittered by noise, contrast
    and brightness, clamped to [0, 1] and written opaquely into its rotated
    footprint.  Pixels outside the footprint are untouched.  Returns a new
    image; the operation is differentiable w.r.t. the patch pixels via
    ``composite_patch_backward``.
    """
    image = np.asarray(image, dtype=np.float64)
    pixels = patch.pixels if isinstance(patch, Patch) else np.asarray(patch, dtype=np.float64)
    out = image.copy()
    cx, cy, half_w, half_h, cos_t, sin_t, x0, y0, bw, bh = _warp_params(placement, transform, image.shape)
    if bw == 0 or bh == 0 or half_w <= 0 or half_h <= 0:
        log.warning("patch placement %s lies fully outside image %s; skipped",
                    tuple(placement), image.shape[:2])
        return out
    noise = _transform_noise(transform, bh, bw)
    _kernels.composite_forward(out, pixels, cx, cy, half_w, half_h, cos_t, sin_t,
                               transform.contrast, transform.brightness, noise, x0, y0)
    return out


def composite_patch_backward(grad_image, patch, placement, transform):
    """Gradient of a scalar loss w.r.t. the patch pixels, given the loss
    gradient w.r.t. the composited image.

    ``grad_image`` is consumed in place: its footprint region is zeroed, since
    the patch overwrites the underlying image there.  Call once per composite,
    in reverse order of application when footprints can overlap.
    """
    pixels = patch.pixels if isinstance(patch, Patch) else np.asarray(patch, dtype=np.float64)
    cx, cy, half_w, half_h, cos_t, sin_t, x0, y0, bw, bh = _warp_params(placement, transform, grad_image.shape)
    if bw == 0 or bh == 0 or half_w <= 0 or half_h <= 0:
        return np.zeros_like(pixels)
    noise = _transform_noise(transform, bh, bw)
    return _kernels.composite_backward(grad_image, pixels, cx, cy, half_w, half_h, cos_t, sin_t,
                                       transform.contrast, transform.brightness, noise, x0, y0)


def patch_id(patch):
    """Stable identifier: sha256 of the 8-bit quantized pixels."""
    q = np.round(np.asarray(patch.pixels if isinstance(patch, Patch) else patch) * 255.0).astype(np.uint8)
    return hashlib.sha256(q.tobytes()).hexdigest()[:16]


def save_patch(patch, path):
    """Write the patch as an 8-bit PNG plus a JSON metadata sidecar."""
    path = Path(path)
    q = np.round(patch.pixels * 255.0).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path, format="PNG")
    meta = dict(patch.meta)
    meta["patch_id"] = patch_id(patch)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_patch(path):
    """Load a patch PNG and its sidecar metadata (round-trip error <= 1/255)."""
    path = Path(path)
    q = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    sidecar = path.with_suffix(".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return Patch(q / 255.0, meta)
