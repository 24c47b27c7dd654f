"""Synthetic overhead scenes for the toy pipeline.

Each scene is a muted textured ground plane with one or two bright plane
silhouettes at random position, size, and heading.  Boxes are tight around
the rotated silhouette.  Rendering is fully seeded, so a dataset is a pure
function of (n_images, size, seed).
"""

import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from .geometry import Annotation

log = logging.getLogger(__name__)

# Silhouette in a unit frame, nose pointing +x, symmetric about y=0.
_HALF_OUTLINE = [
    (0.50, 0.000),
    (0.38, 0.035),
    (0.10, 0.045),
    (-0.05, 0.46),
    (-0.16, 0.46),
    (-0.12, 0.05),
    (-0.34, 0.045),
    (-0.42, 0.20),
    (-0.485, 0.20),
    (-0.46, 0.04),
    (-0.50, 0.02),
]


def plane_polygon():
    """Closed plane outline as an (N, 2) array."""
    upper = [(x, -y) for x, y in _HALF_OUTLINE]
    lower = [(x, y) for x, y in reversed(_HALF_OUTLINE) if y != 0.0]
    return np.array(upper + lower)


def _points_in_polygon(px, py, poly):
    """Even-odd rule membership test, vectorized over a point grid."""
    inside = np.zeros(px.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        crosses = (y0 > py) != (y1 > py)
        if y1 == y0:
            continue
        x_at = (x1 - x0) * (py - y0) / (y1 - y0) + x0
        inside ^= crosses & (px < x_at)
    return inside


def rasterize_polygon(poly, height, width, supersample=2):
    """Coverage mask in [0,1] for a polygon given in pixel coordinates."""
    ss = supersample
    ys = (np.arange(height * ss) + 0.5) / ss
    xs = (np.arange(width * ss) + 0.5) / ss
    px, py = np.meshgrid(xs, ys)
    hits = _points_in_polygon(px, py, poly)
    cov = hits.reshape(height, ss, width, ss).mean(axis=(1, 3))
    return cov


@dataclass(frozen=True)
class SynthConfig:
    size: int = 256
    min_planes: int = 1
    max_planes: int = 2
    length_range: tuple = (96.0, 176.0)
    bg_luminance: tuple = (0.22, 0.45)
    plane_luminance: tuple = (0.62, 0.88)


def _background(size, rng, cfg):
    base = rng.uniform(*cfg.bg_luminance)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.full((size, size), base)
    for _ in range(2):
        theta = rng.uniform(0.0, np.pi)
        freq = rng.uniform(1.5, 4.0) * 2.0 * np.pi / size
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(0.01, 0.04)
        img += amp * np.cos(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    img = img[:, :, None] + rng.uniform(-0.02, 0.02, size=(size, size, 3))
    img += rng.uniform(-0.02, 0.02, size=3)
    return np.clip(img, 0.0, 1.0)


def _boxes_overlap(a, b):
    return (abs(a[0] - b[0]) < (a[2] + b[2]) / 2.0 + 4.0
            and abs(a[1] - b[1]) < (a[3] + b[3]) / 2.0 + 4.0)


def render_scene(rng, config=SynthConfig(), image_id="synth"):
    """Render one scene; returns (uint8 image, annotations)."""
    size = config.size
    img = _background(size, rng, config)
    unit = plane_polygon()
    n_planes = int(rng.integers(config.min_planes, config.max_planes + 1))
    annotations = []
    placed = []
    for _ in range(n_planes):
        for _attempt in range(20):
            length = rng.uniform(*config.length_range)
            theta = np.deg2rad(rng.uniform(0.0, 360.0))
            c, s = np.cos(theta), np.sin(theta)
            pts = unit * length
            pts = np.stack([c * pts[:, 0] - s * pts[:, 1],
                            s * pts[:, 0] + c * pts[:, 1]], axis=1)
            xmin, xmax = pts[:, 0].min(), pts[:, 0].max()
            ymin, ymax = pts[:, 1].min(), pts[:, 1].max()
            w, h = xmax - xmin, ymax - ymin
            if w + 4.0 >= size or h + 4.0 >= size:
                continue
            tx = rng.uniform(2.0 - xmin, size - 2.0 - xmax)
            ty = rng.uniform(2.0 - ymin, size - 2.0 - ymax)
            box = (tx + (xmin + xmax) / 2.0, ty + (ymin + ymax) / 2.0, w, h)
            if any(_boxes_overlap(box, p) for p in placed):
                continue
            pts = pts + np.array([tx, ty])
            x0 = max(int(np.floor(pts[:, 0].min())) - 1, 0)
            x1 = min(int(np.ceil(pts[:, 0].max())) + 1, size)
            y0 = max(int(np.floor(pts[:, 1].min())) - 1, 0)
            y1 = min(int(np.ceil(pts[:, 1].max())) + 1, size)
            cov = rasterize_polygon(pts - np.array([x0, y0]), y1 - y0, x1 - x0)
            lum = rng.uniform(*config.plane_luminance)
            tint = rng.uniform(-0.05, 0.05, size=3)
            shade = rng.uniform(-0.08, 0.08)
            yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
            axis = ((xx - tx) * c + (yy - ty) * s) / max(length, 1.0)
            color = np.clip(lum + shade * axis[:, :, None] + tint, 0.0, 1.0)
            region = img[y0:y1, x0:x1]
            img[y0:y1, x0:x1] = region * (1.0 - cov[:, :, None]) + color * cov[:, :, None]
            annotations.append(Annotation(image_id=image_id, class_id=0, box=box))
            placed.append(box)
            break
        else:
            log.debug("gave up placing a plane in %s", image_id)
    return (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8), annotations


def make_dataset(n_images, seed, config=SynthConfig()):
    """List of (image, annotations); element i depends only on (seed, i)."""
    out = []
    for i in range(n_images):
        rng = np.random.default_rng((seed, i))
        image_id = f"synth-{i:05d}"
        out.append(render_scene(rng, config, image_id))
    return out


def save_dataset(dataset, out_dir):
    """Write PNG images plus an annotations.json index."""
    from PIL import Image

    os.makedirs(out_dir, exist_ok=True)
    index = {}
    for i, (img, anns) in enumerate(dataset):
        name = f"synth-{i:05d}.png"
        Image.fromarray(img).save(os.path.join(out_dir, name))
        index[name] = [{"class_id": a.class_id, "box": list(a.box)} for a in anns]
    with open(os.path.join(out_dir, "annotations.json"), "w") as f:
        json.dump(index, f, indent=2, sort_keys=True)
    return out_dir
