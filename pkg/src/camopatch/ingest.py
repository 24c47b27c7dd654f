"""Dataset ingest: tiling large frames, manifests, and train/test splits.

Large source images are cut into fixed-size overlapping tiles (zero-padded at
the edges), boxes are clipped per tile, and a JSON manifest records where each
tile came from.  Splits are made per source image so tiles of one frame never
land on both sides.
"""

import csv
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import Annotation

log = logging.getLogger(__name__)

# fraction of a box's area that must survive clipping for it to be kept
MIN_BOX_RETENTION = 0.3


@dataclass
class ManifestEntry:
    image_id: str
    path: str
    source_id: str
    origin: tuple = (0, 0)
    annotations: list = field(default_factory=list)

    def to_dict(self):
        return {
            "image_id": self.image_id,
            "path": self.path,
            "source_id": self.source_id,
            "origin": list(self.origin),
            "annotations": [{"class_id": a.class_id, "box": list(a.box)} for a in self.annotations],
        }

    @classmethod
    def from_dict(cls, d):
        anns = [Annotation(image_id=d["image_id"], class_id=a["class_id"], box=tuple(a["box"]))
                for a in d["annotations"]]
        return cls(image_id=d["image_id"], path=d["path"], source_id=d["source_id"],
                   origin=tuple(d["origin"]), annotations=anns)


@dataclass
class DatasetManifest:
    entries: list
    meta: dict = field(default_factory=dict)

    def save(self, path):
        payload = {"meta": self.meta, "entries": [e.to_dict() for e in self.entries]}
        with open(path, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
        return path

    @classmethod
    def load(cls, path):
        with open(path) as f:
            payload = json.load(f)
        return cls(entries=[ManifestEntry.from_dict(d) for d in payload["entries"]],
                   meta=payload.get("meta", {}))

    def load_images(self, root=None):
        """Materialize (image, annotations) pairs; paths resolve against root."""
        out = []
        for e in self.entries:
            p = e.path if root is None or os.path.isabs(e.path) else os.path.join(root, e.path)
            if not os.path.exists(p):
                raise FileNotFoundError(f"manifest references missing tile: {p}")
            out.append((load_image(p), list(e.annotations)))
        return out


def load_image(path):
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_image(path, array):
    from PIL import Image

    if array.dtype != np.uint8:
        array = (np.clip(array, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(array).save(path)
    return path


def polygon_to_box(coords):
    """Axis-aligned (cx, cy, w, h) around an 8-value polygon."""
    xs, ys = coords[0::2], coords[1::2]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    return ((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)


def load_dota_annotations(path, image_id, class_map):
    """Parse polygon annotation lines: 8 coords, class name, difficulty flag.

    Header lines (imagesource/gsd) are skipped.  Unknown class names are added
    to class_map in encounter order.
    """
    anns = []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if len(parts) < 9 or parts[0].startswith(("imagesource", "gsd")):
                continue
            try:
                coords = [float(v) for v in parts[:8]]
            except ValueError:
                continue
            name = parts[8]
            if name not in class_map:
                class_map[name] = len(class_map)
            box = polygon_to_box(coords)
            if box[2] <= 0 or box[3] <= 0:
                continue
            anns.append(Annotation(image_id=image_id, class_id=class_map[name], box=box))
    return anns


def load_csv_annotations(path):
    """CSV rows image_id,class_id,cx,cy,w,h -> dict image_id -> annotations."""
    out = {}
    with open(path, newline="") as f:
        for row in csv.reader(f):
            if not row or row[0].strip().startswith("#") or row[0] == "image_id":
                continue
            image_id, class_id = row[0], int(row[1])
            box = tuple(float(v) for v in row[2:6])
            out.setdefault(image_id, []).append(
                Annotation(image_id=image_id, class_id=class_id, box=box))
    return out


def clip_box_to_window(box, x0, y0, x1, y1, min_retention=MIN_BOX_RETENTION):
    """Clip (cx, cy, w, h) to a window; None if too little area survives."""
    bx0, by0 = box[0] - box[2] / 2.0, box[1] - box[3] / 2.0
    bx1, by1 = box[0] + box[2] / 2.0, box[1] + box[3] / 2.0
    cx0, cy0 = max(bx0, x0), max(by0, y0)
    cx1, cy1 = min(bx1, x1), min(by1, y1)
    if cx1 <= cx0 or cy1 <= cy0:
        return None
    if (cx1 - cx0) * (cy1 - cy0) < min_retention * box[2] * box[3]:
        return None
    return ((cx0 + cx1) / 2.0, (cy0 + cy1) / 2.0, cx1 - cx0, cy1 - cy0)


def tile_image(image, annotations, tile_size, overlap, keep_empty=False,
               min_retention=MIN_BOX_RETENTION):
    """Cut one frame into tiles; returns (tile, annotations, (ox, oy)) triples.

    The grid steps by tile_size - overlap; tiles that run past the frame are
    zero-padded to full size.  Boxes are clipped per tile and dropped when
    less than min_retention of their area remains.
    """
    if not 0 <= overlap < tile_size:
        raise ValueError("need 0 <= overlap < tile_size")
    H, W = image.shape[:2]
    step = tile_size - overlap
    tiles = []
    for oy in range(0, max(H, 1), step):
        if oy >= H:
            break
        for ox in range(0, max(W, 1), step):
            if ox >= W:
                break
            crop = image[oy : oy + tile_size, ox : ox + tile_size]
            clipped = []
            for ann in annotations:
                box = clip_box_to_window(ann.box, ox, oy, min(ox + tile_size, W),
                                         min(oy + tile_size, H), min_retention)
                if box is not None:
                    clipped.append(Annotation(image_id=ann.image_id, class_id=ann.class_id,
                                              box=(box[0] - ox, box[1] - oy, box[2], box[3])))
            if not clipped and not keep_empty:
                continue
            if crop.shape[0] != tile_size or crop.shape[1] != tile_size:
                padded = np.zeros((tile_size, tile_size, 3), dtype=image.dtype)
                padded[: crop.shape[0], : crop.shape[1]] = crop
                crop = padded
            tiles.append((crop, clipped, (ox, oy)))
    return tiles


def tile_dataset(sources, out_dir, tile_size, overlap, keep_empty=False):
    """Tile (source_id, image, annotations) triples into out_dir/tiles and
    return the manifest (tile paths are relative to out_dir)."""
    tiles_dir = os.path.join(out_dir, "tiles")
    os.makedirs(tiles_dir, exist_ok=True)
    entries = []
    for source_id, image, annotations in sources:
        for crop, clipped, (ox, oy) in tile_image(image, annotations, tile_size, overlap,
                                                  keep_empty=keep_empty):
            tile_id = f"{source_id}_x{ox}_y{oy}"
            rel = os.path.join("tiles", f"{tile_id}.png")
            save_image(os.path.join(out_dir, rel), crop)
            anns = [Annotation(image_id=tile_id, class_id=a.class_id, box=a.box)
                    for a in clipped]
            entries.append(ManifestEntry(image_id=tile_id, path=rel, source_id=source_id,
                                         origin=(ox, oy), annotations=anns))
    manifest = DatasetManifest(entries=entries,
                               meta={"tile_size": tile_size, "overlap": overlap})
    return manifest


def split_manifest(manifest, test_fraction, seed):
    """Split per source image: every tile of a source lands on one side."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    sources = sorted({e.source_id for e in manifest.entries})
    if len(sources) < 2:
        raise ValueError("need at least two source images to split")
    order = np.random.default_rng(seed).permutation(len(sources))
    n_test = int(np.clip(round(test_fraction * len(sources)), 1, len(sources) - 1))
    test_sources = {sources[i] for i in order[:n_test]}
    train = [e for e in manifest.entries if e.source_id not in test_sources]
    test = [e for e in manifest.entries if e.source_id in test_sources]
    meta = dict(manifest.meta)
    return (DatasetManifest(train, {**meta, "split": "train", "seed": seed}),
            DatasetManifest(test, {**meta, "split": "test", "seed": seed}))
