"""COCO-JSON dataset index, synthetic shapes generator and image loading."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from .geometry import Box, box_iou_matrix, xywh_to_xyxy, xyxy_to_xywh

logger = logging.getLogger(__name__)

SHAPE_CLASSES = ("rectangle", "circle", "triangle")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ImageInfo:
    id: int
    file_name: str
    width: int
    height: int


@dataclass(frozen=True)
class Annotation:
    id: int
    image_id: int
    class_id: int  # contiguous index into DatasetIndex.categories
    box: Box


@dataclass
class DatasetIndex:
    images: list[ImageInfo]
    annotations: list[Annotation]
    categories: list[dict]
    root: Path | None = None
    _by_image: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.validate()
        by_image: dict[int, list[Annotation]] = {im.id: [] for im in self.images}
        for a in self.annotations:
            by_image[a.image_id].append(a)
        self._by_image = by_image

    @property
    def num_classes(self) -> int:
        return len(self.categories)

    def validate(self) -> None:
        ids = {im.id for im in self.images}
        if len(ids) != len(self.images):
            raise DatasetError("duplicate image ids")
        sizes = {im.id: (im.width, im.height) for im in self.images}
        for a in self.annotations:
            if a.image_id not in ids:
                raise DatasetError(f"annotation {a.id} references unknown image_id {a.image_id}")
            if not 0 <= a.class_id < len(self.categories):
                raise DatasetError(f"annotation {a.id} has unknown class index {a.class_id}")
            w, h = sizes[a.image_id]
            x1, y1, x2, y2 = a.box
            if not (x2 > x1 and y2 > y1):
                raise DatasetError(f"annotation {a.id} has nonpositive area {tuple(a.box)}")
            if x1 < 0 or y1 < 0 or x2 > w or y2 > h:
                raise DatasetError(f"annotation {a.id} box {tuple(a.box)} outside image {a.image_id} ({w}x{h})")

    def annotations_for(self, image_id: int) -> list[Annotation]:
        return self._by_image[image_id]

    def boxes_for(self, image_id: int) -> tuple[np.ndarray, np.ndarray]:
        anns = self._by_image[image_id]
        boxes = np.array([tuple(a.box) for a in anns], dtype=np.float64).reshape(-1, 4)
        labels = np.array([a.class_id for a in anns], dtype=np.int64)
        return boxes, labels

    def image_path(self, info: ImageInfo) -> Path:
        return (self.root or Path(".")) / info.file_name

    def load_image(self, info: ImageInfo) -> np.ndarray:
        with Image.open(self.image_path(info)) as im:
            return np.asarray(im.convert("RGB"))

    def to_coco(self) -> dict:
        return {
            "images": [{"id": im.id, "file_name": im.file_name, "width": im.width, "height": im.height}
                       for im in self.images],
            "annotations": [{"id": a.id, "image_id": a.image_id, "category_id": self.categories[a.class_id]["id"],
                             "bbox": [round(v, 6) for v in xyxy_to_xywh(a.box)],
                             "area": round((a.box[2] - a.box[0]) * (a.box[3] - a.box[1]), 6), "iscrowd": 0}
                            for a in self.annotations],
            "categories": [dict(c) for c in self.categories],
        }

    def subset(self, image_ids: Sequence[int]) -> "DatasetIndex":
        keep = set(image_ids)
        return DatasetIndex([im for im in self.images if im.id in keep],
                            [a for a in self.annotations if a.image_id in keep], self.categories, self.root)


def save_coco_json(index: DatasetIndex, path) -> None:
    with open(path, "w") as fh:
        json.dump(index.to_coco(), fh, indent=1, sort_keys=True)


def load_coco_json(path, out_of_bounds: str = "reject", bbox_format: str = "xywh") -> DatasetIndex:
    """Read a COCO-style file into a validated index.

    ``bbox_format`` is ``xywh`` (COCO), ``cxcywh`` or ``xyxy``; boxes become
    xyxy. ``out_of_bounds='clip'`` clips boxes to the image instead of
    rejecting them.
    """
    path = Path(path)
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: malformed JSON ({e})") from e
    for key in ("images", "annotations", "categories"):
        if key not in raw:
            raise DatasetError(f"{path}: missing top-level key {key!r}")
    images = [ImageInfo(int(im["id"]), im["file_name"], int(im["width"]), int(im["height"])) for im in raw["images"]]
    sizes = {im.id: (im.width, im.height) for im in images}
    categories = [{"id": int(c["id"]), "name": c.get("name", str(c["id"]))} for c in raw["categories"]]
    cat_index = {c["id"]: i for i, c in enumerate(categories)}
    anns = []
    for k, a in enumerate(raw["annotations"]):
        if a["image_id"] not in sizes:
            raise DatasetError(f"annotation {a.get('id', k)} references unknown image_id {a['image_id']}")
        if a["category_id"] not in cat_index:
            raise DatasetError(f"annotation {a.get('id', k)} references unknown category_id {a['category_id']}")
        b = [float(v) for v in a["bbox"]]
        if bbox_format == "xywh":
            box = xywh_to_xyxy(b)
        elif bbox_format == "cxcywh":
            box = Box(b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2)
        elif bbox_format == "xyxy":
            box = Box(*b)
        else:
            raise ValueError(f"unknown bbox_format {bbox_format!r}")
        if out_of_bounds == "clip":
            w, h = sizes[a["image_id"]]
            box = Box(min(max(box.x1, 0), w), min(max(box.y1, 0), h), min(max(box.x2, 0), w), min(max(box.y2, 0), h))
        elif out_of_bounds != "reject":
            raise ValueError("out_of_bounds must be 'reject' or 'clip'")
        anns.append(Annotation(int(a.get("id", k + 1)), int(a["image_id"]), cat_index[a["category_id"]], box))
    return DatasetIndex(images, anns, categories, path.parent)


# -- synthetic shapes -------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    num_images: int = 50
    image_size: int = 256
    min_shapes: int = 1
    max_shapes: int = 3
    min_frac: float = 0.15
    max_frac: float = 0.45
    seed: int = 0
    classes: tuple = SHAPE_CLASSES


def _sample_layout(rng: np.random.Generator, spec: SynthSpec):
    s = spec.image_size
    n = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    placed: list[tuple[int, tuple, tuple]] = []
    for _ in range(n):
        for _attempt in range(20):
            cls = int(rng.integers(len(spec.classes)))
            w = rng.uniform(spec.min_frac, spec.max_frac) * s
            h = w if cls == 1 else rng.uniform(spec.min_frac, spec.max_frac) * s
            x1 = rng.uniform(0, s - w)
            y1 = rng.uniform(0, s - h)
            box = (round(x1), round(y1), round(x1 + w), round(y1 + h))
            color = tuple(int(c) for c in rng.integers(60, 256, size=3))
            if placed:
                prev = np.array([p[1] for p in placed], dtype=np.float64)
                if box_iou_matrix(np.array([box], dtype=np.float64), prev).max() > 0.05:
                    continue
            placed.append((cls, box, color))
            break
    return placed


def _render(rng: np.random.Generator, spec: SynthSpec, layout) -> Image.Image:
    s = spec.image_size
    base = rng.integers(0, 60, size=3)
    noise = rng.integers(-20, 21, size=(s, s, 3))
    img = Image.fromarray(np.clip(base + noise, 0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(img)
    for cls, (x1, y1, x2, y2), color in layout:
        name = spec.classes[cls]
        if name == "rectangle":
            draw.rectangle([x1, y1, x2 - 1, y2 - 1], fill=color)
        elif name == "circle":
            draw.ellipse([x1, y1, x2 - 1, y2 - 1], fill=color)
        else:
            draw.polygon([((x1 + x2) / 2, y1), (x1, y2 - 1), (x2 - 1, y2 - 1)], fill=color)
    return img


def generate_synthetic(spec: SynthSpec, out_dir, write_images: bool = True) -> DatasetIndex:
    """Render ``spec.num_images`` PNGs of colored shapes plus ``annotations.json``.

    Output is bit-identical for a given spec. Each shape's box is the pixel
    extent it is drawn into (x2/y2 exclusive). With ``write_images=False``
    nothing is written and ``out_dir`` may be None.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if write_images:
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise DatasetError(f"cannot create {out_dir}: {e.strerror}") from e
        if not os.access(out_dir, os.W_OK):
            raise DatasetError(f"{out_dir} is not writable")
    rng = np.random.default_rng(spec.seed)
    images, anns = [], []
    for i in range(spec.num_images):
        layout = _sample_layout(rng, spec)
        img = _render(rng, spec, layout)
        name = f"{i:06d}.png"
        if write_images:
            img.save(out_dir / name, format="PNG", optimize=False)
        images.append(ImageInfo(i + 1, name, spec.image_size, spec.image_size))
        for cls, box, _ in layout:
            anns.append(Annotation(len(anns) + 1, i + 1, cls, Box(*map(float, box))))
    cats = [{"id": k + 1, "name": n} for k, n in enumerate(spec.classes)]
    index = DatasetIndex(images, anns, cats, out_dir)
    if write_images:
        save_coco_json(index, out_dir / "annotations.json")
    return index


class InMemoryDataset:
    """Decoded images and their boxes, held in RAM for desk-scale runs."""

    def __init__(self, index: DatasetIndex):
        self.index = index
        self.images = [index.load_image(info) for info in index.images]
        self.targets = [index.boxes_for(info.id) for info in index.images]

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        boxes, labels = self.targets[i]
        return self.images[i], boxes.copy(), labels.copy(), self.index.images[i].id
