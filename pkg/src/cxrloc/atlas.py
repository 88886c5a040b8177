"""Canonical frontal-chest zone atlas: the 17 location labels, their
normalized boxes, mask rasterization, and IOU."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

LOCATION_LABELS = (
    "right upper lung zone", "right mid lung zone", "right lower lung zone",
    "left upper lung zone", "left mid lung zone", "left lower lung zone",
    "right hilar structures", "left hilar structures",
    "right hemidiaphragm", "left hemidiaphragm",
    "right cardiophrenic angle", "left cardiophrenic angle",
    "right costophrenic angle", "left costophrenic angle",
    "right cardiac silhouette", "left cardiac silhouette",
    "upper mediastinum",
)


class AtlasError(ValueError):
    pass


@dataclass(frozen=True)
class NormalizedBox:
    """Axis-aligned box in the unit square: (x, y) top-left, (w, h) extent."""
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise AtlasError(f"degenerate box {self}")
        if not (0.0 <= self.x and 0.0 <= self.y
                and self.x + self.w <= 1.0 + 1e-12 and self.y + self.h <= 1.0 + 1e-12):
            raise AtlasError(f"box outside unit square {self}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_tuple(self):
        return (self.x, self.y, self.w, self.h)


class Atlas:
    """LocationLabel -> NormalizedBox, loaded from a config file.

    `patient_right_on_image_left` records the display convention; left/right
    paired zones must mirror about x = 0.5.
    """

    def __init__(self, boxes: dict[str, NormalizedBox], patient_right_on_image_left: bool = True):
        unknown = set(boxes) - set(LOCATION_LABELS)
        if unknown:
            raise AtlasError(f"unknown location labels: {sorted(unknown)}")
        missing = set(LOCATION_LABELS) - set(boxes)
        if missing:
            raise AtlasError(f"atlas missing labels: {sorted(missing)}")
        self.boxes = dict(boxes)
        self.patient_right_on_image_left = patient_right_on_image_left
        self._check_mirror()

    def _check_mirror(self):
        for label, box in self.boxes.items():
            if not label.startswith("right "):
                continue
            twin = self.boxes["left " + label[len("right "):]]
            expect_x = 1.0 - (box.x + box.w)
            if not (abs(twin.x - expect_x) < 1e-9 and abs(twin.y - box.y) < 1e-9
                    and abs(twin.w - box.w) < 1e-9 and abs(twin.h - box.h) < 1e-9):
                raise AtlasError(f"left/right pair not mirrored for '{label}'")

    @classmethod
    def load(cls, path=None) -> "Atlas":
        if path is None:
            raw = resources.files("cxrloc.data").joinpath("atlas.json").read_text()
        else:
            with open(path) as fh:
                raw = fh.read()
        doc = json.loads(raw)
        boxes = {label: NormalizedBox(*vals) for label, vals in doc["boxes"].items()}
        return cls(boxes, bool(doc.get("patient_right_on_image_left", True)))


_default_atlas: Atlas | None = None


def default_atlas() -> Atlas:
    global _default_atlas
    if _default_atlas is None:
        _default_atlas = Atlas.load()
    return _default_atlas


def zone_box(label: str, atlas: Atlas) -> NormalizedBox:
    try:
        return atlas.boxes[label]
    except KeyError:
        raise AtlasError(f"unknown location label '{label}'") from None


def union_box(labels, atlas: Atlas) -> NormalizedBox:
    """Smallest axis-aligned box covering every member zone."""
    labels = list(labels)
    if not labels:
        raise AtlasError("union_box of empty label set")
    boxes = [zone_box(lb, atlas) for lb in labels]
    x0 = min(b.x for b in boxes)
    y0 = min(b.y for b in boxes)
    x1 = max(b.x + b.w for b in boxes)
    y1 = max(b.y + b.h for b in boxes)
    return NormalizedBox(x0, y0, x1 - x0, y1 - y0)


def rasterize_mask(box: NormalizedBox, H: int, W: int) -> np.ndarray:
    """Binary mask: 1 where the pixel center falls inside the box."""
    if H < 1 or W < 1:
        raise AtlasError("mask extents must be >= 1")
    cx = (np.arange(W) + 0.5) / W
    cy = (np.arange(H) + 0.5) / H
    in_x = (cx >= box.x) & (cx < box.x + box.w)
    in_y = (cy >= box.y) & (cy < box.y + box.h)
    return (in_y[:, None] & in_x[None, :]).astype(np.float64)


def iou(a: NormalizedBox, b: NormalizedBox) -> float:
    ix = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union


def mean_iou(pairs) -> float:
    pairs = list(pairs)
    if not pairs:
        raise AtlasError("mean_iou of empty list")
    return float(np.mean([iou(p, t) for p, t in pairs]))


def export_mask_png(box: NormalizedBox, H: int, W: int, path) -> None:
    """Write the rasterized mask as an 8-bit grayscale PNG/PGM for visual
    inspection (format chosen by the path's extension)."""
    from PIL import Image

    mask = (rasterize_mask(box, H, W) * 255).astype(np.uint8)
    Image.fromarray(mask, mode="L").save(path)


def dilate(box: NormalizedBox, frac: float) -> NormalizedBox:
    """Grow each extent by `frac`, clipped to the unit square."""
    dx, dy = box.w * frac / 2.0, box.h * frac / 2.0
    x0 = max(0.0, box.x - dx)
    y0 = max(0.0, box.y - dy)
    x1 = min(1.0, box.x + box.w + dx)
    y1 = min(1.0, box.y + box.h + dy)
    return NormalizedBox(x0, y0, x1 - x0, y1 - y0)
