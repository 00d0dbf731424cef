"""Box overlap measures and coordinate-convention helpers.

All arithmetic is 64-bit floating point. Zero-area intersection on shared
edges counts as no overlap (open-interval convention).
"""

from __future__ import annotations

from .graph import BoundingBox


class NonPositiveExtent(ValueError):
    pass


def intersection_area(a: BoundingBox, b: BoundingBox) -> float:
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    return ix * iy


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union, in [0, 1]."""
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    return inter / union


def giou(a: BoundingBox, b: BoundingBox) -> float:
    """Generalized IoU, in [-1, 1].

    IoU minus the fraction of the tightest enclosing box not covered by
    the union. Equals IoU when the enclosing box is fully covered;
    approaches -1 as the boxes separate.
    """
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    enclosing = (max(a.x2, b.x2) - min(a.x1, b.x1)) * (max(a.y2, b.y2) - min(a.y1, b.y1))
    return inter / union - (enclosing - union) / enclosing


def xywh_to_corners(x: float, y: float, w: float, h: float) -> BoundingBox:
    """Convert top-left + width/height (dataset convention) to a corner-pair box.

    Model outputs are already corner pairs; dataset files store xywh. This
    converter is the single bridge between the two conventions.
    """
    if w <= 0 or h <= 0:
        raise NonPositiveExtent(f"box extent must be positive, got w={w}, h={h}")
    return BoundingBox(x1=x, y1=y, x2=x + w, y2=y + h)


def crop_window(box: BoundingBox, pad_ratio: float = 0.1,
                bounds: tuple[float, float] | None = None) -> BoundingBox:
    """Expand a region box by `pad_ratio` of its extent on every side,
    clamped to image `bounds` (width, height) when known."""
    pad_x = box.width * pad_ratio
    pad_y = box.height * pad_ratio
    x1 = max(0.0, box.x1 - pad_x)
    y1 = max(0.0, box.y1 - pad_y)
    x2 = box.x2 + pad_x
    y2 = box.y2 + pad_y
    if bounds is not None:
        x2 = min(x2, float(bounds[0]))
        y2 = min(y2, float(bounds[1]))
    return BoundingBox(x1=x1, y1=y1, x2=x2, y2=y2)


def offset_box(box: BoundingBox, dx: float, dy: float) -> BoundingBox:
    """Translate a box; used to map crop-frame outputs back to full-image
    coordinates."""
    return BoundingBox(x1=box.x1 + dx, y1=box.y1 + dy, x2=box.x2 + dx, y2=box.y2 + dy)
