"""Axis-aligned integer boxes: IoU, containment, intersection, proposal filtering.

A box covers pixels ``x .. x+w-1`` and ``y .. y+h-1``; areas count pixels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple


@dataclass(frozen=True, order=True)
class Box:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            v = getattr(self, name)
            if int(v) != v:
                raise ValueError(f"Box.{name} must be an integer, got {v!r}")
            object.__setattr__(self, name, int(v))
        if self.w < 1 or self.h < 1:
            raise ValueError(f"Box extents must be >= 1, got w={self.w} h={self.h}")
        if self.x < 0 or self.y < 0:
            raise ValueError(f"Box corner must be non-negative, got ({self.x}, {self.y})")

    @property
    def x2(self):
        return self.x + self.w

    @property
    def y2(self):
        return self.y + self.h

    @property
    def area(self):
        return self.w * self.h

    def as_tuple(self):
        return (self.x, self.y, self.w, self.h)

    def within(self, width, height):
        return self.x2 <= width and self.y2 <= height


@dataclass(frozen=True)
class FilterConfig:
    min_scale: int = 64
    aspect_ratio_min: float = 1 / 3
    aspect_ratio_max: float = 3.0
    max_iou: float = 0.5

    def __post_init__(self):
        if not 0 < self.aspect_ratio_min <= self.aspect_ratio_max:
            raise ValueError("need 0 < aspect_ratio_min <= aspect_ratio_max")
        if not 0 <= self.max_iou <= 1:
            raise ValueError("max_iou must be in [0, 1]")


def intersect(a: Box, b: Box) -> Box | None:
    x1, y1 = max(a.x, b.x), max(a.y, b.y)
    x2, y2 = min(a.x2, b.x2), min(a.y2, b.y2)
    if x2 - x1 < 1 or y2 - y1 < 1:
        return None
    return Box(x1, y1, x2 - x1, y2 - y1)


def iou(a: Box, b: Box) -> float:
    inter = intersect(a, b)
    if inter is None:
        return 0.0
    union = a.area + b.area - inter.area
    return inter.area / union


def contains(outer: Box, inner: Box) -> bool:
    return (
        outer.x <= inner.x
        and outer.y <= inner.y
        and inner.x2 <= outer.x2
        and inner.y2 <= outer.y2
    )


def aspect_ratio(b: Box) -> float:
    return b.w / b.h


def passes_shape(b: Box, cfg: FilterConfig) -> bool:
    return (
        min(b.w, b.h) >= cfg.min_scale
        and cfg.aspect_ratio_min <= aspect_ratio(b) <= cfg.aspect_ratio_max
    )


def filter_proposals(boxes: Iterable[Box], cfg: FilterConfig = FilterConfig()) -> list[Box]:
    """Drop boxes that are too small, too elongated, or redundant.

    Redundancy is resolved greedily with larger boxes claiming first (stable on
    ties); survivors are returned in their original input order.
    """
    boxes = list(boxes)
    candidates = [i for i, b in enumerate(boxes) if passes_shape(b, cfg)]
    candidates.sort(key=lambda i: -boxes[i].area)
    kept: list[int] = []
    for i in candidates:
        if all(iou(boxes[i], boxes[j]) <= cfg.max_iou for j in kept):
            kept.append(i)
    return [boxes[i] for i in sorted(kept)]


class LocalBox(NamedTuple):
    x: float
    y: float
    w: float
    h: float


def to_local(box: Box, view: Box, out_size) -> LocalBox:
    """Map ``box`` into the frame of ``view`` resized to ``out_size`` (int or (w, h))."""
    if isinstance(out_size, (tuple, list)):
        out_w, out_h = out_size
    else:
        out_w = out_h = out_size
    clipped = intersect(box, view)
    if clipped is None:
        raise ValueError(f"{box} does not intersect view {view}")
    sx, sy = out_w / view.w, out_h / view.h
    return LocalBox(
        (clipped.x - view.x) * sx,
        (clipped.y - view.y) * sy,
        clipped.w * sx,
        clipped.h * sy,
    )


# ---------------------------------------------------------------------------
# text format: one box per line, "x y w h [label]"
# ---------------------------------------------------------------------------


class BoxFormatError(ValueError):
    def __init__(self, msg, line=None, column=None):
        where = ""
        if line is not None:
            where = f"line {line}" + (f", column {column}" if column is not None else "") + ": "
        super().__init__(where + msg)
        self.line = line
        self.column = column


def format_boxes(boxes, labels=None) -> str:
    lines = []
    for i, b in enumerate(boxes):
        fields = [str(b.x), str(b.y), str(b.w), str(b.h)]
        if labels is not None:
            fields.append(str(labels[i]))
        lines.append(" ".join(fields))
    return "\n".join(lines) + ("\n" if lines else "")


def parse_boxes(text: str):
    """Parse the box text format. Returns ``(boxes, labels)``; labels may contain None.

    Blank lines and ``#`` comments are skipped.
    """
    boxes, labels = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) not in (4, 5):
            raise BoxFormatError(f"expected 4 or 5 fields, got {len(parts)}", lineno)
        vals = []
        col = 0
        for tok in parts[:4]:
            col = line.index(tok, col) + 1
            try:
                vals.append(int(tok))
            except ValueError:
                raise BoxFormatError(f"not an integer: {tok!r}", lineno, col) from None
            col += len(tok) - 1
        try:
            boxes.append(Box(*vals))
        except ValueError as exc:
            raise BoxFormatError(str(exc), lineno) from None
        labels.append(parts[4] if len(parts) == 5 else None)
    return boxes, labels


def read_boxes(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_boxes(fh.read())


def write_boxes(path, boxes, labels=None):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_boxes(boxes, labels))
