"""Box geometry: overlap, suppression and the cross-modal shift transforms.

Boxes are stored corner+size, ``(x_min, y_min, width, height)`` in pixels.
Shift targets are expressed on box centers, normalized by the reference
box size.  Array helpers take ``(N, 4)`` arrays in the same layout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    width: float
    height: float

    def __post_init__(self):
        for name in ("x_min", "y_min", "width", "height"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"Box.{name} must be finite, got {getattr(self, name)!r}")
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"Box needs positive size, got {self.width}x{self.height}")

    @classmethod
    def from_center(cls, cx: float, cy: float, width: float, height: float) -> "Box":
        return cls(cx - width / 2.0, cy - height / 2.0, width, height)

    @property
    def center_x(self) -> float:
        return self.x_min + self.width / 2.0

    @property
    def center_y(self) -> float:
        return self.y_min + self.height / 2.0

    @property
    def x_max(self) -> float:
        return self.x_min + self.width

    @property
    def y_max(self) -> float:
        return self.y_min + self.height

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.width, self.height]

    def translate(self, dx: float, dy: float) -> "Box":
        return Box(self.x_min + dx, self.y_min + dy, self.width, self.height)

    def scale(self, factor: float) -> "Box":
        """Coordinates multiplied by ``factor`` (image -> feature space uses 1/stride)."""
        return Box(self.x_min * factor, self.y_min * factor,
                   self.width * factor, self.height * factor)


@dataclass(frozen=True)
class ShiftTarget:
    t_x: float
    t_y: float

    def __post_init__(self):
        if not (math.isfinite(self.t_x) and math.isfinite(self.t_y)):
            raise ValueError(f"non-finite shift target ({self.t_x}, {self.t_y})")


def iou(a: Box, b: Box) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # rounding can push the ratio a hair past 1 for near-identical boxes
    return min(1.0, inter / (a.area + b.area - inter))


def encode_shift(reference: Box, sensed: Box) -> ShiftTarget:
    return ShiftTarget((sensed.center_x - reference.center_x) / reference.width,
                       (sensed.center_y - reference.center_y) / reference.height)


def apply_shift(box: Box, target: ShiftTarget) -> Box:
    return box.translate(target.t_x * box.width, target.t_y * box.height)


def jitter_box(box: Box, sigma_x: float, sigma_y: float, rng: np.random.Generator) -> Box:
    return apply_shift(box, draw_jitter(sigma_x, sigma_y, rng))


def draw_jitter(sigma_x: float, sigma_y: float, rng: np.random.Generator) -> ShiftTarget:
    """One jitter target from the independent-axes zero-mean normal."""
    if sigma_x < 0 or sigma_y < 0:
        raise ValueError(f"jitter sigma must be >= 0, got ({sigma_x}, {sigma_y})")
    t_x, t_y = rng.normal(0.0, 1.0, size=2)
    return ShiftTarget(float(t_x * sigma_x), float(t_y * sigma_y))


def enlarge_context(box: Box, factor: float, bounds: tuple[float, float]) -> Box:
    """Scale ``box`` about its center by ``factor`` and clip to ``[0, w] x [0, h]``."""
    if factor < 1:
        raise ValueError(f"context factor must be >= 1, got {factor}")
    bw, bh = bounds
    w = box.width * factor
    h = box.height * factor
    x0 = max(0.0, box.center_x - w / 2.0)
    y0 = max(0.0, box.center_y - h / 2.0)
    x1 = min(float(bw), box.center_x + w / 2.0)
    y1 = min(float(bh), box.center_y + h / 2.0)
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"{box} lies outside image bounds {bounds}")
    return Box(x0, y0, x1 - x0, y1 - y0)


def nms(boxes_with_scores: Sequence[tuple[Box, float]], iou_threshold: float) -> list[int]:
    """Greedy suppression; returns kept indices in descending-score order."""
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in [0, 1], got {iou_threshold}")
    if not boxes_with_scores:
        return []
    arr = boxes_to_array([b for b, _ in boxes_with_scores])
    scores = np.array([s for _, s in boxes_with_scores], dtype=np.float64)
    return nms_array(arr, scores, iou_threshold)


# -- array forms -------------------------------------------------------------

def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4))
    return np.array([b.as_list() for b in boxes], dtype=np.float64)


def array_to_boxes(arr: np.ndarray) -> list[Box]:
    return [Box(*map(float, row)) for row in np.asarray(arr, dtype=np.float64)]


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``(N, 4)`` and ``(M, 4)`` corner+size arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax1, ay1 = a[:, 0:1], a[:, 1:2]
    ax2, ay2 = ax1 + a[:, 2:3], ay1 + a[:, 3:4]
    bx1, by1 = b[:, 0], b[:, 1]
    bx2, by2 = bx1 + b[:, 2], by1 + b[:, 3]
    iw = np.clip(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0, None)
    ih = np.clip(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0, None)
    inter = iw * ih
    union = a[:, 2:3] * a[:, 3:4] + b[:, 2] * b[:, 3] - inter
    return np.where(inter > 0, np.minimum(inter / np.where(union > 0, union, 1.0), 1.0), 0.0)


def nms_array(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    n = len(scores)
    if n == 0:
        return []
    # lexsort: last key is primary -> descending score, then ascending index
    order = np.lexsort((np.arange(n), -np.asarray(scores)))
    overlaps = iou_matrix(boxes, boxes)
    suppressed = np.zeros(n, dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= overlaps[i] > iou_threshold
    return keep


def encode_shift_array(reference: np.ndarray, sensed: np.ndarray) -> np.ndarray:
    ref_c = reference[:, :2] + reference[:, 2:] / 2.0
    sen_c = sensed[:, :2] + sensed[:, 2:] / 2.0
    return (sen_c - ref_c) / reference[:, 2:]


def apply_shift_array(boxes: np.ndarray, targets: np.ndarray) -> np.ndarray:
    out = np.array(boxes, dtype=np.float64, copy=True)
    out[:, :2] += targets * out[:, 2:]
    return out


def enlarge_context_array(boxes: np.ndarray, factor: float, bounds: tuple[float, float]) -> np.ndarray:
    if factor < 1:
        raise ValueError(f"context factor must be >= 1, got {factor}")
    c = boxes[:, :2] + boxes[:, 2:] / 2.0
    half = boxes[:, 2:] * factor / 2.0
    lo = np.maximum(c - half, 0.0)
    hi = np.minimum(c + half, np.array(bounds, dtype=np.float64))
    if np.any(hi <= lo):
        raise ValueError("context box lies outside image bounds")
    return np.concatenate([lo, hi - lo], axis=1)


# Fast R-CNN box regression, normalized by the usual (0.1, 0.1, 0.2, 0.2) stds.
BOX_DELTA_STDS = np.array([0.1, 0.1, 0.2, 0.2])


def encode_deltas(proposals: np.ndarray, gt: np.ndarray) -> np.ndarray:
    pc = proposals[:, :2] + proposals[:, 2:] / 2.0
    gc = gt[:, :2] + gt[:, 2:] / 2.0
    d = np.concatenate([(gc - pc) / proposals[:, 2:], np.log(gt[:, 2:] / proposals[:, 2:])], axis=1)
    return d / BOX_DELTA_STDS


def decode_deltas(proposals: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    d = deltas * BOX_DELTA_STDS
    pc = proposals[:, :2] + proposals[:, 2:] / 2.0
    c = pc + d[:, :2] * proposals[:, 2:]
    # clamp log-scale deltas so an untrained head cannot overflow exp
    wh = proposals[:, 2:] * np.exp(np.clip(d[:, 2:], -4.0, 4.0))
    return np.concatenate([c - wh / 2.0, wh], axis=1)
