"""Box geometry: IoU, grid proposals, NMS, crop-and-resize."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from ..tensor import ParameterError


@dataclass(frozen=True, order=True)
class BoundingBox:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ParameterError(f"box needs w, h >= 1: {self}")

    def inside(self, H: int, W: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x + self.w <= W and self.y + self.h <= H

    def as_list(self):
        return [self.x, self.y, self.w, self.h]


def iou(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``[n, 4]`` and ``[m, 4]`` arrays of ``(x, y, w, h)``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 0] + a[:, None, 2], b[None, :, 0] + b[None, :, 2])
    y2 = np.minimum(a[:, None, 1] + a[:, None, 3], b[None, :, 1] + b[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    return inter / union


def grid_count(H: int, W: int, scales, stride: int) -> int:
    return sum(((H - s) // stride + 1) * ((W - s) // stride + 1) for s in scales if s <= min(H, W))


def propose_boxes(H: int, W: int, scales=(12, 16, 20), stride: int = 4) -> np.ndarray:
    """Square sliding-window boxes ``[n, 4]`` at every scale, row-major per scale."""
    out = []
    for s in scales:
        if s > H or s > W:
            continue
        for y in range(0, H - s + 1, stride):
            for x in range(0, W - s + 1, stride):
                out.append((x, y, s, s))
    return np.array(out, dtype=np.int64).reshape(-1, 4)


def nms(boxes: np.ndarray, scores: np.ndarray, thresh: float = 0.3) -> np.ndarray:
    """Indices kept by greedy non-maximum suppression, highest score first.

    Equal scores keep their input order.
    """
    order = np.argsort(-np.asarray(scores), kind="stable")
    ious = iou_matrix(boxes, boxes)
    keep = []
    suppressed = np.zeros(len(order), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > thresh
    return np.array(keep, dtype=np.int64)


def crop_resize(image: np.ndarray, boxes: np.ndarray, size: int) -> np.ndarray:
    """Bilinear crops ``[n, C, size, size]`` of ``image`` ``[C, H, W]``."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    C = image.shape[0]
    t = (np.arange(size) + 0.5) / size
    out = np.empty((len(boxes), C, size, size))
    for n, (x, y, w, h) in enumerate(boxes):
        rows = y + t * h - 0.5
        cols = x + t * w - 0.5
        rr, cc = np.meshgrid(rows, cols, indexing="ij")
        for c in range(C):
            out[n, c] = map_coordinates(image[c], [rr, cc], order=1, mode="nearest")
    return out


def regression_targets(proposals: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Centre offsets scaled by proposal size and log size ratios."""
    p = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    g = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    pcx, pcy = p[:, 0] + p[:, 2] / 2, p[:, 1] + p[:, 3] / 2
    gcx, gcy = g[:, 0] + g[:, 2] / 2, g[:, 1] + g[:, 3] / 2
    return np.stack([(gcx - pcx) / p[:, 2], (gcy - pcy) / p[:, 3],
                     np.log(g[:, 2] / p[:, 2]), np.log(g[:, 3] / p[:, 3])], axis=1)


def apply_offsets(proposals: np.ndarray, t: np.ndarray, H: int, W: int) -> np.ndarray:
    """Inverse of :func:`regression_targets`, rounded to pixels and clipped to the image."""
    p = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    t = np.asarray(t, dtype=np.float64).reshape(-1, 4)
    cx = p[:, 0] + p[:, 2] / 2 + t[:, 0] * p[:, 2]
    cy = p[:, 1] + p[:, 3] / 2 + t[:, 1] * p[:, 3]
    w = p[:, 2] * np.exp(np.clip(t[:, 2], -1, 1))
    h = p[:, 3] * np.exp(np.clip(t[:, 3], -1, 1))
    x0 = np.clip(np.round(cx - w / 2), 0, W - 1)
    y0 = np.clip(np.round(cy - h / 2), 0, H - 1)
    x1 = np.clip(np.round(cx + w / 2), x0 + 1, W)
    y1 = np.clip(np.round(cy + h / 2), y0 + 1, H)
    return np.stack([x0, y0, x1 - x0, y1 - y0], axis=1).astype(np.int64)
