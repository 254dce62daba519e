"""PASCAL-style average precision with greedy one-to-one matching."""

from __future__ import annotations

import logging

import numpy as np

from .boxes import iou_matrix

log = logging.getLogger(__name__)


def _xywh(box):
    return box.as_list() if hasattr(box, "as_list") else list(box)


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """All-points interpolated AP from TP flags sorted by descending score."""
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    if len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def evaluate_map(detections, ground_truth, classes: int, iou_thresh: float = 0.5):
    """Per-class AP and their mean.

    ``detections``: iterable of ``(scene, class_id, box, score)``;
    ``ground_truth``: per-scene list of ``(class_id, box)`` with boxes as
    ``(x, y, w, h)``.  Detections are ranked by score (stable in input
    order); a detection is a hit when its best-overlapping ground truth of
    the same class reaches ``iou_thresh`` and is not already taken.  Classes without ground
    truth are left out of the mean.
    """
    dets = list(detections)
    ap = {}
    for k in range(classes):
        gts = {s: np.array([_xywh(b) for c, b in objs if c == k], dtype=float).reshape(-1, 4)
               for s, objs in enumerate(ground_truth)}
        n_gt = sum(len(v) for v in gts.values())
        if n_gt == 0:
            log.info("class %d has no ground truth; skipped", k)
            continue
        mine = [d for d in dets if d[1] == k]
        order = np.argsort([-d[3] for d in mine], kind="stable")
        used = {s: np.zeros(len(v), dtype=bool) for s, v in gts.items()}
        tp = np.zeros(len(mine))
        for rank, i in enumerate(order):
            s, _, box, _ = mine[i]
            g = gts.get(s)
            if g is None or len(g) == 0:
                continue
            ious = iou_matrix(np.array(_xywh(box), dtype=float), g)[0]
            j = int(np.argmax(ious))
            if ious[j] >= iou_thresh and not used[s][j]:
                used[s][j] = True
                tp[rank] = 1.0
        ap[k] = average_precision(tp, n_gt)
    mean = float(np.mean(list(ap.values()))) if ap else 0.0
    return ap, mean
