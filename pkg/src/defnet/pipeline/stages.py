"""Detection stages: proposal labelling, rejection, per-box scoring, context
re-scoring and bounding-box regression."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..tensor import DimensionError, ParameterError
from .boxes import (
    BoundingBox,
    apply_offsets,
    crop_resize,
    iou_matrix,
    nms,
    propose_boxes,
    regression_targets,
)
from .svm import LinearSVM

CROP = 28
BACKGROUND = -1
IGNORE = -2


@dataclass
class Detection:
    scene: int
    box: BoundingBox
    scores: np.ndarray
    refined_scores: np.ndarray | None = None
    class_id: int = -1
    score: float = math.nan
    offsets: np.ndarray | None = None

    def as_tuple(self):
        return (self.scene, self.class_id, self.box.as_list(), self.score)

    def to_json(self) -> dict:
        return {
            "scene": self.scene,
            "box": self.box.as_list(),
            "class": self.class_id,
            "score": float(self.scores[self.class_id]),
            "refined_score": None if self.refined_scores is None
            else float(self.refined_scores[self.class_id]),
        }


def scene_proposals(scene, scales=(12, 16, 20), stride=4) -> np.ndarray:
    _, H, W = scene.image.shape
    return propose_boxes(H, W, scales, stride)


def label_proposals(boxes, scene, pos=0.5, neg=0.3):
    """Class id for proposals overlapping an object by ``>= pos``, BACKGROUND
    below ``neg``, IGNORE in between.  Also returns the best IoU and the
    index of the matched object."""
    gt = scene.gt_boxes
    n = len(boxes)
    if len(gt) == 0:
        return np.full(n, BACKGROUND), np.zeros(n), np.full(n, -1)
    ious = iou_matrix(boxes, gt)
    j = ious.argmax(axis=1)
    best = ious[np.arange(n), j]
    labels = np.where(best >= pos, scene.gt_classes[j], np.where(best < neg, BACKGROUND, IGNORE))
    return labels, best, j


def one_vs_rest(labels, K) -> np.ndarray:
    y = -np.ones((len(labels), K))
    hit = labels >= 0
    y[np.nonzero(hit)[0], labels[hit]] = 1.0
    return y


# -- rejection -------------------------------------------------------------

class Rejector:
    """Cheap linear objectness scorer on low-resolution crops."""

    size = 8

    def __init__(self, lam=1e-3, epochs=200):
        self.svm = LinearSVM(lam=lam, epochs=epochs)

    def _features(self, scene, boxes):
        crops = crop_resize(scene.image, boxes, self.size).reshape(len(boxes), -1)
        return np.concatenate([crops, np.abs(crops)], axis=1)

    def fit(self, scenes, rng, neg_per_scene=20):
        X, Y = [], []
        for sc in scenes:
            boxes = scene_proposals(sc)
            labels, _, _ = label_proposals(boxes, sc)
            pos = np.nonzero(labels >= 0)[0]
            neg = np.nonzero(labels == BACKGROUND)[0]
            neg = rng.choice(neg, size=min(len(neg), neg_per_scene), replace=False)
            idx = np.sort(np.concatenate([pos, neg]))
            if len(idx) == 0:
                continue
            X.append(self._features(sc, boxes[idx]))
            Y.append(np.where(labels[idx] >= 0, 1.0, -1.0))
        self.svm.fit(np.concatenate(X), np.concatenate(Y), balanced=True)
        return self

    def score(self, scene, boxes) -> np.ndarray:
        return self.svm.decision(self._features(scene, boxes))[:, 0]


def reject_boxes(objectness, keep_fraction: float) -> np.ndarray:
    """Indices (ascending) of the ``ceil(keep_fraction * n)`` highest-scoring boxes.

    Equal scores keep their original order, so ``keep_fraction=1`` is the identity.
    """
    if not 0 < keep_fraction <= 1:
        raise ParameterError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    objectness = np.asarray(objectness)
    n_keep = math.ceil(keep_fraction * len(objectness))
    order = np.argsort(-objectness, kind="stable")
    return np.sort(order[:n_keep])


def rejection_recall(scenes, rejector: Rejector, keep_fraction: float, thresh=0.5) -> float:
    """Fraction of objects still covered at IoU >= thresh after rejection."""
    hit = total = 0
    for sc in scenes:
        boxes = scene_proposals(sc)
        kept = boxes[reject_boxes(rejector.score(sc, boxes), keep_fraction)]
        if len(sc.objects) == 0:
            continue
        ious = iou_matrix(sc.gt_boxes, kept)
        hit += int((ious.max(axis=1) >= thresh).sum())
        total += len(sc.objects)
    return hit / total if total else 1.0


# -- training samples --------------------------------------------------------

def detector_samples(scenes, K, rng, neg_ratio=1.0):
    """Crops and +/-1 labels for fine-tuning: ground-truth boxes, proposals with
    IoU >= 0.5 (positives), and a seeded subsample of background proposals."""
    X, Y = [], []
    for sc in scenes:
        boxes = scene_proposals(sc)
        labels, _, _ = label_proposals(boxes, sc)
        pos = np.nonzero(labels >= 0)[0]
        neg = np.nonzero(labels == BACKGROUND)[0]
        n_neg = min(len(neg), max(2, int(round(neg_ratio * (len(pos) + len(sc.objects))))))
        neg = np.sort(rng.choice(neg, size=n_neg, replace=False))
        sel = np.concatenate([pos, neg])
        all_boxes = np.concatenate([sc.gt_boxes, boxes[sel]])
        all_labels = np.concatenate([sc.gt_classes, labels[sel]])
        X.append(crop_resize(sc.image, all_boxes, CROP))
        Y.append(one_vs_rest(all_labels, K))
    return np.concatenate(X), np.concatenate(Y)


def object_level_samples(scenes, K):
    """Tight object crops with their class labels."""
    X = [crop_resize(sc.image, sc.gt_boxes, CROP) for sc in scenes if sc.objects]
    Y = [one_vs_rest(sc.gt_classes, K) for sc in scenes if sc.objects]
    return np.concatenate(X), np.concatenate(Y)


def image_level_samples(scenes, K):
    """Whole scenes shrunk to the network input, labelled with every class present."""
    X, Y = [], []
    for sc in scenes:
        _, H, W = sc.image.shape
        X.append(crop_resize(sc.image, [[0, 0, W, H]], CROP))
        y = -np.ones((1, K))
        y[0, sc.gt_classes] = 1.0
        Y.append(y)
    return np.concatenate(X), np.concatenate(Y)


# -- scoring -------------------------------------------------------------------

@dataclass
class ScoredScene:
    boxes: np.ndarray  # [P, 4]
    scores: np.ndarray  # [P, K]
    features: np.ndarray | None = None  # [P, F] trunk features


def score_scene(net, scene, boxes, with_features=False, batch=256) -> ScoredScene:
    scores, feats = [], []
    for i in range(0, len(boxes), batch):
        crops = crop_resize(scene.image, boxes[i:i + batch], CROP)
        scores.append(net.forward(crops))
        if with_features:
            feats.append(net.trunk_out.reshape(len(crops), -1).copy())
    K = net.arch.classes
    return ScoredScene(
        boxes,
        np.concatenate(scores) if scores else np.zeros((0, K)),
        (np.concatenate(feats) if feats else None) if with_features else None,
    )


def candidate_boxes(scenes, rejector: Rejector | None, keep_fraction: float):
    """Per-scene proposals surviving rejection (all proposals without a rejector)."""
    out = []
    for sc in scenes:
        boxes = scene_proposals(sc)
        if rejector is not None:
            boxes = boxes[reject_boxes(rejector.score(sc, boxes), keep_fraction)]
        out.append(boxes)
    return out


def make_detections(scored, scenes, nms_thresh=0.3, refined=None, boxes_override=None):
    """Per-class NMS over each scene's scored boxes.

    ``refined`` (per-scene ``[P, K]``) replaces the raw scores for ranking;
    ``boxes_override`` (per-scene ``[P, 4]``) substitutes regressed boxes.
    """
    dets = []
    for s, ss in enumerate(scored):
        final = ss.scores if refined is None else refined[s]
        boxes = ss.boxes if boxes_override is None else boxes_override[s]
        if len(boxes) == 0:
            continue
        for k in range(final.shape[1]):
            for i in nms(boxes, final[:, k], nms_thresh):
                dets.append(Detection(
                    scene=s, box=BoundingBox(*(int(v) for v in boxes[i])), scores=ss.scores[i],
                    refined_scores=None if refined is None else refined[s][i],
                    class_id=k, score=float(final[i, k]),
                ))
    return dets


# -- context -------------------------------------------------------------------

class SceneClassifier:
    """Whole-image theme scores (the toy counterpart of image classification)."""

    def __init__(self, themes: int, lam=1e-3, epochs=300):
        self.themes = themes
        self.svm = LinearSVM(lam=lam, epochs=epochs)

    def fit(self, scenes):
        X = np.stack([sc.image.ravel() for sc in scenes])
        Y = -np.ones((len(scenes), self.themes))
        Y[np.arange(len(scenes)), [sc.theme for sc in scenes]] = 1.0
        self.svm.fit(X, Y)
        return self

    def scores(self, scene) -> np.ndarray:
        return self.svm.decision(scene.image.ravel()[None])[0]


@dataclass
class ContextSVM:
    """Per-class linear re-scorer over ``concat(scene_scores, det_scores)``."""

    weight: np.ndarray  # [K, M + K]
    bias: np.ndarray  # [K]

    @classmethod
    def identity(cls, K, M):
        w = np.zeros((K, M + K))
        w[:, M:] = np.eye(K)
        return cls(w, np.zeros(K))

    @classmethod
    def fit(cls, det_scores, scene_scores, labels, K, lam=1e-3, epochs=500):
        """``det_scores [n, K]``, ``scene_scores [n, M]``, ``labels`` class id or < 0.

        Class ``k`` is fitted on the scene scores and its own detection score
        only; the other detection weights stay zero.  With a few dozen
        scenes to learn from, the full cross-class block overfits.
        """
        det_scores = np.asarray(det_scores, dtype=np.float64)
        scene_scores = np.asarray(scene_scores, dtype=np.float64)
        M = scene_scores.shape[1]
        Y = one_vs_rest(np.asarray(labels), K)
        W, b = np.zeros((K, M + K)), np.zeros(K)
        for k in range(K):
            X = np.concatenate([scene_scores, det_scores[:, k:k + 1]], axis=1)
            svm = LinearSVM(lam=lam, epochs=epochs).fit(X, Y[:, k], balanced=True)
            w, bk = svm.raw_weights()
            W[k, :M], W[k, M + k], b[k] = w[0, :M], w[0, M], bk[0]
        return cls(W, b)


def context_refine(det_scores, scene_scores, svm: ContextSVM) -> np.ndarray:
    """``refined_k = w_k . concat(scene_scores, det_scores) + b_k``; works row-wise on batches."""
    det_scores = np.asarray(det_scores, dtype=np.float64)
    scene_scores = np.asarray(scene_scores, dtype=np.float64)
    if scene_scores.ndim < det_scores.ndim:
        scene_scores = np.broadcast_to(scene_scores, det_scores.shape[:-1] + scene_scores.shape[-1:])
    f = np.concatenate([scene_scores, det_scores], axis=-1)
    if f.shape[-1] != svm.weight.shape[1] or det_scores.shape[-1] != svm.weight.shape[0]:
        raise DimensionError(f"context features {f.shape[-1]} do not match SVM {svm.weight.shape}")
    return f @ svm.weight.T + svm.bias


# -- bounding-box regression -------------------------------------------------------

@dataclass
class BBoxRegressor:
    """Ridge regression from features to ``(dx, dy, dlog w, dlog h)``."""

    lam: float = 10.0
    floor: float = 1e-6
    weight: np.ndarray | None = None
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None

    def fit(self, features, targets) -> "BBoxRegressor":
        X = np.asarray(features, dtype=np.float64)
        T = np.asarray(targets, dtype=np.float64)
        self.mean = X.mean(axis=0)
        self.scale = X.std(axis=0) + 1e-8
        Z = np.concatenate([(X - self.mean) / self.scale, np.ones((len(X), 1))], axis=1)
        reg = max(self.lam, self.floor) * np.eye(Z.shape[1])
        reg[-1, -1] = self.floor
        self.weight = np.linalg.solve(Z.T @ Z + reg, Z.T @ T)
        return self

    def predict(self, features) -> np.ndarray:
        Z = (np.asarray(features, dtype=np.float64) - self.mean) / self.scale
        return np.concatenate([Z, np.ones((len(Z), 1))], axis=1) @ self.weight

    def apply(self, boxes, features, H, W) -> np.ndarray:
        return apply_offsets(boxes, self.predict(features), H, W)


def regression_pairs(scored, scenes, min_iou=0.6, with_groups=False):
    """Features and targets from proposals overlapping an object by ``>= min_iou``.

    ``with_groups`` also returns the scene index of every pair, for
    cross-validation that keeps near-duplicate boxes in one fold.
    """
    F, T, G = [], [], []
    for s, (ss, sc) in enumerate(zip(scored, scenes)):
        if not sc.objects or len(ss.boxes) == 0:
            continue
        ious = iou_matrix(ss.boxes, sc.gt_boxes)
        j = ious.argmax(axis=1)
        sel = ious[np.arange(len(j)), j] >= min_iou
        if sel.any():
            F.append(ss.features[sel])
            T.append(regression_targets(ss.boxes[sel], sc.gt_boxes[j[sel]]))
            G.append(np.full(int(sel.sum()), s))
    if not F:
        raise ParameterError("no proposals overlap ground truth enough to train regression")
    out = np.concatenate(F), np.concatenate(T)
    return (*out, np.concatenate(G)) if with_groups else out


def select_ridge(features, targets, groups, lams=(10.0, 100.0, 1000.0, 10000.0), folds=3):
    """Ridge strength with the lowest held-out squared error over group folds."""
    fold = np.asarray(groups) % folds
    errs = []
    for lam in lams:
        err = 0.0
        for f in range(folds):
            tr, te = fold != f, fold == f
            if not tr.any() or not te.any():
                continue
            pred = BBoxRegressor(lam=lam).fit(features[tr], targets[tr]).predict(features[te])
            err += float(np.sum((pred - targets[te]) ** 2))
        errs.append(err)
    return lams[int(np.argmin(errs))]
