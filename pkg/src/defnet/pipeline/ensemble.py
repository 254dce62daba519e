"""Greedy forward selection of models whose averaged scores maximise val mAP."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .evaluate import evaluate_map
from .stages import ScoredScene, make_detections

log = logging.getLogger(__name__)


@dataclass
class EnsembleSelection:
    selected: list  # model ids, in order of addition
    single_map: dict = field(default_factory=dict)  # model id -> val mAP
    ensemble_map: float = 0.0

    def __post_init__(self):
        if not self.selected:
            raise ValueError("an ensemble needs at least one model")

    def to_json(self) -> dict:
        return {"selected": list(self.selected), "single_map": dict(self.single_map),
                "ensemble_map": self.ensemble_map}


def average_scores(outputs: dict, ids) -> list:
    """Unweighted per-box mean of each model's class scores, scene by scene."""
    first = outputs[ids[0]]
    return [ScoredScene(first[s].boxes, np.mean([outputs[m][s].scores for m in ids], axis=0))
            for s in range(len(first))]


def ensemble_map(outputs: dict, ids, scenes, classes, nms_thresh=0.3) -> float:
    dets = make_detections(average_scores(outputs, ids), scenes, nms_thresh)
    return evaluate_map([d.as_tuple() for d in dets], [sc.objects for sc in scenes], classes)[1]


def greedy_ensemble(outputs: dict, scenes, classes: int, nms_thresh=0.3) -> EnsembleSelection:
    """Forward selection over ``outputs`` (model id -> per-scene :class:`ScoredScene`).

    All models must have scored the same boxes.  Starts from the best single
    model and keeps adding the unused model that raises averaged-score mAP
    the most; stops as soon as no addition strictly improves it.
    """
    ids = list(outputs)
    for m in ids[1:]:
        for a, b in zip(outputs[ids[0]], outputs[m]):
            if not np.array_equal(a.boxes, b.boxes):
                raise ValueError(f"model {m!r} scored different boxes")
    single = {m: ensemble_map(outputs, [m], scenes, classes, nms_thresh) for m in ids}
    best = max(ids, key=lambda m: (single[m], -ids.index(m)))
    selected, current = [best], single[best]
    while True:
        trials = {m: ensemble_map(outputs, selected + [m], scenes, classes, nms_thresh)
                  for m in ids if m not in selected}
        if not trials:
            break
        m = max(trials, key=lambda k: (trials[k], -ids.index(k)))
        if trials[m] <= current:
            break
        selected.append(m)
        current = trials[m]
        log.info("ensemble += %s -> mAP %.4f", m, current)
    sel = EnsembleSelection(selected, single, current)
    assert sel.ensemble_map >= max(single.values())
    return sel
