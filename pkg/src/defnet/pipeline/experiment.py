"""End-to-end toy detection experiments.

A :class:`Workspace` holds everything derived from one dataset and seed
(rejector, training crops, pretraining sets, theme classifier) and trains
detector variants on demand.  Detectors are fitted on ``train``; context
models on ``val1``; every reported "val mAP" is measured on ``val2``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

from ..net import Architecture, Network, TrainConfig, pretrain_then_finetune
from .boxes import iou_matrix
from .data import Dataset, DatasetSpec, generate_dataset
from .ensemble import EnsembleSelection, greedy_ensemble
from .evaluate import evaluate_map
from .stages import (
    BBoxRegressor,
    ContextSVM,
    Rejector,
    SceneClassifier,
    ScoredScene,
    candidate_boxes,
    context_refine,
    detector_samples,
    image_level_samples,
    label_proposals,
    make_detections,
    object_level_samples,
    regression_pairs,
    rejection_recall,
    scene_proposals,
    score_scene,
    select_ridge,
)

log = logging.getLogger(__name__)

SCHEMES = ("none", "image", "object")


@dataclass
class PipelineConfig:
    keep_fraction: float = 0.3
    nms: float = 0.3
    radius: int = 3
    stride: int = 2
    pretrain_classes: int = 8
    pretrain_scenes: int = 200
    pretrain_iterations: int = 300
    finetune_iterations: int = 600
    batch_size: int = 32
    lr: float = 0.01
    regression_lambda: float | None = None  # None: chosen by cross-validation on train


@dataclass(frozen=True)
class ModelSpec:
    pooling: str = "defpool"
    scheme: str = "object"

    @property
    def id(self) -> str:
        return f"{self.pooling}+{self.scheme}"

    @classmethod
    def parse(cls, text: str) -> "ModelSpec":
        pooling, scheme = text.split("+")
        if pooling not in ("defpool", "maxpool") or scheme not in SCHEMES:
            raise ValueError(f"bad model id {text!r}")
        return cls(pooling, scheme)


class Workspace:
    def __init__(self, ds: Dataset, cfg: PipelineConfig, seed: int):
        self.ds, self.cfg, self.seed = ds, cfg, seed
        self.K = ds.spec.classes
        self._models = {}
        self._cands = {}

    # Every derived artefact has its own seeded stream, so building them in a
    # different order (or not at all) never changes the others.

    @cached_property
    def rejector(self) -> Rejector:
        return Rejector().fit(self.ds.train, np.random.default_rng([self.seed, 1]))

    @cached_property
    def finetune_set(self):
        return detector_samples(self.ds.train, self.K, np.random.default_rng([self.seed, 2]))

    @cached_property
    def auxiliary(self) -> Dataset:
        """Disjoint scenes with more classes, used only for pretraining."""
        return generate_dataset(replace(self.ds.spec, classes=self.cfg.pretrain_classes,
                                        train_scenes=self.cfg.pretrain_scenes, val_scenes=1,
                                        seed=self.ds.spec.seed + 7919))

    def pretrain_set(self, scheme: str):
        if scheme == "none":
            return None
        if scheme == "object":
            return object_level_samples(self.auxiliary.train, self.cfg.pretrain_classes)
        if scheme == "image":
            return image_level_samples(self.auxiliary.train, self.cfg.pretrain_classes)
        raise ValueError(f"unknown pretraining scheme {scheme!r}")

    @cached_property
    def scene_classifier(self) -> SceneClassifier:
        return SceneClassifier(self.K).fit(self.ds.train)

    # -- models ---------------------------------------------------------------

    def architecture(self, pooling: str) -> Architecture:
        return Architecture(pooling=pooling, radius=self.cfg.radius, stride=self.cfg.stride,
                            classes=self.K)

    def train_config(self, iterations: int, salt: int) -> TrainConfig:
        return TrainConfig(lr=self.cfg.lr, batch_size=self.cfg.batch_size,
                           iterations=iterations, seed=self.seed * 1000 + salt)

    def model(self, spec: ModelSpec) -> Network:
        """The trained detector for ``spec`` (trained on first request)."""
        if spec not in self._models:
            log.info("training %s (seed %d)", spec.id, self.seed)
            self._models[spec] = pretrain_then_finetune(
                self.architecture(spec.pooling),
                self.pretrain_set(spec.scheme),
                self.finetune_set,
                self.train_config(self.cfg.pretrain_iterations, 1),
                self.train_config(self.cfg.finetune_iterations, 2),
                seed=self.seed,
            )
        return self._models[spec]

    def adopt(self, spec: ModelSpec, net: Network) -> None:
        """Use an already trained network (e.g. loaded from disk) for ``spec``."""
        self._models[spec] = net

    # -- scoring -----------------------------------------------------------------

    def candidates(self, split: str, rejection: bool):
        key = (split, rejection)
        if key not in self._cands:
            rej = self.rejector if rejection else None
            self._cands[key] = candidate_boxes(self.scenes(split), rej, self.cfg.keep_fraction)
        return self._cands[key]

    def scenes(self, split: str):
        return {"train": self.ds.train, "val": self.ds.val, "val1": self.ds.val1,
                "val2": self.ds.val2}[split]

    def score(self, net: Network, split: str, rejection=True, features=False):
        return [score_scene(net, sc, b, with_features=features)
                for sc, b in zip(self.scenes(split), self.candidates(split, rejection))]

    def mean_ap(self, scored, split: str, refined=None, boxes=None) -> float:
        scenes = self.scenes(split)
        dets = make_detections(scored, scenes, self.cfg.nms, refined, boxes)
        return evaluate_map([d.as_tuple() for d in dets], [sc.objects for sc in scenes], self.K)[1]

    # -- context -------------------------------------------------------------------

    def fit_context(self, net: Network, rejection=True) -> ContextSVM:
        det, ctx, labels = [], [], []
        for sc, ss in zip(self.ds.val1, self.score(net, "val1", rejection)):
            lab, _, _ = label_proposals(ss.boxes, sc, pos=0.5, neg=0.5)
            det.append(ss.scores)
            ctx.append(np.tile(self.scene_classifier.scores(sc), (len(ss.boxes), 1)))
            labels.append(lab)
        return ContextSVM.fit(np.concatenate(det), np.concatenate(ctx), np.concatenate(labels),
                              self.K)

    def refine(self, svm: ContextSVM, scored, split: str):
        return [context_refine(ss.scores, self.scene_classifier.scores(sc), svm)
                for sc, ss in zip(self.scenes(split), scored)]

    # -- regression -------------------------------------------------------------------

    def fit_regressor(self, net: Network) -> BBoxRegressor:
        scored = []
        for sc in self.ds.train:
            boxes = scene_proposals(sc)
            if not sc.objects:
                continue
            close = iou_matrix(boxes, sc.gt_boxes).max(axis=1) >= 0.6
            scored.append(score_scene(net, sc, boxes[close], with_features=True))
        F, T, G = regression_pairs(scored, [sc for sc in self.ds.train if sc.objects],
                                   with_groups=True)
        lam = self.cfg.regression_lambda or select_ridge(F, T, G)
        return BBoxRegressor(lam=lam).fit(F, T)

    def regress(self, reg: BBoxRegressor, scored, split: str):
        out = []
        for sc, ss in zip(self.scenes(split), scored):
            _, H, W = sc.image.shape
            out.append(reg.apply(ss.boxes, ss.features, H, W) if len(ss.boxes) else ss.boxes)
        return out

    # -- experiments ---------------------------------------------------------------------

    def rejection_recall(self, split="val") -> float:
        return rejection_recall(self.scenes(split), self.rejector, self.cfg.keep_fraction)

    def evaluate(self, spec: ModelSpec, split="val2", rejection=True, context=False,
                 bbox=False) -> float:
        return self.evaluate_net(self.model(spec), split, rejection, context, bbox)

    def detect(self, net: Network, split="val2", rejection=True, context=False, bbox=False):
        """Final detections on ``split``: scoring, optional context, optional regression."""
        scored = self.score(net, split, rejection, features=bbox)
        refined = self.refine(self.fit_context(net, rejection), scored, split) if context else None
        boxes = self.regress(self.fit_regressor(net), scored, split) if bbox else None
        return make_detections(scored, self.scenes(split), self.cfg.nms, refined, boxes)

    def evaluate_net(self, net: Network, split="val2", rejection=True, context=False,
                     bbox=False) -> float:
        dets = self.detect(net, split, rejection, context, bbox)
        truth = [sc.objects for sc in self.scenes(split)]
        return evaluate_map([d.as_tuple() for d in dets], truth, self.K)[1]

    def ablation(self) -> list:
        """mAP on val2 as components are switched on one at a time."""
        steps = [
            ("baseline max-pool net", ModelSpec("maxpool", "image"), False, False, False),
            ("+rejection", ModelSpec("maxpool", "image"), True, False, False),
            ("+object-level pretrain", ModelSpec("maxpool", "object"), True, False, False),
            ("+defpool", ModelSpec("defpool", "object"), True, False, False),
            ("+context", ModelSpec("defpool", "object"), True, True, False),
            ("+bbox regression", ModelSpec("defpool", "object"), True, True, True),
        ]
        return [{"step": name, "model": spec.id,
                 "map": self.evaluate(spec, "val2", rej, ctx, bb)}
                for name, spec, rej, ctx, bb in steps]

    def ensemble_nets(self, nets: dict) -> EnsembleSelection:
        """Greedy averaging over ``nets`` (id -> network), selected and scored on val2."""
        outputs = {key: self.score(net, "val2") for key, net in nets.items()}
        return greedy_ensemble(outputs, self.ds.val2, self.K, self.cfg.nms)

    def ensemble(self, specs) -> EnsembleSelection:
        return self.ensemble_nets({s.id: self.model(s) for s in specs})


def workspace(spec: DatasetSpec, cfg: PipelineConfig | None = None, seed: int | None = None):
    ds = generate_dataset(spec)
    return Workspace(ds, cfg or PipelineConfig(), spec.seed if seed is None else seed)
