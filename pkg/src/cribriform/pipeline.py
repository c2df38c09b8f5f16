"""End-to-end glue: prepare biopsies, train a fold's ensemble, infer and evaluate."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import DESK_GEOMETRY, WORKING_RESOLUTION, AnnotationSet, BiopsyImage, Geometry, Label, PixelScale
from .evaluation import CRIBRIFORM, annotated_region_masks, annotation_froc, biopsy_roc, filter_regions
from .folds import FoldAssignment, fold_roles
from .infer import BiopsyPrediction, ensemble, infer_biopsy
from .network import DESK_NETWORK, Network, NetworkConfig, load_weights
from .optim import TrainResult, TrainRunConfig, TrainingSample, make_samples, train
from .preprocess import (
    extract_window,
    od_background_mask,
    rasterize_annotations,
    rescale_annotations,
    resample_to_working_resolution,
    tile_biopsy,
)

log = logging.getLogger(__name__)


@dataclass
class PreparedBiopsy:
    image: BiopsyImage
    annotations: AnnotationSet
    background: np.ndarray
    label_map: np.ndarray

    @property
    def id(self) -> str:
        return self.image.id

    @property
    def is_positive(self) -> bool:
        return bool(self.annotations.of_label(Label.G4_CRIBRIFORM))


def prepare_biopsy(image: BiopsyImage, ann: AnnotationSet, target: float = WORKING_RESOLUTION) -> PreparedBiopsy:
    source = image.resolution
    image = resample_to_working_resolution(image, target)
    ann = rescale_annotations(ann, ann.declared_resolution or source, target)
    bg = od_background_mask(image)
    label_map = rasterize_annotations(ann, image.shape, bg)
    return PreparedBiopsy(image, ann, bg, label_map)


def training_samples(biopsies: Sequence[PreparedBiopsy], geometry: Geometry) -> list[TrainingSample]:
    samples = []
    for b in biopsies:
        patches = tile_biopsy(b.image, b.background, geometry)
        maps = [extract_window(b.label_map, p.origin, geometry.patch_size, int(Label.NON_LABELLED))
                for p in patches]
        samples.extend(make_samples(patches, maps, geometry))
    return samples


def _train_one(args):
    net_cfg, run, train_s, val_s, geometry = args
    net = Network(net_cfg, seed=run.seed)
    return train(net, run, train_s, val_s, geometry)


def train_ensemble(train_s: Sequence[TrainingSample], val_s: Sequence[TrainingSample], geometry: Geometry,
                   net_cfg: NetworkConfig = DESK_NETWORK, run: TrainRunConfig = TrainRunConfig(),
                   repeats: int = 4, workers: int | None = None) -> list[TrainResult]:
    """Train ``repeats`` networks with different shuffles; each yields one selection per alpha."""
    from dataclasses import replace

    runs = [replace(run, seed=run.seed + k) for k in range(repeats)]
    jobs = [(net_cfg, r, list(train_s), list(val_s), geometry) for r in runs]
    workers = workers or os.cpu_count() or 1
    if workers > 1 and repeats > 1:
        with ProcessPoolExecutor(min(workers, repeats)) as pool:
            return list(pool.map(_train_one, jobs))
    return [_train_one(j) for j in jobs]


def ensemble_members(results: Sequence[TrainResult]) -> list[tuple[str, bytes]]:
    """Selected weights, one per (run, alpha), in a stable order."""
    members = []
    for k, res in enumerate(results):
        for alpha, idx in sorted(res.selected.items()):
            members.append((f"run{k}_alpha{alpha}_snap{idx}", res.snapshots[idx].weights))
    return members


def predict_biopsies(members: Sequence[tuple[str, bytes]], biopsies: Sequence[PreparedBiopsy],
                     geometry: Geometry | None = None, workers: int = 1) -> list[BiopsyPrediction]:
    nets = [(mid, load_weights(w)) for mid, w in members]
    out = []
    for b in biopsies:
        preds = [infer_biopsy(net, b.image, geometry, workers, model_id=mid) for mid, net in nets]
        out.append(ensemble(preds))
    return out


def evaluate_predictions(predictions: Sequence[BiopsyPrediction], biopsies: Sequence[PreparedBiopsy],
                         cutoffs=None, min_area_mm2: float | None = None, connectivity: int = 4,
                         fp_over: str = "all") -> dict:
    refs = [b.is_positive for b in biopsies]
    report: dict = {"biopsies": [b.id for b in biopsies], "references": refs,
                    "min_area_mm2": min_area_mm2, "connectivity": connectivity}
    if any(refs) and not all(refs):
        roc = biopsy_roc(predictions, refs, cutoffs, min_area_mm2, connectivity)
        report["auc"] = roc.auc
        report["roc"] = [{"cutoff": p.cutoff, "sensitivity": p.sensitivity, "fpr": p.fpr} for p in roc.points]
    else:
        report["auc"] = None
        report["roc"] = []
    factor = predictions[0].scale.downsample_factor if predictions else 1
    masks = [annotated_region_masks(b.annotations, b.label_map, factor) for b in biopsies]
    if sum(len(m) for m in masks):
        froc = annotation_froc(predictions, masks, cutoffs, min_area_mm2, connectivity, fp_over=fp_over)
        report["froc"] = [{"cutoff": p.cutoff, "sensitivity": p.sensitivity,
                           "mean_fp_per_biopsy": p.mean_fp_per_biopsy} for p in froc]
    else:
        report["froc"] = []
    return report


def fold_biopsies(biopsies: Sequence[PreparedBiopsy], assignment: FoldAssignment, test_fold: int):
    train_f, val_f, test_f = fold_roles(assignment, test_fold)
    by_fold = {k: [b for b in biopsies if assignment.assignments[b.id] == k] for k in range(assignment.n_folds)}
    train_b = [b for f in train_f for b in by_fold[f]]
    return train_b, by_fold[val_f], by_fold[test_f]
