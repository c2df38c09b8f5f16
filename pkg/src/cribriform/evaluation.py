"""Region extraction, biopsy-wise ROC, annotation-wise FROC, Cohen's kappa and overlays.

Curves are evaluated exactly: the default cutoff sweep is every distinct
predicted cribriform probability plus 0 and 1, and a cell counts as
predicted at cutoff ``c`` when its probability is strictly greater than
``c``. Per biopsy, the thresholded cell set only changes at that biopsy's
own probability values, so region labelling is done once per such value
and looked up for every global cutoff.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .core import CribriformError, Label, PixelScale, Region, ShapeMismatch
from .infer import BiopsyPrediction

MIN_REGION_AREA_MM2 = 0.0150
INTEROBSERVER_CUTOFFS = (0.0125, 0.1, 0.5)
CRIBRIFORM = int(Label.G4_CRIBRIFORM)


class UndefinedMetric(CribriformError, ValueError):
    pass


@dataclass(frozen=True)
class CurvePoint:
    cutoff: float
    sensitivity: float
    fpr: float | None = None
    mean_fp_per_biopsy: float | None = None


@dataclass
class RocResult:
    points: list[CurvePoint]
    auc: float


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 4:
        return ndimage.generate_binary_structure(2, 1)
    if connectivity == 8:
        return ndimage.generate_binary_structure(2, 2)
    raise ValueError("connectivity must be 4 or 8")


def _channel(pred, label: int = CRIBRIFORM) -> np.ndarray:
    if isinstance(pred, BiopsyPrediction):
        return pred.prob_map[..., label]
    arr = np.asarray(pred)
    return arr[..., label] if arr.ndim == 3 else arr


def _scale(pred, scale: PixelScale | None) -> PixelScale:
    if scale is not None:
        return scale
    if isinstance(pred, BiopsyPrediction):
        return pred.scale
    return PixelScale()


def label_components(mask: np.ndarray, connectivity: int = 4) -> tuple[np.ndarray, int]:
    return ndimage.label(mask, structure=_structure(connectivity))


def extract_regions(pred, label: int = CRIBRIFORM, cutoff: float = 0.5, connectivity: int = 4,
                    scale: PixelScale | None = None) -> list[Region]:
    """Connected components of cells whose class probability exceeds ``cutoff``."""
    if not 0.0 <= cutoff <= 1.0:
        raise ValueError("cutoff must lie in [0, 1]")
    prob = _channel(pred, label)
    scale = _scale(pred, scale)
    labels, n = label_components(prob > cutoff, connectivity)
    regions = []
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        sub = labels[sl] == k
        rr, cc = np.nonzero(sub)
        rr, cc = rr + sl[0].start, cc + sl[1].start
        regions.append(Region.from_coords(zip(rr.tolist(), cc.tolist()), scale, float(prob[rr, cc].max())))
    return regions


def filter_regions(regions: Sequence[Region], min_area_mm2: float = MIN_REGION_AREA_MM2) -> list[Region]:
    return [r for r in regions if r.area_mm2 > min_area_mm2]


def default_cutoffs(maps: Sequence[np.ndarray]) -> np.ndarray:
    values = [np.unique(m) for m in maps]
    return np.unique(np.concatenate(values + [np.array([0.0, 1.0])]))


class _Component:
    __slots__ = ("size", "cells")

    def __init__(self, size, cells):
        self.size, self.cells = size, cells


class _BiopsySweep:
    """Thresholded components of one probability map at each of its distinct values."""

    def __init__(self, prob: np.ndarray, connectivity: int, min_cells: int | None,
                 annotations: Sequence[np.ndarray] = ()):
        self.prob = np.asarray(prob, dtype=np.float64)
        self.values = np.unique(self.prob)
        self.connectivity = connectivity
        self.min_cells = min_cells
        self.annotations = [np.asarray(a, dtype=bool) for a in annotations]
        for a in self.annotations:
            if a.shape != self.prob.shape:
                raise ShapeMismatch("annotation mask does not match prediction map")
        self.annotated = (np.any(self.annotations, axis=0) if self.annotations
                          else np.zeros(self.prob.shape, dtype=bool))
        self._states: dict[int, tuple[bool, int, int]] = {}

    def state_index(self, cutoff: float) -> int:
        return int(np.searchsorted(self.values, cutoff, side="right"))

    def state(self, k: int) -> tuple[bool, int, int]:
        """``(any region kept, annotations detected, false-positive regions)``."""
        if k in self._states:
            return self._states[k]
        mask = self.prob > self.values[k - 1] if k > 0 else np.ones(self.prob.shape, dtype=bool)
        labels, n = label_components(mask, self.connectivity)
        if n == 0:
            result = (False, 0, 0)
        else:
            sizes = np.bincount(labels.ravel(), minlength=n + 1)
            keep = np.ones(n + 1, dtype=bool)
            keep[0] = False
            if self.min_cells is not None:
                keep &= sizes > self.min_cells
            kept_mask = keep[labels]
            detected = sum(bool((kept_mask & a).any()) for a in self.annotations)
            hits = np.zeros(n + 1, dtype=bool)
            hits[np.unique(labels[self.annotated])] = True
            fp = int((keep & ~hits).sum())
            result = (bool(keep.any()), detected, fp)
        self._states[k] = result
        return result

    def at(self, cutoff: float):
        return self.state(self.state_index(cutoff))


def _min_cells(min_area_mm2: float | None, scale: PixelScale) -> int | None:
    """Largest cell count whose area does not exceed the threshold (regions must be strictly larger)."""
    if min_area_mm2 is None:
        return None
    n = math.floor(min_area_mm2 / scale.output_px_area_mm2)
    # guard against floor landing one off through rounding
    while (n + 1) * scale.output_px_area_mm2 <= min_area_mm2:
        n += 1
    while n >= 0 and n * scale.output_px_area_mm2 > min_area_mm2:
        n -= 1
    return n


def auc_trapezoid(fpr: Sequence[float], tpr: Sequence[float]) -> float:
    pts = sorted(set(zip(fpr, tpr)) | {(0.0, 0.0), (1.0, 1.0)})
    x = np.array([p[0] for p in pts])
    y = np.array([p[1] for p in pts])
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def biopsy_roc(predictions: Sequence, references: Sequence[bool], cutoffs=None,
               min_area_mm2: float | None = None, connectivity: int = 4,
               scale: PixelScale | None = None) -> RocResult:
    """Biopsy-level ROC: a biopsy is predicted positive when any (kept) cribriform region exists."""
    maps = [_channel(p) for p in predictions]
    refs = np.asarray(references, dtype=bool)
    if len(maps) != len(refs):
        raise ValueError("one reference per prediction required")
    n_pos, n_neg = int(refs.sum()), int((~refs).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("ROC needs at least one positive and one negative biopsy")
    scale = _scale(predictions[0], scale)
    min_cells = _min_cells(min_area_mm2, scale)
    cutoffs = default_cutoffs(maps) if cutoffs is None else np.unique(np.asarray(cutoffs, dtype=np.float64))
    sweeps = [_BiopsySweep(m, connectivity, min_cells) for m in maps]
    points = []
    for c in cutoffs:
        positive = np.array([s.at(c)[0] for s in sweeps])
        tpr = float((positive & refs).sum()) / n_pos
        fpr = float((positive & ~refs).sum()) / n_neg
        points.append(CurvePoint(float(c), tpr, fpr=fpr))
    auc = auc_trapezoid([p.fpr for p in points], [p.sensitivity for p in points])
    return RocResult(points, auc)


def annotation_froc(predictions: Sequence, annotations: Sequence[Sequence[np.ndarray]], cutoffs=None,
                    min_area_mm2: float | None = None, connectivity: int = 4,
                    scale: PixelScale | None = None, fp_over: str = "all") -> list[CurvePoint]:
    """Per-annotation sensitivity against mean false-positive regions per biopsy.

    ``annotations[b]`` lists one boolean output-lattice mask per annotated
    cribriform region of biopsy ``b``. ``fp_over="negative"`` averages false
    positives over annotation-free biopsies only.
    """
    maps = [_channel(p) for p in predictions]
    if len(maps) != len(annotations):
        raise ValueError("one annotation list per prediction required")
    total = sum(len(a) for a in annotations)
    if total == 0:
        raise UndefinedMetric("no annotated regions: sensitivity undefined")
    if fp_over == "all":
        fp_biopsies = list(range(len(maps)))
    elif fp_over == "negative":
        fp_biopsies = [b for b, a in enumerate(annotations) if not a]
        if not fp_biopsies:
            raise UndefinedMetric("no annotation-free biopsies to average false positives over")
    else:
        raise ValueError("fp_over must be 'all' or 'negative'")
    scale = _scale(predictions[0], scale)
    min_cells = _min_cells(min_area_mm2, scale)
    cutoffs = default_cutoffs(maps) if cutoffs is None else np.unique(np.asarray(cutoffs, dtype=np.float64))
    sweeps = [_BiopsySweep(m, connectivity, min_cells, a) for m, a in zip(maps, annotations)]
    points = []
    for c in cutoffs:
        states = [s.at(c) for s in sweeps]
        detected = sum(st[1] for st in states)
        fp = sum(states[b][2] for b in fp_biopsies)
        points.append(CurvePoint(float(c), detected / total, mean_fp_per_biopsy=fp / len(fp_biopsies)))
    return points


def annotated_region_masks(annotation, label_map: np.ndarray, factor: int,
                           label: int = CRIBRIFORM) -> list[np.ndarray]:
    """Output-lattice cells (pooled cover >= 0.5) of each annotated region of ``label``.

    Coverage is measured on the final label map so overlaps and background
    are already resolved.
    """
    from .preprocess import rasterize_polygon

    h, w = label_map.shape
    gh, gw = math.ceil(h / factor), math.ceil(w / factor)
    masks = []
    for region in annotation.clamped((h, w)).regions:
        if int(region.label) != label:
            continue
        inside = rasterize_polygon(region.polygon, (h, w)) & (label_map == label)
        padded = np.zeros((gh * factor, gw * factor), dtype=bool)
        padded[:h, :w] = inside
        frac = padded.reshape(gh, factor, gw, factor).mean(axis=(1, 3))
        masks.append(frac >= 0.5)
    return masks


# -- agreement -----------------------------------------------------------------

def cohen_kappa(labels_a: Sequence[bool], labels_b: Sequence[bool]) -> float:
    """Cohen's kappa for two binary labelings.

    When chance agreement is 1 (both raters constant and equal) kappa is
    defined as 1 if agreement is perfect, else 0, with a warning.
    """
    a = np.asarray(labels_a, dtype=bool)
    b = np.asarray(labels_b, dtype=bool)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("labelings must be 1-d and of equal length")
    n = len(a)
    if n == 0:
        raise ValueError("empty labelings")
    # integer counts scaled by n^2 keep the result to a single rounding
    agree = int((a == b).sum())
    na, nb = int(a.sum()), int(b.sum())
    chance = na * nb + (n - na) * (n - nb)
    if chance == n * n:
        warnings.warn("degenerate marginals: chance agreement is 1", RuntimeWarning, stacklevel=2)
        return 1.0 if agree == n else 0.0
    return (agree * n - chance) / (n * n - chance)


def kappa_from_table(a: int, b: int, c: int, d: int) -> float:
    """Kappa from a 2x2 table ``[[a, b], [c, d]]`` (rows rater 1 yes/no, columns rater 2 yes/no)."""
    x = [True] * a + [True] * b + [False] * c + [False] * d
    y = [True] * a + [False] * b + [True] * c + [False] * d
    return cohen_kappa(x, y)


@dataclass(frozen=True)
class RaterMatrix:
    votes: np.ndarray
    image_ids: tuple[str, ...] = ()

    def __post_init__(self):
        v = np.asarray(self.votes)
        if v.ndim != 2:
            raise ValueError("rater matrix must be images x raters")
        if v.dtype != bool:
            if not np.isin(v, (0, 1)).all():
                raise ValueError("rater matrix entries must be boolean; impute missing votes upstream")
            v = v.astype(bool)
        object.__setattr__(self, "votes", v)
        if not self.image_ids:
            object.__setattr__(self, "image_ids", tuple(str(i) for i in range(v.shape[0])))
        if len(self.image_ids) != v.shape[0]:
            raise ValueError("one id per image row required")

    @property
    def n_images(self) -> int:
        return self.votes.shape[0]

    @property
    def n_raters(self) -> int:
        return self.votes.shape[1]

    def majority(self) -> np.ndarray:
        return self.votes.sum(axis=1) * 2 > self.n_raters


def mean_pairwise_kappa(votes: np.ndarray) -> float:
    r = votes.shape[1]
    vals = [cohen_kappa(votes[:, i], votes[:, j]) for i, j in itertools.combinations(range(r), 2)]
    return float(np.mean(vals))


def mean_kappa_against(labels: np.ndarray, votes: np.ndarray) -> float:
    return float(np.mean([cohen_kappa(labels, votes[:, j]) for j in range(votes.shape[1])]))


def interobserver_compare(raters: RaterMatrix, predictions: Sequence, contours: Sequence[np.ndarray | None],
                          cutoffs: Sequence[float] = INTEROBSERVER_CUTOFFS) -> dict:
    """Compare network calls inside each image's contour with a panel of raters."""
    if len(predictions) != raters.n_images or len(contours) != raters.n_images:
        raise ValueError("need one prediction and one contour per image")
    errors = {}
    maxima = []
    valid = []
    for i, (pred, contour) in enumerate(zip(predictions, contours)):
        prob = _channel(pred)
        if contour is None:
            errors[raters.image_ids[i]] = "missing contour"
            continue
        contour = np.asarray(contour, dtype=bool)
        if contour.shape != prob.shape:
            errors[raters.image_ids[i]] = "contour shape does not match prediction"
            continue
        inside = np.where(contour, prob, 0.0)
        maxima.append(float(inside.max()))
        valid.append(i)
    votes = raters.votes[valid]
    maxima = np.asarray(maxima)
    vote_counts = votes.sum(axis=1)
    r = raters.n_raters
    rater_kappa = mean_pairwise_kappa(votes) if len(valid) and r > 1 else float("nan")
    report = {"n_images": len(valid), "n_raters": r, "rater_rater_kappa": rater_kappa,
              "errors": errors, "cutoffs": []}
    for c in cutoffs:
        called = maxima > c
        bins = []
        for k in range(r + 1):
            at_k = vote_counts == k
            bins.append({"votes": k, "percent": 100.0 * k / r,
                         "predicted_cribriform": int((called & at_k).sum()),
                         "predicted_not_cribriform": int((~called & at_k).sum())})
        report["cutoffs"].append({
            "cutoff": float(c),
            "histogram": bins,
            "network_rater_kappa": mean_kappa_against(called, votes) if len(valid) else float("nan"),
            "predicted_positive": [raters.image_ids[valid[i]] for i in np.nonzero(called)[0]],
        })
    return report


# -- overlays ------------------------------------------------------------------

TP_COLOR = (173, 216, 230)   # light blue
FN_COLOR = (0, 160, 0)       # green
FP_COLOR = (0, 0, 139)       # dark blue
LEGEND_HEIGHT = 20


def blend(pixels: np.ndarray, color, alpha: float) -> np.ndarray:
    return np.rint((1 - alpha) * pixels.astype(np.float64) + alpha * np.asarray(color, dtype=np.float64)).astype(np.uint8)


def overlay(image, reference: np.ndarray, predicted: np.ndarray, factor: int, alpha: float = 0.5,
            legend: bool = True) -> np.ndarray:
    """RGB uint8 overlay: TP light blue, FN green, FP dark blue, legend strip underneath."""
    pixels = image.pixels if hasattr(image, "pixels") else np.asarray(image)
    if pixels.dtype != np.uint8:
        pixels = np.rint(np.clip(pixels, 0, 1) * 255).astype(np.uint8)
    reference = np.asarray(reference, dtype=bool)
    predicted = np.asarray(predicted, dtype=bool)
    if reference.shape != predicted.shape:
        raise ShapeMismatch("reference and prediction masks differ in shape")
    h, w = pixels.shape[:2]
    if reference.shape != (math.ceil(h / factor), math.ceil(w / factor)):
        raise ShapeMismatch("mask does not match image at this factor")
    up = lambda m: np.repeat(np.repeat(m, factor, axis=0), factor, axis=1)[:h, :w]
    ref, pred = up(reference), up(predicted)
    out = pixels.copy()
    for sel, color in ((ref & pred, TP_COLOR), (ref & ~pred, FN_COLOR), (~ref & pred, FP_COLOR)):
        out[sel] = blend(pixels[sel], color, alpha)
    if legend:
        out = np.concatenate([out, _legend(w)], axis=0)
    return out


def _legend(width: int) -> np.ndarray:
    from PIL import Image, ImageDraw

    strip = Image.new("RGB", (width, LEGEND_HEIGHT), (255, 255, 255))
    draw = ImageDraw.Draw(strip)
    x = 4
    for text, color in (("TP", TP_COLOR), ("FN", FN_COLOR), ("FP", FP_COLOR)):
        draw.rectangle([x, 4, x + 11, 15], fill=color)
        draw.text((x + 14, 4), text, fill=(0, 0, 0))
        x += 44
    return np.asarray(strip)
