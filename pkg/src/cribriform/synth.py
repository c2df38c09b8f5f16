"""Seeded synthetic biopsies: procedural label textures inside annotated polygons.

The textures are meant to be easy to tell apart, not histologically
plausible. All tissue colours stay below the optical density background
threshold (every channel under ~0.74) so the background mask keeps them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import N_LABELS, WORKING_RESOLUTION, AnnotationSet, BiopsyImage, Label
from .preprocess import rasterize_annotations, rasterize_polygon

# Region counts per label from the reference cohort (G3 ... cribriform).
COHORT_REGION_COUNTS = {
    Label.G3: 976,
    Label.G4_FUSED: 197,
    Label.G4_ILL_DEFINED: 441,
    Label.G4_COMPLEX_FUSED: 28,
    Label.G4_GLOMERULOID: 183,
    Label.G4_CRIBRIFORM: 161,
}


@dataclass(frozen=True)
class Texture:
    base: tuple[float, float, float]
    spot: tuple[float, float, float]
    spot_density: float   # spots per 1000 px
    spot_radius: tuple[float, float]
    noise: float = 0.025


TEXTURES = {
    Label.NON_LABELLED: Texture((0.70, 0.46, 0.60), (0.62, 0.40, 0.55), 2.0, (3.0, 6.0)),
    Label.G3: Texture((0.46, 0.30, 0.62), (0.70, 0.62, 0.70), 1.5, (2.5, 4.0)),
    Label.G4_FUSED: Texture((0.58, 0.34, 0.34), (0.45, 0.25, 0.28), 2.5, (2.0, 4.0)),
    Label.G4_ILL_DEFINED: Texture((0.34, 0.46, 0.58), (0.26, 0.36, 0.48), 4.0, (1.5, 3.0)),
    Label.G4_COMPLEX_FUSED: Texture((0.52, 0.52, 0.24), (0.40, 0.42, 0.18), 3.0, (2.0, 3.5)),
    Label.G4_GLOMERULOID: Texture((0.30, 0.52, 0.34), (0.66, 0.70, 0.64), 1.0, (4.0, 6.0)),
    # dark epithelial sheet punched with many small pale lumina
    Label.G4_CRIBRIFORM: Texture((0.24, 0.14, 0.40), (0.72, 0.66, 0.72), 9.0, (1.5, 2.5)),
}


@dataclass(frozen=True)
class SynthConfig:
    n_biopsies: int = 40
    height: int = 192
    width: int = 320
    seed: int = 0
    regions_per_biopsy: tuple[int, int] = (1, 4)
    region_radius: tuple[float, float] = (16.0, 30.0)
    label_weights: dict = field(default_factory=lambda: dict(COHORT_REGION_COUNTS))
    min_biopsies_per_label: int = 0
    resolution: float = WORKING_RESOLUTION

    def normalized_weights(self) -> tuple[list[Label], np.ndarray]:
        labels = [Label(l) for l in sorted(self.label_weights) if self.label_weights[l] > 0]
        w = np.array([self.label_weights[l] for l in labels], dtype=np.float64)
        return labels, w / w.sum()

    def to_json(self) -> dict:
        return {"n_biopsies": self.n_biopsies, "height": self.height, "width": self.width, "seed": self.seed,
                "regions_per_biopsy": list(self.regions_per_biopsy), "region_radius": list(self.region_radius),
                "label_weights": {Label(k).name: v for k, v in self.label_weights.items()},
                "min_biopsies_per_label": self.min_biopsies_per_label, "resolution": self.resolution}

    @classmethod
    def from_json(cls, data: dict) -> "SynthConfig":
        data = dict(data)
        if "label_weights" in data:
            data["label_weights"] = {Label.from_name(k): v for k, v in data["label_weights"].items()}
        for key in ("regions_per_biopsy", "region_radius"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


def _texture(label: Label, shape, rng: np.random.Generator) -> np.ndarray:
    tex = TEXTURES[label]
    h, w = shape
    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = tex.base
    n_spots = rng.poisson(tex.spot_density * h * w / 1000.0)
    yy, xx = np.mgrid[0:h, 0:w]
    spots = np.zeros((h, w), dtype=bool)
    cy = rng.uniform(0, h, n_spots)
    cx = rng.uniform(0, w, n_spots)
    rad = rng.uniform(*tex.spot_radius, n_spots)
    for y, x, r in zip(cy, cx, rad):
        r0, r1 = max(int(y - r - 1), 0), min(int(y + r + 2), h)
        c0, c1 = max(int(x - r - 1), 0), min(int(x + r + 2), w)
        spots[r0:r1, c0:c1] |= (yy[r0:r1, c0:c1] - y) ** 2 + (xx[r0:r1, c0:c1] - x) ** 2 <= r * r
    img[spots] = tex.spot
    img += rng.normal(0.0, tex.noise, size=img.shape)
    return np.clip(img, 0.02, 0.74)


def _blob(centre, radius, rng, n_vertices=None):
    n_vertices = n_vertices or int(rng.integers(9, 16))
    angles = np.sort(rng.uniform(0, 2 * math.pi, n_vertices))
    radii = radius * rng.uniform(0.7, 1.0, n_vertices)
    return [(float(centre[1] + r * math.cos(a)), float(centre[0] + r * math.sin(a))) for a, r in zip(angles, radii)]


def _tissue_polygon(cfg: SynthConfig, rng) -> list[tuple[float, float]]:
    """Elongated core spanning most of the image width."""
    h, w = cfg.height, cfg.width
    n = 24
    out = []
    for k in range(n):
        t = 2 * math.pi * k / n
        rx = (w / 2 - 6) * (1 - 0.04 * rng.random())
        ry = (h / 2 - 6) * (0.85 + 0.15 * rng.random())
        out.append((w / 2 + rx * math.cos(t), h / 2 + ry * math.sin(t)))
    return out


def _place_regions(cfg: SynthConfig, labels: list[Label], rng) -> list[tuple[list, Label]]:
    h, w = cfg.height, cfg.width
    placed = []
    centres = []
    for label in labels:
        for _ in range(200):
            r = rng.uniform(*cfg.region_radius)
            # keep inside the elliptical tissue core
            t = rng.uniform(0, 2 * math.pi)
            s = math.sqrt(rng.random()) * 0.55
            cy = h / 2 + s * (h / 2 - r - 8) * math.sin(t) / 0.55
            cx = w / 2 + s * (w / 2 - r - 8) * math.cos(t) / 0.55
            if not (r + 2 <= cy <= h - r - 2 and r + 2 <= cx <= w - r - 2):
                continue
            if all(math.hypot(cy - y, cx - x) > r + rr + 4 for y, x, rr in centres):
                centres.append((cy, cx, r))
                placed.append((_blob((cy, cx), r, rng), label))
                break
    return placed


def _biopsy_labels(cfg: SynthConfig, rng) -> list[list[Label]]:
    labels, p = cfg.normalized_weights()
    lo, hi = cfg.regions_per_biopsy
    out = []
    for _ in range(cfg.n_biopsies):
        k = int(rng.integers(lo, hi + 1))
        out.append([labels[i] for i in rng.choice(len(labels), size=k, p=p)])
    if cfg.min_biopsies_per_label:
        for label in labels:
            have = [i for i, ls in enumerate(out) if label in ls]
            need = min(cfg.min_biopsies_per_label, cfg.n_biopsies) - len(have)
            if need <= 0:
                continue
            candidates = [i for i in range(cfg.n_biopsies) if label not in out[i]]
            for i in rng.choice(candidates, size=need, replace=False):
                if len(out[i]) < hi:
                    out[i].append(label)
                else:
                    # replace the most frequent label in this biopsy
                    counts = {l: sum(l in ls for ls in out) for l in out[i]}
                    j = max(range(len(out[i])), key=lambda j: counts[out[i][j]])
                    out[i][j] = label
    return out


def render(cfg: SynthConfig, ann: AnnotationSet, tissue: list, rng) -> np.ndarray:
    shape = (cfg.height, cfg.width)
    img = np.empty(shape + (3,), dtype=np.float64)
    img[:] = 0.97
    img += rng.normal(0.0, 0.01, size=img.shape)
    inside = rasterize_polygon(tissue, shape)
    img[inside] = _texture(Label.NON_LABELLED, shape, rng)[inside]
    label_map = rasterize_annotations(ann, shape)
    for label in Label:
        if label == Label.NON_LABELLED:
            continue
        sel = label_map == label
        if sel.any():
            img[sel] = _texture(label, shape, rng)[sel]
    return np.rint(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def generate(cfg: SynthConfig) -> list[tuple[BiopsyImage, AnnotationSet]]:
    root = np.random.SeedSequence(cfg.seed)
    plan_rng = np.random.default_rng(root.spawn(1)[0])
    plans = _biopsy_labels(cfg, plan_rng)
    corpus = []
    for i, (labels, seq) in enumerate(zip(plans, root.spawn(cfg.n_biopsies + 1)[1:])):
        rng = np.random.default_rng(seq)
        biopsy_id = f"synth_{cfg.seed}_{i:03d}"
        regions = _place_regions(cfg, labels, rng)
        ann = AnnotationSet.build(biopsy_id, regions, cfg.resolution)
        tissue = _tissue_polygon(cfg, rng)
        raw = render(cfg, ann, tissue, rng)
        corpus.append((BiopsyImage.from_raw(biopsy_id, raw, cfg.resolution, 255.0), ann))
    return corpus


def patch_mean_color_baseline(corpus, patch: int = 16, seed: int = 0) -> float:
    """Nearest-centroid accuracy on mean patch colour, labels taken from pure-label patches."""
    feats, targets = [], []
    for image, ann in corpus:
        label_map = rasterize_annotations(ann, image.shape)
        tissue = (image.pixels.max(axis=2) < 0.76)
        h, w = image.shape
        for r in range(0, h - patch + 1, patch):
            for c in range(0, w - patch + 1, patch):
                lm = label_map[r : r + patch, c : c + patch]
                if not (lm == lm[0, 0]).all() or not tissue[r : r + patch, c : c + patch].all():
                    continue
                feats.append(image.pixels[r : r + patch, c : c + patch].reshape(-1, 3).mean(axis=0))
                targets.append(int(lm[0, 0]))
    feats, targets = np.asarray(feats), np.asarray(targets)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(feats))
    half = len(order) // 2
    train, test = order[:half], order[half:]
    present = sorted(set(targets[train]))
    centroids = np.stack([feats[train][targets[train] == l].mean(axis=0) for l in present])
    d = ((feats[test][:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    pred = np.asarray(present)[d.argmin(axis=1)]
    return float((pred == targets[test]).mean())
