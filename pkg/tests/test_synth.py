import warnings

import numpy as np
import pytest

from cribriform.core import WORKING_RESOLUTION, Label
from cribriform.preprocess import rasterize_annotations
from cribriform.synth import SynthConfig, generate, patch_mean_color_baseline


@pytest.fixture(scope="module")
def corpus120():
    return generate(SynthConfig(n_biopsies=120, seed=3, height=128, width=192))


def _region_counts(corpus):
    counts = {l: 0 for l in Label}
    for _, ann in corpus:
        for r in ann.regions:
            counts[r.label] += 1
    return counts


def test_same_seed_identical():
    a = generate(SynthConfig(n_biopsies=4, seed=11))
    b = generate(SynthConfig(n_biopsies=4, seed=11))
    for (ia, aa), (ib, ab) in zip(a, b):
        assert ia.id == ib.id
        assert ia.pixels.tobytes() == ib.pixels.tobytes()
        assert aa == ab
    c = generate(SynthConfig(n_biopsies=4, seed=12))
    assert any(x.pixels.tobytes() != y.pixels.tobytes() for (x, _), (y, _) in zip(a, c))


def test_only_cribriform():
    corpus = generate(SynthConfig(n_biopsies=6, seed=1, label_weights={Label.G4_CRIBRIFORM: 1.0}))
    assert all(r.label == Label.G4_CRIBRIFORM for _, ann in corpus for r in ann.regions)


@pytest.mark.parametrize("label", [l for l in Label if l != Label.NON_LABELLED])
def test_every_label_generatable(label):
    corpus = generate(SynthConfig(n_biopsies=2, seed=0, height=96, width=128, label_weights={label: 1.0}))
    for image, ann in corpus:
        lm = rasterize_annotations(ann, image.shape)
        assert (lm == label).any()


def test_structure(corpus120):
    for image, ann in corpus120:
        assert 1 <= len(ann.regions) <= 4
        assert image.resolution == WORKING_RESOLUTION
        # white background around the tissue
        assert image.pixels[0, 0].min() > 0.9


def test_label_ratio(corpus120):
    counts = _region_counts(corpus120)
    ratio = counts[Label.G3] / counts[Label.G4_CRIBRIFORM]
    assert abs(ratio - 976 / 161) <= 0.2 * 976 / 161
    assert counts[Label.G3] == max(counts.values())
    assert counts[Label.G4_COMPLEX_FUSED] == min(v for l, v in counts.items() if l != Label.NON_LABELLED)


def test_no_clamping_warnings(corpus120):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        for image, ann in corpus120:
            rasterize_annotations(ann, image.shape)
            assert not ann.clamped(image.shape).warnings


def test_mean_colour_baseline(corpus120):
    assert patch_mean_color_baseline(corpus120) >= 0.9


def test_min_biopsies_per_label():
    corpus = generate(SynthConfig(n_biopsies=40, seed=7, min_biopsies_per_label=10))
    for label in Label:
        if label == Label.NON_LABELLED:
            continue
        assert sum(any(r.label == label for r in ann.regions) for _, ann in corpus) >= 10


def test_config_json_round_trip():
    cfg = SynthConfig(n_biopsies=5, seed=2, label_weights={Label.G3: 2.0, Label.G4_CRIBRIFORM: 1.0})
    assert SynthConfig.from_json(cfg.to_json()) == cfg
