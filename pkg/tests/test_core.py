import json
import math

import numpy as np
import pytest

from cribriform.core import (
    N_LABELS,
    AnnotationSet,
    BiopsyImage,
    EmptyRegion,
    Geometry,
    InvalidAnnotation,
    Label,
    PixelScale,
    Region,
    area_of_region,
    label_of,
    load_annotations,
    load_image,
    save_annotations,
    save_image,
)

CELL_MM2 = (0.92 * 32 / 1000.0) ** 2


def test_label_set_is_seven_codes_in_order():
    assert N_LABELS == 7
    names = ["NON_LABELLED", "G3", "G4_FUSED", "G4_ILL_DEFINED", "G4_COMPLEX_FUSED",
             "G4_GLOMERULOID", "G4_CRIBRIFORM"]
    assert [l.name for l in Label] == names
    assert [int(l) for l in Label] == list(range(7))


def test_label_round_trip():
    for c in range(7):
        assert int(label_of(c)) == c
    with pytest.raises(InvalidAnnotation):
        label_of(7)


@pytest.mark.parametrize("name,label", [("G4Cribriform", Label.G4_CRIBRIFORM), ("non-labelled", Label.NON_LABELLED),
                                        ("g4 ill defined", Label.G4_ILL_DEFINED), ("G3", Label.G3)])
def test_label_names(name, label):
    assert Label.from_name(name) is label


def test_pixel_scale_nominal():
    s = PixelScale()
    assert math.isclose(s.output_um_per_px, 29.44, rel_tol=1e-12)
    assert math.isclose(s.output_px_area_mm2, CELL_MM2, rel_tol=1e-12)
    # 29.44^2 = 866.7136 um^2; the often quoted 8.6695e-4 mm^2 only agrees to three digits
    assert math.isclose(s.output_px_area_mm2, 8.667136e-4, rel_tol=1e-12)
    assert round(s.output_px_area_mm2, 6) == round(8.6695e-4, 6)


def test_area_one_cell():
    r = Region.from_coords([(0, 0)], PixelScale())
    assert math.isclose(area_of_region(r, PixelScale()), 8.667136e-4, rel_tol=1e-12)
    assert r.area_mm2 == area_of_region(r, PixelScale())


def test_area_empty_region():
    with pytest.raises(EmptyRegion):
        area_of_region([], PixelScale())
    with pytest.raises(EmptyRegion):
        Region.from_coords([], PixelScale())


def test_area_threshold_examples():
    s = PixelScale()
    a18 = area_of_region([(0, i) for i in range(18)], s)
    a17 = area_of_region([(0, i) for i in range(17)], s)
    assert math.isclose(a18, 18 * CELL_MM2, rel_tol=1e-12) and a18 > 0.0150
    assert math.isclose(a17, 17 * CELL_MM2, rel_tol=1e-12) and a17 < 0.0150
    assert round(a18, 4) == 0.0156 and round(a17, 4) == 0.0147


def test_area_is_linear_in_count():
    s = PixelScale(0.5, 16)
    one = area_of_region([(0, 0)], s)
    for k in (1, 2, 7, 40):
        assert area_of_region([(0, i) for i in range(k)], s) == k * one


def test_polygon_validation():
    with pytest.raises(InvalidAnnotation):
        AnnotationSet.build("b", [([(0, 0), (1, 1)], Label.G3)])
    with pytest.raises(InvalidAnnotation):
        AnnotationSet.build("b", [([(0, 0), (1, 1), (2, 0)], 9)])
    with pytest.raises(InvalidAnnotation):
        AnnotationSet.build("b", [([(0, 0), (1, 1), (2, 0)], "G5")])


def test_clamping_records_warning():
    ann = AnnotationSet.build("b", [([(-5, 2), (30, 2), (10, 12)], "G3")])
    with pytest.warns(UserWarning):
        clamped = ann.clamped((10, 20))
    assert clamped.warnings
    xs = [x for x, _ in clamped.regions[0].polygon]
    ys = [y for _, y in clamped.regions[0].polygon]
    assert min(xs) >= 0 and max(xs) <= 20 and max(ys) <= 10


def test_image_validation():
    with pytest.raises(ValueError):
        BiopsyImage("x", np.full((2, 2, 3), 1.5), 0.92)
    with pytest.raises(ValueError):
        BiopsyImage("x", np.zeros((2, 2, 3)), 0.0)
    with pytest.raises(ValueError):
        BiopsyImage("x", np.zeros((2, 2)), 0.92)


def test_image_from_raw_normalizes_by_imax():
    raw = np.array([[[255, 0, 51]]], dtype=np.uint8)
    img = BiopsyImage.from_raw("x", raw, 0.92)
    assert img.i_max == 255.0
    np.testing.assert_allclose(img.pixels[0, 0], [1.0, 0.0, 0.2], atol=1e-7)
    raw16 = np.array([[[65535, 0, 0]]], dtype=np.uint16)
    assert BiopsyImage.from_raw("y", raw16, 0.92).i_max == 65535.0


def test_image_is_read_only():
    img = BiopsyImage("x", np.zeros((2, 2, 3)), 0.92)
    with pytest.raises(ValueError):
        img.pixels[0, 0, 0] = 1.0


def test_geometry_presets():
    g = Geometry()
    assert (g.patch_size, g.stride, g.factor, g.output_size) == (1024, 512, 32, 32)
    with pytest.raises(ValueError):
        Geometry(100, 50, 32)


def test_file_round_trip(tmp_path, rng):
    raw = rng.integers(0, 256, (9, 13, 3), dtype=np.uint8)
    img = BiopsyImage.from_raw("b1", raw, 0.46)
    save_image(img, tmp_path / "b1.png")
    meta = json.loads((tmp_path / "b1.json").read_text())
    assert meta == {"id": "b1", "um_per_pixel": 0.46, "i_max": 255}
    back = load_image(tmp_path / "b1.png")
    assert back.id == "b1" and back.resolution == 0.46
    np.testing.assert_array_equal(np.rint(back.pixels * 255).astype(np.uint8), raw)

    ann = AnnotationSet.build("b1", [([(1, 1), (5, 1), (3, 6)], "G4Cribriform")], 0.46)
    ann_dir = tmp_path / "ann"
    ann_dir.mkdir()
    save_annotations(ann, ann_dir / "b1.json")
    doc = json.loads((ann_dir / "b1.json").read_text())
    assert doc["regions"][0]["label"] == "G4_CRIBRIFORM"
    assert load_annotations(ann_dir / "b1.json") == ann
