"""Domain types shared by every stage of the pipeline.

Coordinates follow two conventions: polygons are stored as ``(x, y)`` pixel
pairs (column first, as drawn by annotation tools) while arrays and regions
use ``(row, col)``.
"""

from __future__ import annotations

import enum
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class CribriformError(Exception):
    """Base class for pipeline errors."""


class EmptyRegion(CribriformError):
    pass


class WouldUpsample(CribriformError):
    pass


class ShapeMismatch(CribriformError, ValueError):
    pass


class InvalidAnnotation(CribriformError, ValueError):
    pass


class Label(enum.IntEnum):
    NON_LABELLED = 0
    G3 = 1
    G4_FUSED = 2
    G4_ILL_DEFINED = 3
    G4_COMPLEX_FUSED = 4
    G4_GLOMERULOID = 5
    G4_CRIBRIFORM = 6

    @classmethod
    def from_name(cls, name: str) -> "Label":
        key = name.strip().upper().replace("-", "_").replace(" ", "_")
        aliases = {
            "NONLABELLED": "NON_LABELLED",
            "NONLABELED": "NON_LABELLED",
            "NON_LABELED": "NON_LABELLED",
            "G4FUSED": "G4_FUSED",
            "G4ILLDEFINED": "G4_ILL_DEFINED",
            "G4COMPLEXFUSED": "G4_COMPLEX_FUSED",
            "G4GLOMERULOID": "G4_GLOMERULOID",
            "G4CRIBRIFORM": "G4_CRIBRIFORM",
        }
        key = aliases.get(key, key)
        try:
            return cls[key]
        except KeyError:
            raise InvalidAnnotation(f"unknown label name {name!r}") from None

    @property
    def display_name(self) -> str:
        return _DISPLAY_NAMES[self]


_DISPLAY_NAMES = {
    Label.NON_LABELLED: "non-labelled",
    Label.G3: "G3",
    Label.G4_FUSED: "G4 fused",
    Label.G4_ILL_DEFINED: "G4 ill-defined",
    Label.G4_COMPLEX_FUSED: "G4 complex fused",
    Label.G4_GLOMERULOID: "G4 glomeruloid",
    Label.G4_CRIBRIFORM: "G4 cribriform",
}

N_LABELS = len(Label)
assert N_LABELS == 7

# Overlap resolution when rasterizing, highest priority first.
LABEL_PRIORITY = (
    Label.G4_CRIBRIFORM,
    Label.G4_COMPLEX_FUSED,
    Label.G4_GLOMERULOID,
    Label.G4_FUSED,
    Label.G4_ILL_DEFINED,
    Label.G3,
    Label.NON_LABELLED,
)


def label_of(code: int) -> Label:
    try:
        return Label(int(code))
    except ValueError:
        raise InvalidAnnotation(f"label code {code} outside 0..{N_LABELS - 1}") from None


WORKING_RESOLUTION = 0.92  # um/px


@dataclass(frozen=True)
class Geometry:
    """Patch tiling and network output lattice.

    The paper setting is 1024 px patches, stride 512 and a 32x smaller
    output; the desk preset keeps the same ratios at laptop cost.
    """

    patch_size: int = 1024
    stride: int = 512
    factor: int = 32

    def __post_init__(self):
        if self.patch_size % self.factor:
            raise ValueError("patch_size must be a multiple of factor")
        if self.stride % self.factor:
            raise ValueError("stride must be a multiple of factor")
        if not 0 < self.stride <= self.patch_size:
            raise ValueError("stride must be in (0, patch_size]")

    @property
    def output_size(self) -> int:
        return self.patch_size // self.factor


PAPER_GEOMETRY = Geometry(1024, 512, 32)
DESK_GEOMETRY = Geometry(64, 32, 8)


@dataclass(frozen=True)
class PixelScale:
    input_um_per_px: float = WORKING_RESOLUTION
    downsample_factor: int = 32

    def __post_init__(self):
        if self.input_um_per_px <= 0 or self.downsample_factor < 1:
            raise ValueError("invalid pixel scale")

    @property
    def output_um_per_px(self) -> float:
        return self.input_um_per_px * self.downsample_factor

    @property
    def output_px_area_mm2(self) -> float:
        return (self.output_um_per_px / 1000.0) ** 2


@dataclass(frozen=True)
class BiopsyImage:
    id: str
    pixels: np.ndarray
    resolution: float
    i_max: float = 255.0

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ShapeMismatch(f"expected HxWx3 pixels, got {px.shape}")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if self.i_max <= 0:
            raise ValueError("i_max must be positive")
        if not np.isfinite(px).all() or px.min() < 0 or px.max() > 1:
            raise ValueError("pixel values must lie in [0, 1]")
        px.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    @classmethod
    def from_raw(cls, id: str, raw: np.ndarray, resolution: float, i_max: float | None = None):
        """Normalize an integer RGB array by its maximum representable value."""
        raw = np.asarray(raw)
        if i_max is None:
            i_max = float(np.iinfo(raw.dtype).max) if raw.dtype.kind in "ui" else 1.0
        pixels = np.clip(raw.astype(np.float32) / np.float32(i_max), 0.0, 1.0)
        return cls(id, pixels, float(resolution), float(i_max))


@dataclass(frozen=True)
class AnnotatedRegion:
    polygon: tuple[tuple[float, float], ...]
    label: Label


@dataclass(frozen=True)
class AnnotationSet:
    biopsy_id: str
    regions: tuple[AnnotatedRegion, ...]
    declared_resolution: float = WORKING_RESOLUTION
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        for region in self.regions:
            if len(region.polygon) < 3:
                raise InvalidAnnotation("polygon needs at least 3 vertices")
            if not isinstance(region.label, Label):
                raise InvalidAnnotation(f"bad label {region.label!r}")

    @classmethod
    def build(cls, biopsy_id: str, regions: Iterable[tuple[Sequence, int | str | Label]],
              declared_resolution: float = WORKING_RESOLUTION) -> "AnnotationSet":
        parsed = []
        for polygon, label in regions:
            if isinstance(label, str):
                label = Label.from_name(label)
            else:
                label = label_of(label)
            poly = tuple((float(x), float(y)) for x, y in polygon)
            parsed.append(AnnotatedRegion(poly, label))
        return cls(biopsy_id, tuple(parsed), float(declared_resolution))

    def of_label(self, label: Label) -> list[AnnotatedRegion]:
        return [r for r in self.regions if r.label == label]

    def clamped(self, shape: tuple[int, int]) -> "AnnotationSet":
        """Clamp vertices to image bounds, recording a warning for each clamp."""
        h, w = shape
        notes = list(self.warnings)
        regions = []
        for k, region in enumerate(self.regions):
            poly = []
            moved = False
            for x, y in region.polygon:
                cx, cy = min(max(x, 0.0), float(w)), min(max(y, 0.0), float(h))
                moved |= (cx, cy) != (x, y)
                poly.append((cx, cy))
            if moved:
                notes.append(f"region {k} ({region.label.name}) clamped to image bounds")
                warnings.warn(notes[-1], stacklevel=2)
            regions.append(AnnotatedRegion(tuple(poly), region.label))
        return AnnotationSet(self.biopsy_id, tuple(regions), self.declared_resolution, tuple(notes))

    def scaled(self, ratio: float, resolution: float) -> "AnnotationSet":
        regions = tuple(
            AnnotatedRegion(tuple((x * ratio, y * ratio) for x, y in r.polygon), r.label)
            for r in self.regions
        )
        return AnnotationSet(self.biopsy_id, regions, resolution, self.warnings)

    def to_json(self) -> dict:
        return {
            "biopsy_id": self.biopsy_id,
            "um_per_pixel": self.declared_resolution,
            "regions": [
                {"label": r.label.name, "polygon": [list(p) for p in r.polygon]}
                for r in self.regions
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> "AnnotationSet":
        return cls.build(
            data["biopsy_id"],
            [(r["polygon"], r["label"]) for r in data.get("regions", [])],
            data.get("um_per_pixel", WORKING_RESOLUTION),
        )


@dataclass(frozen=True)
class Region:
    pixel_coords: frozenset
    area_mm2: float
    peak_probability: float

    def __post_init__(self):
        if not self.pixel_coords:
            raise EmptyRegion("region has no pixels")

    @property
    def size(self) -> int:
        return len(self.pixel_coords)

    @classmethod
    def from_coords(cls, coords: Iterable[tuple[int, int]], scale: PixelScale,
                    peak_probability: float = 1.0) -> "Region":
        coords = frozenset((int(r), int(c)) for r, c in coords)
        if not coords:
            raise EmptyRegion("region has no pixels")
        return cls(coords, len(coords) * scale.output_px_area_mm2, float(peak_probability))


def area_of_region(region: Region | Iterable, scale: PixelScale) -> float:
    """Physical area in mm^2 of a region on the output lattice."""
    coords = region.pixel_coords if isinstance(region, Region) else frozenset(region)
    if not coords:
        raise EmptyRegion("region has no pixels")
    return len(coords) * scale.output_px_area_mm2


# -- file formats --------------------------------------------------------------

def load_image(path: str | Path, meta_path: str | Path | None = None) -> BiopsyImage:
    """Load an 8/16-bit RGB PNG/TIFF plus its ``{id, um_per_pixel, i_max}`` sidecar."""
    from PIL import Image

    path = Path(path)
    meta_path = Path(meta_path) if meta_path else path.with_suffix(".json")
    meta = json.loads(meta_path.read_text())
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            raw = np.asarray(im)
            raw = np.repeat(raw[..., None], 3, axis=2)
        else:
            raw = np.asarray(im.convert("RGB"))
    i_max = meta.get("i_max")
    return BiopsyImage.from_raw(meta.get("id", path.stem), raw, meta["um_per_pixel"], i_max)


def save_image(image: BiopsyImage, path: str | Path) -> None:
    from PIL import Image

    path = Path(path)
    raw = np.rint(image.pixels * 255.0).astype(np.uint8)
    Image.fromarray(raw, "RGB").save(path)
    meta = {"id": image.id, "um_per_pixel": image.resolution, "i_max": 255}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))


def load_annotations(path: str | Path) -> AnnotationSet:
    return AnnotationSet.from_json(json.loads(Path(path).read_text()))


def save_annotations(ann: AnnotationSet, path: str | Path) -> None:
    Path(path).write_text(json.dumps(ann.to_json(), indent=2))
