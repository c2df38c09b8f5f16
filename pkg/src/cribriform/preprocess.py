"""Image preparation: background masking, resampling, tiling, label maps and augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .core import (
    LABEL_PRIORITY,
    N_LABELS,
    PAPER_GEOMETRY,
    WORKING_RESOLUTION,
    AnnotationSet,
    BiopsyImage,
    Geometry,
    Label,
    ShapeMismatch,
    WouldUpsample,
)

OD_THRESHOLD = 0.12
MAX_BACKGROUND_FRACTION = 0.995
BACKGROUND_VALUE = 1.0


def optical_density(image: BiopsyImage) -> np.ndarray:
    """Per-channel optical density ``-log10(I_c / I_max)``.

    Zero intensities are replaced by half a quantization step so the
    transform stays finite.
    """
    floor = 1.0 / (2.0 * image.i_max)
    ratio = np.maximum(image.pixels.astype(np.float64), floor)
    return -np.log10(ratio)


def od_background_mask(image: BiopsyImage, threshold: float = OD_THRESHOLD) -> np.ndarray:
    """True where any channel has optical density below ``threshold``."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    return (optical_density(image) < threshold).any(axis=2)


def resample_to_working_resolution(image: BiopsyImage, target: float = WORKING_RESOLUTION) -> BiopsyImage:
    if math.isclose(image.resolution, target, rel_tol=1e-9):
        return image
    if image.resolution > target:
        raise WouldUpsample(f"image at {image.resolution} um/px is coarser than target {target}")
    ratio = target / image.resolution
    h, w = image.shape
    out_h, out_w = int(h / ratio + 1e-9), int(w / ratio + 1e-9)
    if out_h < 1 or out_w < 1:
        raise ShapeMismatch("image too small to resample")
    k = round(ratio)
    px = image.pixels.astype(np.float64)
    if math.isclose(ratio, k, rel_tol=1e-9):
        out = px[: out_h * k, : out_w * k].reshape(out_h, k, out_w, k, 3).mean(axis=(1, 3))
    else:
        rows = (np.arange(out_h) + 0.5) * ratio - 0.5
        cols = (np.arange(out_w) + 0.5) * ratio - 0.5
        rr, cc = np.meshgrid(rows, cols, indexing="ij")
        out = np.stack(
            [ndimage.map_coordinates(px[..., c], [rr, cc], order=1, mode="nearest") for c in range(3)],
            axis=-1,
        )
    out = np.clip(out, 0.0, 1.0).astype(image.pixels.dtype)
    return BiopsyImage(image.id, out, float(target), image.i_max)


def rescale_annotations(ann: AnnotationSet, source_resolution: float,
                        target: float = WORKING_RESOLUTION) -> AnnotationSet:
    if math.isclose(source_resolution, target, rel_tol=1e-9):
        return ann
    return ann.scaled(source_resolution / target, target)


# -- tiling --------------------------------------------------------------------

@dataclass(frozen=True)
class Patch:
    biopsy_id: str
    origin: tuple[int, int]
    pixels: np.ndarray
    bg_frac: float = 0.0


def window_origins(dim: int, patch: int, stride: int) -> list[int]:
    """Stride-spaced window starts along one axis, plus one flush with the far edge."""
    if dim <= patch:
        return [0]
    origins = list(range(0, dim - patch + 1, stride))
    if origins[-1] + patch < dim:
        origins.append(dim - patch)
    return origins


def extract_window(array: np.ndarray, origin: tuple[int, int], size: int, fill) -> np.ndarray:
    """Crop ``size x size`` at ``origin``, padding with ``fill`` past the array edge."""
    r, c = origin
    crop = array[r : r + size, c : c + size]
    if crop.shape[0] == size and crop.shape[1] == size:
        return crop.copy()
    out = np.full((size, size) + array.shape[2:], fill, dtype=array.dtype)
    out[: crop.shape[0], : crop.shape[1]] = crop
    return out


def tile_biopsy(image: BiopsyImage, bg_mask: np.ndarray | None = None, geometry: Geometry = PAPER_GEOMETRY,
                max_bg_frac: float | None = MAX_BACKGROUND_FRACTION) -> list[Patch]:
    """Half-overlapping windows over the image, dropping background-dominated ones.

    ``max_bg_frac=None`` keeps every window (used for inference coverage).
    """
    if bg_mask is None:
        bg_mask = od_background_mask(image)
    if bg_mask.shape != image.shape:
        raise ShapeMismatch("background mask does not match image")
    h, w = image.shape
    size = geometry.patch_size
    patches = []
    for r in window_origins(h, size, geometry.stride):
        for c in window_origins(w, size, geometry.stride):
            bg = extract_window(bg_mask, (r, c), size, True)
            frac = float(bg.mean())
            if max_bg_frac is not None and frac > max_bg_frac:
                continue
            pixels = extract_window(image.pixels, (r, c), size, BACKGROUND_VALUE)
            patches.append(Patch(image.id, (r, c), pixels, frac))
    return patches


# -- label maps ----------------------------------------------------------------

def rasterize_polygon(polygon, shape: tuple[int, int]) -> np.ndarray:
    """Even-odd scanline fill sampled at pixel centres. ``polygon`` holds (x, y) vertices."""
    h, w = shape
    mask = np.zeros((h, w), dtype=bool)
    pts = np.asarray(polygon, dtype=np.float64)
    if len(pts) < 3:
        return mask
    x0, y0 = pts[:, 0], pts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    r_lo = max(int(math.floor(pts[:, 1].min())), 0)
    r_hi = min(int(math.ceil(pts[:, 1].max())), h)
    for r in range(r_lo, r_hi):
        y = r + 0.5
        crossing = ((y0 <= y) & (y < y1)) | ((y1 <= y) & (y < y0))
        if not crossing.any():
            continue
        t = (y - y0[crossing]) / (y1[crossing] - y0[crossing])
        xs = np.sort(x0[crossing] + t * (x1[crossing] - x0[crossing]))
        for xa, xb in zip(xs[0::2], xs[1::2]):
            # pixel c is inside when its centre c + 0.5 lies in [xa, xb)
            c0 = max(int(math.ceil(xa - 0.5)), 0)
            c1 = min(int(math.ceil(xb - 0.5)), w)
            if c1 > c0:
                mask[r, c0:c1] = True
    return mask


def rasterize_annotations(ann: AnnotationSet, shape: tuple[int, int],
                          bg_mask: np.ndarray | None = None) -> np.ndarray:
    """Label map (uint8 codes) with overlaps resolved by ``LABEL_PRIORITY``."""
    ann = ann.clamped(shape)
    label_map = np.zeros(shape, dtype=np.uint8)
    rank = {label: i for i, label in enumerate(LABEL_PRIORITY)}
    ordered = sorted(ann.regions, key=lambda r: -rank[r.label])
    for region in ordered:
        if region.label == Label.NON_LABELLED:
            continue
        inside = rasterize_polygon(region.polygon, shape)
        label_map[inside] = int(region.label)
    if bg_mask is not None:
        label_map[bg_mask] = int(Label.NON_LABELLED)
    return label_map


def pool_labels(label_map: np.ndarray, factor: int) -> np.ndarray:
    """One-hot expand then average-pool with a non-overlapping ``factor`` window."""
    h, w = label_map.shape
    if h % factor or w % factor:
        raise ShapeMismatch(f"label map {label_map.shape} not divisible by {factor}")
    blocks = label_map.reshape(h // factor, factor, w // factor, factor)
    counts = np.stack([(blocks == l).sum(axis=(1, 3)) for l in range(N_LABELS)], axis=-1)
    return counts / float(factor * factor)


def downsample_mask(label_map: np.ndarray, geometry: Geometry = PAPER_GEOMETRY) -> np.ndarray:
    """Soft reference mask for one patch: ``(S/f, S/f, 7)`` class fractions."""
    size = geometry.patch_size
    if label_map.shape != (size, size):
        raise ShapeMismatch(f"expected {size}x{size} label map, got {label_map.shape}")
    return pool_labels(label_map, geometry.factor)


# -- augmentation --------------------------------------------------------------

@dataclass(frozen=True)
class AugmentationConfig:
    flip_h: bool = True
    flip_v: bool = True
    translate_frac: float = 0.10
    max_rotation_deg: float = 5.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    channel_shift: float = 0.05
    rescale_min: tuple[float, float] = (0.0, 0.1)
    rescale_max: tuple[float, float] = (0.9, 1.0)
    rng_seed: int | None = None

    @classmethod
    def disabled(cls) -> "AugmentationConfig":
        return cls(False, False, 0.0, 0.0, (1.0, 1.0), 0.0, (0.0, 0.0), (1.0, 1.0))


@dataclass(frozen=True)
class AugmentParams:
    flip_h: bool = False
    flip_v: bool = False
    scale: float = 1.0
    angle_deg: float = 0.0
    shift_rows: float = 0.0
    shift_cols: float = 0.0
    channel_shifts: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rescale_min: float = 0.0
    rescale_max: float = 1.0

    @property
    def is_geometric_identity(self) -> bool:
        return self.scale == 1.0 and self.angle_deg == 0.0 and self.shift_rows == 0.0 and self.shift_cols == 0.0


def sample_augmentation(cfg: AugmentationConfig, size: int, rng: np.random.Generator) -> AugmentParams:
    # draw every variate unconditionally so the stream does not depend on the config
    u = rng.random(2)
    scale = rng.uniform(*cfg.scale_range)
    angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)
    shift = rng.uniform(-cfg.translate_frac, cfg.translate_frac, size=2) * size
    channel = rng.uniform(-cfg.channel_shift, cfg.channel_shift, size=3)
    lo = rng.uniform(*cfg.rescale_min)
    hi = rng.uniform(*cfg.rescale_max)
    return AugmentParams(
        flip_h=bool(cfg.flip_h and u[0] < 0.5),
        flip_v=bool(cfg.flip_v and u[1] < 0.5),
        scale=float(scale),
        angle_deg=float(angle),
        shift_rows=float(shift[0]),
        shift_cols=float(shift[1]),
        channel_shifts=tuple(float(s) for s in channel),
        rescale_min=float(lo),
        rescale_max=float(hi),
    )


def _affine(params: AugmentParams, shape: tuple[int, int]):
    """Inverse map (output -> input) for scale, then rotation, then translation about the centre."""
    centre = (np.array(shape, dtype=np.float64) - 1.0) / 2.0
    theta = math.radians(params.angle_deg)
    cos, sin = math.cos(theta), math.sin(theta)
    forward = params.scale * np.array([[cos, -sin], [sin, cos]])
    inverse = np.linalg.inv(forward)
    shift = np.array([params.shift_rows, params.shift_cols])
    offset = centre - inverse @ (centre + shift)
    return inverse, offset


def apply_augmentation(pixels: np.ndarray, label_map: np.ndarray | None, params: AugmentParams):
    out = pixels
    mask = label_map
    if params.flip_h:
        out = out[:, ::-1]
        mask = mask[:, ::-1] if mask is not None else None
    if params.flip_v:
        out = out[::-1]
        mask = mask[::-1] if mask is not None else None
    if not params.is_geometric_identity:
        matrix, offset = _affine(params, out.shape[:2])
        out = np.stack(
            [ndimage.affine_transform(out[..., c], matrix, offset, order=1, mode="constant",
                                      cval=BACKGROUND_VALUE) for c in range(out.shape[2])],
            axis=-1,
        ).astype(pixels.dtype)
        if mask is not None:
            mask = ndimage.affine_transform(mask, matrix, offset, order=0, mode="constant",
                                            cval=int(Label.NON_LABELLED))
    shifts = np.asarray(params.channel_shifts, dtype=pixels.dtype)
    if shifts.any() or params.rescale_min != 0.0 or params.rescale_max != 1.0:
        out = np.clip(out + shifts, 0.0, 1.0)
        out = params.rescale_min + (params.rescale_max - params.rescale_min) * out
        out = np.clip(out, 0.0, 1.0).astype(pixels.dtype)
    out = np.ascontiguousarray(out)
    if mask is not None:
        mask = np.ascontiguousarray(mask)
    return out, mask


def augment(patch: Patch, mask: np.ndarray, cfg: AugmentationConfig,
            rng: np.random.Generator | int | None = None) -> tuple[Patch, np.ndarray]:
    """Random flip/scale/rotate/translate (image and mask) plus intensity jitter (image only)."""
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(cfg.rng_seed if rng is None else rng)
    params = sample_augmentation(cfg, patch.pixels.shape[0], rng)
    pixels, mask = apply_augmentation(patch.pixels, mask, params)
    return replace(patch, pixels=pixels), mask
