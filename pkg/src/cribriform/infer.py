"""Whole-biopsy inference by centre-crop reassembly, and ensemble averaging."""

from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import BiopsyImage, CribriformError, Geometry, PixelScale, ShapeMismatch
from .network import Network
from .preprocess import BACKGROUND_VALUE, extract_window, od_background_mask, window_origins

PRED_MAGIC = b"CRBP"
CHUNK = 16


@dataclass(frozen=True)
class BiopsyPrediction:
    biopsy_id: str
    prob_map: np.ndarray
    provenance: tuple[str, ...] = ()
    scale: PixelScale = field(default_factory=PixelScale)

    @property
    def shape(self) -> tuple[int, int]:
        return self.prob_map.shape[0], self.prob_map.shape[1]

    def channel(self, label: int) -> np.ndarray:
        return self.prob_map[..., int(label)]


def nearest_origin(cells: int, origins: Sequence[int], geometry: Geometry) -> np.ndarray:
    """For each output cell along an axis, the window whose centre is closest (ties to the lower origin)."""
    f = geometry.factor
    centres = np.asarray(origins, dtype=np.float64) + geometry.patch_size / 2.0
    pos = (np.arange(cells) + 0.5) * f
    dist = np.abs(pos[:, None] - centres[None, :])
    return np.asarray(origins)[np.argmin(dist, axis=1)]


def assemble(outputs: dict[tuple[int, int], np.ndarray], grid: tuple[int, int],
             geometry: Geometry) -> np.ndarray:
    """Stitch per-window outputs keyed by pixel origin into one map, each cell written once."""
    rows = sorted({o[0] for o in outputs})
    cols = sorted({o[1] for o in outputs})
    f = geometry.factor
    h, w = grid
    row_src = nearest_origin(h, rows, geometry)
    col_src = nearest_origin(w, cols, geometry)
    n_classes = next(iter(outputs.values())).shape[-1]
    out = np.empty((h, w, n_classes), dtype=next(iter(outputs.values())).dtype)
    for r in range(h):
        ro = int(row_src[r])
        lr = r - ro // f
        for c in range(w):
            co = int(col_src[c])
            out[r, c] = outputs[(ro, co)][lr, c - co // f]
    return out


def _padded(pixels: np.ndarray, geometry: Geometry) -> np.ndarray:
    h, w = pixels.shape[:2]
    f, s = geometry.factor, geometry.patch_size
    ph = max(s, math.ceil(h / f) * f)
    pw = max(s, math.ceil(w / f) * f)
    if (ph, pw) == (h, w):
        return pixels
    out = np.full((ph, pw, 3), BACKGROUND_VALUE, dtype=pixels.dtype)
    out[:h, :w] = pixels
    return out


def infer_biopsy(net: Network, image: BiopsyImage, geometry: Geometry | None = None,
                 workers: int = 1, zero_background: bool = False, model_id: str = "") -> BiopsyPrediction:
    """Forward every stride-spaced window (no background filtering) and reassemble."""
    cfg = net.config
    geometry = geometry or Geometry(cfg.input_size, cfg.input_size // 2, cfg.factor)
    if geometry.patch_size != cfg.input_size or geometry.factor != cfg.factor:
        raise ShapeMismatch("geometry does not match the network")
    h, w = image.shape
    padded = _padded(image.pixels, geometry)
    ph, pw = padded.shape[:2]
    origins = [(r, c) for r in window_origins(ph, geometry.patch_size, geometry.stride)
               for c in window_origins(pw, geometry.patch_size, geometry.stride)]
    windows = np.stack([extract_window(padded, o, geometry.patch_size, BACKGROUND_VALUE) for o in origins])
    chunks = [slice(i, i + CHUNK) for i in range(0, len(origins), CHUNK)]
    # chunks are fixed by window index, so the result is the same for any worker count
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda sl: net.forward(windows[sl]), chunks))
    else:
        parts = [net.forward(windows[sl]) for sl in chunks]
    probs = np.concatenate(parts, axis=0)
    outputs = dict(zip(origins, probs))
    grid = (ph // geometry.factor, pw // geometry.factor)
    full = assemble(outputs, grid, geometry)
    out_h, out_w = math.ceil(h / geometry.factor), math.ceil(w / geometry.factor)
    prob_map = np.ascontiguousarray(full[:out_h, :out_w])
    if zero_background:
        prob_map = background_to_non_labelled(prob_map, image, geometry)
    scale = PixelScale(image.resolution, geometry.factor)
    return BiopsyPrediction(image.id, prob_map, (model_id,) if model_id else (), scale)


def background_to_non_labelled(prob_map: np.ndarray, image: BiopsyImage, geometry: Geometry) -> np.ndarray:
    """Move all probability of background-dominated cells to the non-labelled class."""
    bg = od_background_mask(image)
    f = geometry.factor
    h, w = prob_map.shape[:2]
    padded = np.ones((h * f, w * f), dtype=bool)
    padded[: bg.shape[0], : bg.shape[1]] = bg[: h * f, : w * f]
    frac = padded.reshape(h, f, w, f).mean(axis=(1, 3))
    out = prob_map.copy()
    cells = frac > 0.5
    out[cells] = 0.0
    out[cells, 0] = 1.0
    return out


def ensemble(predictions: Sequence[BiopsyPrediction]) -> BiopsyPrediction:
    """Cell-wise arithmetic mean of several predictions for one biopsy."""
    if not predictions:
        raise ValueError("nothing to ensemble")
    first = predictions[0]
    for p in predictions[1:]:
        if p.biopsy_id != first.biopsy_id:
            raise CribriformError(f"biopsy mismatch: {p.biopsy_id} vs {first.biopsy_id}")
        if p.prob_map.shape != first.prob_map.shape:
            raise ShapeMismatch("prediction shapes differ")
    acc = np.zeros(first.prob_map.shape, dtype=np.float64)
    for p in predictions:
        acc += p.prob_map
    mean = (acc / len(predictions)).astype(first.prob_map.dtype)
    provenance = tuple(x for p in predictions for x in p.provenance)
    return BiopsyPrediction(first.biopsy_id, mean, provenance, first.scale)


def infer_ensemble(nets: Sequence[Network], image: BiopsyImage, model_ids: Sequence[str] | None = None,
                   geometry: Geometry | None = None, workers: int = 1) -> BiopsyPrediction:
    model_ids = model_ids or [f"model{i}" for i in range(len(nets))]
    preds = [infer_biopsy(n, image, geometry, workers, model_id=m) for n, m in zip(nets, model_ids)]
    return ensemble(preds)


# -- storage -------------------------------------------------------------------

def save_prediction(pred: BiopsyPrediction, path: str | Path) -> None:
    grid = np.ascontiguousarray(pred.prob_map, dtype="<f4")
    header = {
        "biopsy_id": pred.biopsy_id,
        "shape": list(grid.shape),
        "scale": {"input_um_per_px": pred.scale.input_um_per_px,
                  "downsample_factor": pred.scale.downsample_factor},
        "provenance": list(pred.provenance),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    Path(path).write_bytes(PRED_MAGIC + struct.pack("<Q", len(blob)) + blob + grid.tobytes())


def load_prediction(path: str | Path) -> BiopsyPrediction:
    data = Path(path).read_bytes()
    if data[:4] != PRED_MAGIC or len(data) < 12:
        raise CribriformError(f"{path}: not a prediction file")
    (hlen,) = struct.unpack("<Q", data[4:12])
    try:
        header = json.loads(data[12 : 12 + hlen])
        shape = tuple(header["shape"])
    except (ValueError, KeyError, TypeError) as err:
        raise CribriformError(f"{path}: bad prediction header") from err
    body = data[12 + hlen :]
    if len(body) != 4 * int(np.prod(shape)):
        raise CribriformError(f"{path}: truncated prediction grid")
    grid = np.frombuffer(body, dtype="<f4")
    scale = PixelScale(header["scale"]["input_um_per_px"], header["scale"]["downsample_factor"])
    return BiopsyPrediction(header["biopsy_id"], grid.reshape(shape).astype(np.float32),
                            tuple(header["provenance"]), scale)


def save_heatmap(pred: BiopsyPrediction, label: int, path: str | Path) -> None:
    from PIL import Image

    channel = np.clip(pred.prob_map[..., int(label)], 0.0, 1.0)
    Image.fromarray(np.rint(channel * 255).astype(np.uint8), "L").save(path)
