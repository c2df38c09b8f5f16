"""Command line entry point: ``cribriform <subcommand> [flags]``.

Every subcommand reads a JSON config (``--config``), lets flags override it,
and writes its outputs plus a ``manifest.json`` echoing the resolved config,
package versions, seeds and input hashes. Exit codes: 0 success, 1 invalid
configuration or input, 2 failure while running.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .core import (
    DESK_GEOMETRY,
    PAPER_GEOMETRY,
    WORKING_RESOLUTION,
    CribriformError,
    Geometry,
    Label,
    load_annotations,
    load_image,
    save_annotations,
    save_image,
)

log = logging.getLogger("cribriform")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
COMMANDS = ("synth", "tile", "split-folds", "train", "infer", "evaluate", "kappa", "overlay")


class ConfigError(Exception):
    """Invalid flag, config value or missing input; ``field`` names the culprit."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class TrainSettings:
    iterations: int = 2000
    snapshot_every: int = 250
    alphas: list = field(default_factory=lambda: [0.2, 0.3, 0.4, 1.0])
    repeats: int = 4
    learning_rate: float = 0.01
    decay: float = 5e-4
    momentum: float = 0.99
    eps: float = 1e-6
    augment: bool = True


@dataclass
class SynthSettings:
    n_biopsies: int = 40
    height: int = 192
    width: int = 320
    min_biopsies_per_label: int = 0


@dataclass
class PipelineConfig:
    # paths
    images: str | None = None
    annotations: str | None = None
    output: str | None = None
    tiles: str | None = None
    folds: str | None = None
    models: str | None = None
    predictions: str | None = None
    votes: str | None = None
    contours: str | None = None
    image: str | None = None
    prediction: str | None = None
    biopsies: list | None = None
    # pipeline settings
    profile: str = "desk"
    resolution: float = WORKING_RESOLUTION
    seed: int = 0
    fold_seed: int | None = None
    n_folds: int = 8
    test_fold: int = 0
    synth: SynthSettings = field(default_factory=SynthSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    cutoffs: list | None = None
    region_filter: bool = False
    min_area_mm2: float = 0.0150
    connectivity: int = 4
    fp_over: str = "all"
    heatmaps: bool = False
    workers: int | None = None

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        if "config" in data and isinstance(data["config"], dict):
            # a manifest: rerun from its echoed config
            data = dict(data["config"])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown config field")
        nested = {"synth": SynthSettings, "train": TrainSettings}
        for key, kind in nested.items():
            if key in data:
                sub = dict(data[key])
                bad = sorted(set(sub) - {f.name for f in dataclasses.fields(kind)})
                if bad:
                    raise ConfigError(f"{key}.{bad[0]}", "unknown config field")
                data[key] = kind(**sub)
        return cls(**data)

    def validate(self):
        if self.profile not in ("desk", "paper"):
            raise ConfigError("profile", "must be 'desk' or 'paper'")
        if self.connectivity not in (4, 8):
            raise ConfigError("connectivity", "must be 4 or 8")
        if self.fp_over not in ("all", "negative"):
            raise ConfigError("fp_over", "must be 'all' or 'negative'")
        if self.resolution <= 0:
            raise ConfigError("resolution", "must be positive")
        if self.min_area_mm2 < 0:
            raise ConfigError("min_area_mm2", "must be non-negative")
        if self.n_folds < 2:
            raise ConfigError("n_folds", "need at least two folds")
        if not 0 <= self.test_fold < self.n_folds:
            raise ConfigError("test_fold", f"outside 0..{self.n_folds - 1}")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers", "must be at least 1")
        t = self.train
        if t.iterations < 0:
            raise ConfigError("train.iterations", "must be non-negative")
        if t.snapshot_every < 1:
            raise ConfigError("train.snapshot_every", "must be at least 1")
        if t.repeats < 1:
            raise ConfigError("train.repeats", "must be at least 1")
        if not t.alphas or any(not 0.0 <= a <= 1.0 for a in t.alphas):
            raise ConfigError("train.alphas", "values must lie in [0, 1]")
        if self.cutoffs is not None and any(not 0.0 <= c <= 1.0 for c in self.cutoffs):
            raise ConfigError("cutoffs", "values must lie in [0, 1]")
        s = self.synth
        if s.n_biopsies < 1 or s.height < 8 or s.width < 8:
            raise ConfigError("synth", "need at least one biopsy of at least 8x8 pixels")

    @property
    def geometry(self) -> Geometry:
        return DESK_GEOMETRY if self.profile == "desk" else PAPER_GEOMETRY

    @property
    def network(self):
        from .network import DESK_NETWORK, PAPER_NETWORK

        return DESK_NETWORK if self.profile == "desk" else PAPER_NETWORK

    @property
    def n_workers(self) -> int:
        return self.workers or os.cpu_count() or 1

    @property
    def min_area(self) -> float | None:
        return self.min_area_mm2 if self.region_filter else None


# -- argument parsing ----------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError("arguments", message)


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file (or a previous manifest)")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", dest="output", help="output directory or file")
    p.add_argument("--profile", choices=["desk", "paper"])
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cribriform", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"cribriform {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    _common(p)
    p.add_argument("--n", dest="synth.n_biopsies", type=int)
    p.add_argument("--height", dest="synth.height", type=int)
    p.add_argument("--width", dest="synth.width", type=int)
    p.add_argument("--min-per-label", dest="synth.min_biopsies_per_label", type=int)

    p = sub.add_parser("tile", help="tile biopsies into patches and label maps")
    _common(p)
    p.add_argument("--images")
    p.add_argument("--annotations")
    p.add_argument("--resolution", type=float)

    p = sub.add_parser("split-folds", help="assign biopsies to cross-validation folds")
    _common(p)
    p.add_argument("--annotations")
    p.add_argument("--n-folds", dest="n_folds", type=int)

    p = sub.add_parser("train", help="train the ensemble for one test fold")
    _common(p)
    p.add_argument("--tiles")
    p.add_argument("--folds")
    p.add_argument("--test-fold", dest="test_fold", type=int)
    p.add_argument("--iterations", dest="train.iterations", type=int)
    p.add_argument("--snapshot-every", dest="train.snapshot_every", type=int)
    p.add_argument("--alpha", dest="train.alphas", type=float, action="append")
    p.add_argument("--repeats", dest="train.repeats", type=int)
    p.add_argument("--no-augment", dest="train.augment", action="store_const", const=False)

    p = sub.add_parser("infer", help="predict whole biopsies with a trained ensemble")
    _common(p)
    p.add_argument("--models")
    p.add_argument("--images")
    p.add_argument("--folds")
    p.add_argument("--test-fold", dest="test_fold", type=int)
    p.add_argument("--biopsy", dest="biopsies", action="append")
    p.add_argument("--heatmaps", action="store_const", const=True)
    p.add_argument("--resolution", type=float)

    p = sub.add_parser("evaluate", help="biopsy ROC and annotation FROC")
    _common(p)
    p.add_argument("--predictions")
    p.add_argument("--images")
    p.add_argument("--annotations")
    p.add_argument("--cutoff", dest="cutoffs", type=float, action="append")
    p.add_argument("--min-area", dest="min_area_mm2", type=float)
    p.add_argument("--connectivity", type=int, choices=[4, 8])
    p.add_argument("--fp-over", dest="fp_over", choices=["all", "negative"])

    p = sub.add_parser("kappa", help="network versus rater panel agreement")
    _common(p)
    p.add_argument("--votes")
    p.add_argument("--predictions")
    p.add_argument("--contours")
    p.add_argument("--cutoff", dest="cutoffs", type=float, action="append")

    p = sub.add_parser("overlay", help="TP/FN/FP overlay of one biopsy")
    _common(p)
    p.add_argument("--image")
    p.add_argument("--annotations")
    p.add_argument("--prediction")
    p.add_argument("--cutoff", dest="cutoffs", type=float, action="append")
    p.add_argument("--min-area", dest="min_area_mm2", type=float)
    p.add_argument("--connectivity", type=int, choices=[4, 8])
    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    """Defaults, then the config file, then flags."""
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError("config", f"{path} not found")
        try:
            cfg = PipelineConfig.from_json(json.loads(path.read_text()))
        except (json.JSONDecodeError, TypeError) as err:
            raise ConfigError("config", str(err)) from err
    else:
        cfg = PipelineConfig()
    skip = {"command", "config", "verbose"}
    for key, value in vars(args).items():
        if key in skip or value is None:
            continue
        if "." in key:
            group, name = key.split(".")
            setattr(getattr(cfg, group), name, value)
        else:
            setattr(cfg, key, value)
    if args.command in ("evaluate", "overlay") and args.min_area_mm2 is not None:
        cfg.region_filter = True
    cfg.validate()
    return cfg


# -- manifests -----------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def hash_inputs(paths: Sequence[Path], root: Path | None = None) -> dict[str, str]:
    out = {}
    for p in sorted(paths):
        key = str(p.relative_to(root)) if root else str(p)
        out[key] = _sha256(p)
    return out


def versions() -> dict[str, str]:
    import PIL
    import scipy

    return {"cribriform": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "pillow": PIL.__version__}


def write_manifest(out_dir: Path, command: str, cfg: PipelineConfig, inputs: dict[str, str],
                   seeds: dict[str, Any], outputs: list[str], extra: dict | None = None,
                   name: str = "manifest.json") -> Path:
    manifest = {"command": command, "config": cfg.to_json(), "versions": versions(), "seeds": seeds,
                "inputs": inputs, "outputs": sorted(outputs)}
    if extra:
        manifest.update(extra)
    path = out_dir / name
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _require(cfg: PipelineConfig, name: str, kind: str = "dir") -> Path:
    value = getattr(cfg, name)
    if value is None:
        raise ConfigError(name, "required")
    path = Path(value)
    if kind == "dir" and not path.is_dir():
        raise ConfigError(name, f"directory {path} not found")
    if kind == "file" and not path.is_file():
        raise ConfigError(name, f"file {path} not found")
    return path


def _output_dir(cfg: PipelineConfig) -> Path:
    if cfg.output is None:
        raise ConfigError("output", "required (--out)")
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _image_files(images: Path, field_name: str = "images") -> list[Path]:
    files = sorted(p for p in images.glob("*.png") if p.with_suffix(".json").is_file())
    if not files:
        raise ConfigError(field_name, f"no images with metadata sidecars in {images}")
    return files


def _annotation_file(annotations: Path, biopsy_id: str) -> Path:
    path = annotations / f"{biopsy_id}.json"
    if not path.is_file():
        raise ConfigError("annotations", f"no annotation file for biopsy {biopsy_id}")
    return path


def _load_biopsies(cfg: PipelineConfig, ids: Sequence[str] | None = None):
    from .pipeline import prepare_biopsy

    images = _require(cfg, "images")
    annotations = _require(cfg, "annotations")
    files = _image_files(images)
    out, used = [], []
    for f in files:
        image = load_image(f)
        if ids is not None and image.id not in ids:
            continue
        ann_path = _annotation_file(annotations, image.id)
        out.append(prepare_biopsy(image, load_annotations(ann_path), cfg.resolution))
        used += [f, f.with_suffix(".json"), ann_path]
    return out, used


# -- subcommands ---------------------------------------------------------------

def cmd_synth(cfg: PipelineConfig) -> int:
    from .synth import SynthConfig, generate

    out = _output_dir(cfg)
    scfg = SynthConfig(n_biopsies=cfg.synth.n_biopsies, height=cfg.synth.height, width=cfg.synth.width,
                       seed=cfg.seed, min_biopsies_per_label=cfg.synth.min_biopsies_per_label,
                       resolution=cfg.resolution)
    (out / "images").mkdir(exist_ok=True)
    (out / "annotations").mkdir(exist_ok=True)
    outputs = []
    for image, ann in generate(scfg):
        save_image(image, out / "images" / f"{image.id}.png")
        save_annotations(ann, out / "annotations" / f"{image.id}.json")
        outputs += [f"images/{image.id}.png", f"images/{image.id}.json", f"annotations/{image.id}.json"]
    write_manifest(out, "synth", cfg, {}, {"seed": cfg.seed}, outputs, {"synth_config": scfg.to_json()})
    print(f"wrote {scfg.n_biopsies} biopsies to {out}")
    return EXIT_OK


def cmd_tile(cfg: PipelineConfig) -> int:
    from PIL import Image

    from .preprocess import extract_window, tile_biopsy

    biopsies, used = _load_biopsies(cfg, cfg.biopsies)
    out = _output_dir(cfg)
    geometry = cfg.geometry
    (out / "patches").mkdir(exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    index = []
    for b in biopsies:
        for patch in tile_biopsy(b.image, b.background, geometry):
            r, c = patch.origin
            stem = f"{b.id}_{r:05d}_{c:05d}"
            mask = extract_window(b.label_map, patch.origin, geometry.patch_size, int(Label.NON_LABELLED))
            Image.fromarray(np.rint(patch.pixels * 255).astype(np.uint8), "RGB").save(out / "patches" / f"{stem}.png")
            Image.fromarray(mask.astype(np.uint8), "L").save(out / "masks" / f"{stem}.png")
            index.append({"biopsy_id": b.id, "origin": [r, c], "bg_frac": patch.bg_frac,
                          "patch": f"patches/{stem}.png", "mask": f"masks/{stem}.png"})
    doc = {"geometry": dataclasses.asdict(geometry), "resolution": cfg.resolution, "patches": index}
    (out / "index.json").write_text(json.dumps(doc, indent=2))
    write_manifest(out, "tile", cfg, hash_inputs(used), {}, ["index.json"] + [e["patch"] for e in index]
                   + [e["mask"] for e in index])
    print(f"wrote {len(index)} patches from {len(biopsies)} biopsies to {out}")
    return EXIT_OK


def cmd_split_folds(cfg: PipelineConfig) -> int:
    from .folds import partition, profiles_from_annotations

    annotations = _require(cfg, "annotations")
    files = sorted(annotations.glob("*.json"))
    if not files:
        raise ConfigError("annotations", f"no annotation files in {annotations}")
    anns = [load_annotations(f) for f in files]
    profiles = profiles_from_annotations(anns)
    if cfg.n_folds > len(profiles):
        raise ConfigError("n_folds", f"{cfg.n_folds} folds but only {len(profiles)} biopsies")
    seed = cfg.seed if cfg.fold_seed is None else cfg.fold_seed
    assignment = partition(profiles, cfg.n_folds, seed)
    out = Path(cfg.output) if cfg.output else None
    if out is None:
        raise ConfigError("output", "required (--out)")
    out.mkdir(parents=True, exist_ok=True)
    (out / "folds.json").write_text(json.dumps(assignment.to_json(profiles), indent=2, sort_keys=True))
    write_manifest(out, "split-folds", cfg, hash_inputs(files), {"fold_seed": seed}, ["folds.json"])
    for row in assignment.table(profiles)["folds"]:
        crib = row["labels"][Label.G4_CRIBRIFORM.display_name]
        print(f"fold {row['fold']}: {row['n_biopsies']} biopsies, {row['total_regions']} regions, "
              f"cribriform {crib['regions']}/{crib['biopsies']}")
    return EXIT_OK


def _folds_file(cfg: PipelineConfig):
    from .folds import FoldAssignment

    path = _require(cfg, "folds", kind="any")
    if path.is_dir():
        path = path / "folds.json"
    if not path.is_file():
        raise ConfigError("folds", f"{path} not found")
    return path, FoldAssignment.from_json(json.loads(path.read_text()))


def _load_tiles(tiles: Path, geometry: Geometry):
    from PIL import Image

    from .optim import TrainingSample
    from .preprocess import downsample_mask

    index_path = tiles / "index.json"
    if not index_path.is_file():
        raise ConfigError("tiles", f"{index_path} not found")
    doc = json.loads(index_path.read_text())
    if Geometry(**doc["geometry"]) != geometry:
        raise ConfigError("tiles", f"tiled with {doc['geometry']}, profile expects {dataclasses.asdict(geometry)}")
    samples = {}
    for e in doc["patches"]:
        with Image.open(tiles / e["patch"]) as im:
            pixels = (np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0)
        with Image.open(tiles / e["mask"]) as im:
            label_map = np.asarray(im, dtype=np.int64)
        s = TrainingSample(e["biopsy_id"], tuple(e["origin"]), pixels, label_map,
                           downsample_mask(label_map, geometry))
        samples.setdefault(e["biopsy_id"], []).append(s)
    return index_path, samples


def cmd_train(cfg: PipelineConfig) -> int:
    from .folds import fold_roles
    from .optim import TrainRunConfig
    from .pipeline import ensemble_members, train_ensemble

    tiles = _require(cfg, "tiles")
    folds_path, assignment = _folds_file(cfg)
    if not 0 <= cfg.test_fold < assignment.n_folds:
        raise ConfigError("test_fold", f"outside 0..{assignment.n_folds - 1}")
    index_path, by_biopsy = _load_tiles(tiles, cfg.geometry)
    train_f, val_f, test_f = fold_roles(assignment, cfg.test_fold)
    fold_of = assignment.assignments
    order = sorted(by_biopsy)
    train_s = [s for b in order if fold_of.get(b) in train_f for s in by_biopsy[b]]
    val_s = [s for b in order if fold_of.get(b) == val_f for s in by_biopsy[b]]
    if not val_s:
        raise ConfigError("folds", f"validation fold {val_f} has no patches")
    t = cfg.train
    run = TrainRunConfig(iterations=t.iterations, snapshot_every=t.snapshot_every, alphas=tuple(t.alphas),
                         seed=cfg.seed, learning_rate=t.learning_rate, decay=t.decay, momentum=t.momentum,
                         eps=t.eps, augment=t.augment)
    out = _output_dir(cfg)
    results = train_ensemble(train_s, val_s, cfg.geometry, cfg.network, run, t.repeats, cfg.n_workers)
    outputs, runs = [], []
    for k, res in enumerate(results):
        run_dir = out / f"run{k}"
        run_dir.mkdir(exist_ok=True)
        for i, snap in enumerate(res.snapshots):
            name = f"run{k}/snap{i:03d}.crbw"
            (out / name).write_bytes(snap.weights)
            outputs.append(name)
        m = res.manifest()
        m["seed"] = run.seed + k
        for s in m["snapshots"]:
            s["file"] = f"run{k}/snap{s['id']:03d}.crbw"
        runs.append(m)
    # one member per (run, alpha), in the same order as ensemble_members
    members = [{"id": f"run{k}_alpha{a}_snap{i}", "file": f"run{k}/snap{i:03d}.crbw"}
               for k, res in enumerate(results) for a, i in sorted(res.selected.items())]
    assert [m["id"] for m in members] == [mid for mid, _ in ensemble_members(results)]
    (out / "ensemble.json").write_text(json.dumps({"members": members}, indent=2))
    outputs.append("ensemble.json")
    seeds = {"train_seeds": [run.seed + k for k in range(t.repeats)]}
    extra = {"folds": {"test": test_f, "validation": val_f, "train": train_f},
             "n_train_patches": len(train_s), "n_val_patches": len(val_s), "runs": runs,
             "network": cfg.network.to_json()}
    write_manifest(out, "train", cfg, hash_inputs([index_path, folds_path]), seeds, outputs, extra)
    print(f"trained {len(results)} runs, {len(members)} ensemble members -> {out}")
    return EXIT_OK


def _ensemble_file(models: Path) -> list[tuple[str, bytes, Path]]:
    path = models / "ensemble.json"
    if not path.is_file():
        raise ConfigError("models", f"{path} not found")
    doc = json.loads(path.read_text())
    out = []
    for m in doc["members"]:
        f = models / m["file"]
        if not f.is_file():
            raise ConfigError("models", f"member file {f} missing")
        out.append((m["id"], f.read_bytes(), f))
    if not out:
        raise ConfigError("models", "ensemble has no members")
    return out


def cmd_infer(cfg: PipelineConfig) -> int:
    from .infer import ensemble, infer_biopsy, save_heatmap, save_prediction
    from .network import load_weights
    from .preprocess import resample_to_working_resolution

    models = _require(cfg, "models")
    members = _ensemble_file(models)
    images = _require(cfg, "images")
    files = _image_files(images)
    ids = cfg.biopsies
    used = [path for _, _, path in members] + [models / "ensemble.json"]
    if cfg.folds is not None:
        folds_path, assignment = _folds_file(cfg)
        fold_ids = set(assignment.members(cfg.test_fold))
        ids = sorted(fold_ids if ids is None else fold_ids & set(ids))
        used.append(folds_path)
    nets = [(mid, load_weights(data)) for mid, data, _ in members]
    out = _output_dir(cfg)
    outputs = []
    for f in files:
        image = load_image(f)
        if ids is not None and image.id not in ids:
            continue
        used += [f, f.with_suffix(".json")]
        image = resample_to_working_resolution(image, cfg.resolution)
        preds = [infer_biopsy(net, image, None, cfg.n_workers, model_id=mid) for mid, net in nets]
        pred = ensemble(preds)
        save_prediction(pred, out / f"{image.id}.crbp")
        outputs.append(f"{image.id}.crbp")
        if cfg.heatmaps:
            save_heatmap(pred, Label.G4_CRIBRIFORM, out / f"{image.id}_cribriform.png")
            outputs.append(f"{image.id}_cribriform.png")
    if not outputs:
        raise ConfigError("biopsies", "no images selected for inference")
    write_manifest(out, "infer", cfg, hash_inputs(used), {}, outputs, {"members": [m for m, _, _ in members]})
    print(f"wrote {sum(o.endswith('.crbp') for o in outputs)} predictions to {out}")
    return EXIT_OK


def _load_predictions(directory: Path, ids: Sequence[str] | None = None):
    from .infer import load_prediction

    files = sorted(directory.glob("*.crbp"))
    preds = [load_prediction(f) for f in files]
    if ids is not None:
        keep = [(p, f) for p, f in zip(preds, files) if p.biopsy_id in ids]
        preds, files = [p for p, _ in keep], [f for _, f in keep]
    return preds, files


def _write_curve(path: Path, rows: list[dict]):
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def cmd_evaluate(cfg: PipelineConfig) -> int:
    from .pipeline import evaluate_predictions

    predictions = _require(cfg, "predictions")
    preds, pred_files = _load_predictions(predictions, cfg.biopsies)
    if not preds:
        raise ConfigError("predictions", f"no .crbp files in {predictions}")
    biopsies, used = _load_biopsies(cfg, [p.biopsy_id for p in preds])
    by_id = {b.id: b for b in biopsies}
    missing = [p.biopsy_id for p in preds if p.biopsy_id not in by_id]
    if missing:
        raise ConfigError("images", f"no image for biopsies {missing}")
    biopsies = [by_id[p.biopsy_id] for p in preds]
    report = evaluate_predictions(preds, biopsies, cfg.cutoffs, cfg.min_area, cfg.connectivity, cfg.fp_over)
    out = _output_dir(cfg)
    (out / "report.json").write_text(json.dumps(report, indent=2))
    _write_curve(out / "roc.csv", report["roc"])
    _write_curve(out / "froc.csv", report["froc"])
    write_manifest(out, "evaluate", cfg, hash_inputs(list(pred_files) + used), {},
                   ["report.json", "roc.csv", "froc.csv"])
    auc = report["auc"]
    print("AUC", "undefined (needs positive and negative biopsies)" if auc is None else f"{auc:.6f}")
    for p in _operating_points(report["froc"]):
        print(f"FROC cutoff {p['cutoff']:.6g}: sensitivity {p['sensitivity']:.3f} "
              f"at {p['mean_fp_per_biopsy']:.3f} FP/biopsy")
    return EXIT_OK


def _operating_points(froc: list[dict], targets=(0.5, 0.75, 0.9, 1.0)) -> list[dict]:
    """Highest cutoff reaching each target sensitivity."""
    out = []
    for t in targets:
        hits = [p for p in froc if p["sensitivity"] >= t]
        if hits:
            best = max(hits, key=lambda p: p["cutoff"])
            if best not in out:
                out.append(best)
    return out


def cmd_kappa(cfg: PipelineConfig) -> int:
    from .evaluation import INTEROBSERVER_CUTOFFS, RaterMatrix, interobserver_compare
    from .preprocess import rasterize_polygon

    votes_path = _require(cfg, "votes", kind="file")
    contours_path = _require(cfg, "contours", kind="file")
    predictions = _require(cfg, "predictions")
    doc = json.loads(votes_path.read_text())
    for key in ("image_ids", "votes"):
        if key not in doc:
            raise ConfigError("votes", f"missing key '{key}'")
    raters = RaterMatrix(np.asarray(doc["votes"]), tuple(doc["image_ids"]))
    preds, pred_files = _load_predictions(predictions)
    by_id = {p.biopsy_id: p for p in preds}
    missing = [i for i in raters.image_ids if i not in by_id]
    if missing:
        raise ConfigError("predictions", f"no prediction for images {missing}")
    contour_doc = json.loads(contours_path.read_text())
    contours = []
    for i in raters.image_ids:
        pred = by_id[i]
        poly = contour_doc.get(i)
        if poly is None:
            contours.append(None)
            continue
        # cell centres inside the contour, polygon given in input-pixel coordinates
        f = pred.scale.downsample_factor
        scaled = [(x / f, y / f) for x, y in poly]
        contours.append(rasterize_polygon(scaled, pred.shape))
    cutoffs = cfg.cutoffs if cfg.cutoffs is not None else list(INTEROBSERVER_CUTOFFS)
    report = interobserver_compare(raters, [by_id[i] for i in raters.image_ids], contours, cutoffs)
    out = _output_dir(cfg)
    (out / "kappa.json").write_text(json.dumps(report, indent=2))
    write_manifest(out, "kappa", cfg, hash_inputs([votes_path, contours_path] + list(pred_files)), {},
                   ["kappa.json"])
    print(f"rater-rater kappa {report['rater_rater_kappa']:.4f}")
    for row in report["cutoffs"]:
        print(f"cutoff {row['cutoff']:.4g}: network-rater kappa {row['network_rater_kappa']:.4f}")
    for image_id, err in report["errors"].items():
        print(f"skipped {image_id}: {err}", file=sys.stderr)
    return EXIT_OK


def cmd_overlay(cfg: PipelineConfig) -> int:
    from PIL import Image

    from .evaluation import annotated_region_masks, extract_regions, filter_regions, overlay
    from .infer import load_prediction
    from .pipeline import prepare_biopsy

    image_path = _require(cfg, "image", kind="file")
    ann_path = _require(cfg, "annotations", kind="file")
    pred_path = _require(cfg, "prediction", kind="file")
    if cfg.output is None:
        raise ConfigError("output", "required (--out)")
    cutoffs = cfg.cutoffs or [0.5]
    if len(cutoffs) != 1:
        raise ConfigError("cutoffs", "overlay takes a single --cutoff")
    pred = load_prediction(pred_path)
    b = prepare_biopsy(load_image(image_path), load_annotations(ann_path), cfg.resolution)
    factor = pred.scale.downsample_factor
    ref = np.zeros(pred.shape, dtype=bool)
    for m in annotated_region_masks(b.annotations, b.label_map, factor):
        ref |= m
    regions = extract_regions(pred, cutoff=cutoffs[0], connectivity=cfg.connectivity)
    if cfg.min_area is not None:
        regions = filter_regions(regions, cfg.min_area)
    predicted = np.zeros(pred.shape, dtype=bool)
    for r in regions:
        for rc in r.pixel_coords:
            predicted[rc] = True
    out_path = Path(cfg.output)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(overlay(b.image, ref, predicted, factor)).save(out_path)
    write_manifest(out_path.parent, "overlay", cfg, hash_inputs([image_path, ann_path, pred_path]), {},
                   [out_path.name], name=f"{out_path.stem}.manifest.json")
    print(f"wrote {out_path}")
    return EXIT_OK


HANDLERS = {"synth": cmd_synth, "tile": cmd_tile, "split-folds": cmd_split_folds, "train": cmd_train,
            "infer": cmd_infer, "evaluate": cmd_evaluate, "kappa": cmd_kappa, "overlay": cmd_overlay}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    try:
        return HANDLERS[args.command](cfg)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except (CribriformError, ValueError, OSError, RuntimeError) as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
