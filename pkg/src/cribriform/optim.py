"""Weighted Dice/specificity losses, SGD, label-complete batching and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import N_LABELS, CribriformError, Geometry, Label
from .network import Network, NumericalInstability, load_weights, save_weights
from .preprocess import AugmentationConfig, apply_augmentation, downsample_mask, sample_augmentation

log = logging.getLogger(__name__)

DEFAULT_EPS = 1e-6
DEFAULT_ALPHAS = (0.2, 0.3, 0.4, 1.0)
MEMBERSHIP_THRESHOLD = 0.5


class LabelUnrepresented(CribriformError):
    def __init__(self, labels):
        self.labels = tuple(Label(l) for l in labels)
        super().__init__("no training patch contains: " + ", ".join(l.name for l in self.labels))


@dataclass(frozen=True)
class LossWeights:
    weights: tuple[float, ...] = (0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.4)

    def __post_init__(self):
        if len(self.weights) != N_LABELS:
            raise ValueError(f"need {N_LABELS} weights")
        if any(w < 0 for w in self.weights) or not math.isclose(sum(self.weights), 1.0, abs_tol=1e-9):
            raise ValueError("loss weights must be non-negative and sum to 1")

    @classmethod
    def from_mapping(cls, mapping: Mapping[Label, float]) -> "LossWeights":
        return cls(tuple(float(mapping[Label(l)]) for l in range(N_LABELS)))

    def array(self, n: int | None = None) -> np.ndarray:
        w = np.asarray(self.weights, dtype=np.float64)
        if n is not None and n != len(w):
            raise ValueError(f"{n} classes but {len(w)} weights")
        return w


def _check(refs: np.ndarray, preds: np.ndarray):
    if refs.shape != preds.shape:
        raise ValueError(f"reference shape {refs.shape} != prediction shape {preds.shape}")
    if refs.ndim != 4:
        raise ValueError("expected (P, h, w, L) arrays")


def _weights(w, n):
    if w is None:
        return LossWeights().array() if n == N_LABELS else np.full(n, 1.0 / n)
    if isinstance(w, LossWeights):
        return w.array(n)
    return np.asarray(w, dtype=np.float64)


def dice_loss(refs, preds, weights=None, eps: float = DEFAULT_EPS):
    """Negative weighted soft Dice, averaged over the batch.

    Returns ``(loss, dloss/dpreds)``.
    """
    refs = np.asarray(refs, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.float64)
    _check(refs, preds)
    p = refs.shape[0]
    w = _weights(weights, refs.shape[-1])
    num = 2.0 * (refs * preds).sum(axis=(1, 2))          # (P, L)
    den = (refs + preds).sum(axis=(1, 2)) + eps
    loss = -float((w * num / den).sum()) / p
    coef = (-w / p)[None, None, None, :]
    grad = coef * (2.0 * refs * den[:, None, None, :] - num[:, None, None, :]) / (den ** 2)[:, None, None, :]
    return loss, grad


def specificity_loss(refs, preds, weights=None, eps: float = DEFAULT_EPS):
    """Negative weighted soft specificity, averaged over the batch. Returns ``(loss, grad)``."""
    refs = np.asarray(refs, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.float64)
    _check(refs, preds)
    p = refs.shape[0]
    w = _weights(weights, refs.shape[-1])
    neg_ref, neg_pred = 1.0 - refs, 1.0 - preds
    num = (neg_ref * neg_pred).sum(axis=(1, 2))
    den = neg_pred.sum(axis=(1, 2)) + eps
    loss = -float((w * num / den).sum()) / p
    coef = (-w / p)[None, None, None, :]
    grad = coef * (num[:, None, None, :] - neg_ref * den[:, None, None, :]) / (den ** 2)[:, None, None, :]
    return loss, grad


def validation_metric(dice: float, specificity: float, alpha: float) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha {alpha} outside [0, 1]")
    return alpha * dice + (1.0 - alpha) * specificity


# -- optimizer -----------------------------------------------------------------

@dataclass
class OptimizerState:
    learning_rate: float = 0.01
    decay: float = 5e-4
    momentum: float = 0.99
    iterations: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def effective_lr(self, t: int | None = None) -> float:
        t = self.iterations if t is None else t
        return self.learning_rate / (1.0 + self.decay * t)


def sgd_step(state: OptimizerState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
    """Momentum SGD with time-based learning-rate decay; updates ``params`` in place."""
    for name, g in grads.items():
        if name not in params or params[name].shape != g.shape:
            raise ValueError(f"gradient {name} does not match a parameter")
        if not np.isfinite(g).all():
            raise NumericalInstability(f"non-finite gradient for {name}; step refused")
    lr = state.effective_lr()
    for name, g in grads.items():
        p = params[name]
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = state.momentum * v - lr * g.astype(p.dtype, copy=False)
        state.velocity[name] = v.astype(p.dtype, copy=False)
        p += state.velocity[name]
    state.iterations += 1
    return params, state


# -- batching ------------------------------------------------------------------

@dataclass
class TrainingSample:
    """A training patch with its full-resolution label map and pooled reference."""

    biopsy_id: str
    origin: tuple[int, int]
    pixels: np.ndarray
    label_map: np.ndarray
    reference: np.ndarray

    @property
    def labels_present(self) -> frozenset[int]:
        flat = self.reference.reshape(-1, self.reference.shape[-1])
        return frozenset(int(l) for l in np.nonzero((flat >= MEMBERSHIP_THRESHOLD).any(axis=0))[0])


def label_index(samples: Sequence[TrainingSample]) -> dict[int, list[int]]:
    index = {l: [] for l in range(N_LABELS)}
    for i, s in enumerate(samples):
        for l in s.labels_present:
            index[l].append(i)
    return index


def compose_batch(samples: Sequence[TrainingSample], rng: np.random.Generator,
                  index: dict[int, list[int]] | None = None) -> list[TrainingSample]:
    """One patch per label (sampled uniformly among patches holding it), shuffled."""
    index = index if index is not None else label_index(samples)
    missing = [l for l in range(N_LABELS) if not index.get(l)]
    if missing:
        raise LabelUnrepresented(missing)
    chosen = [index[l][int(rng.integers(len(index[l])))] for l in range(N_LABELS)]
    order = rng.permutation(len(chosen))
    return [samples[chosen[i]] for i in order]


# -- training ------------------------------------------------------------------

@dataclass(frozen=True)
class TrainRunConfig:
    iterations: int = 2000
    batch_size: int = N_LABELS
    snapshot_every: int = 250
    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    seed: int = 0
    learning_rate: float = 0.01
    decay: float = 5e-4
    momentum: float = 0.99
    eps: float = DEFAULT_EPS
    augment: bool = True

    def __post_init__(self):
        if self.batch_size != N_LABELS:
            raise ValueError("batch size must equal the number of labels")
        if self.snapshot_every < 1 or self.iterations < 0:
            raise ValueError("invalid iteration settings")
        for a in self.alphas:
            if not 0.0 <= a <= 1.0:
                raise ValueError(f"alpha {a} outside [0, 1]")


@dataclass
class Snapshot:
    iteration: int
    weights: bytes
    dice: float
    specificity: float
    scores: dict[float, float]


@dataclass
class TrainResult:
    snapshots: list[Snapshot]
    selected: dict[float, int]
    aborted: bool = False
    train_loss: list[float] = field(default_factory=list)

    def selected_weights(self, alpha: float) -> bytes:
        return self.snapshots[self.selected[alpha]].weights

    def manifest(self) -> dict:
        return {
            "snapshots": [
                {"id": i, "iteration": s.iteration, "dice": s.dice, "specificity": s.specificity,
                 "V": {str(a): v for a, v in s.scores.items()}}
                for i, s in enumerate(self.snapshots)
            ],
            "selected": {str(a): i for a, i in self.selected.items()},
            "aborted": self.aborted,
        }


def evaluate_losses(net: Network, samples: Sequence[TrainingSample], weights: LossWeights,
                    eps: float = DEFAULT_EPS, batch_size: int = 16) -> tuple[float, float]:
    """Dice and specificity losses over a whole sample set (eval mode, no augmentation)."""
    if not samples:
        raise ValueError("empty validation set")
    x = np.stack([s.pixels for s in samples])
    refs = np.stack([s.reference for s in samples])
    preds = net.predict(x, batch_size)
    return dice_loss(refs, preds, weights, eps)[0], specificity_loss(refs, preds, weights, eps)[0]


def select_snapshots(snapshots: Sequence[Snapshot], alphas: Sequence[float]) -> dict[float, int]:
    selected = {}
    for a in alphas:
        scores = [s.scores[a] for s in snapshots]
        selected[a] = int(np.argmin(scores))  # argmin keeps the earliest on ties
    return selected


def train(net: Network, run: TrainRunConfig, train_samples: Sequence[TrainingSample],
          val_samples: Sequence[TrainingSample], geometry: Geometry,
          weights: LossWeights | None = None, aug: AugmentationConfig | None = None,
          progress=None) -> TrainResult:
    """Train with the Dice loss, snapshotting every ``snapshot_every`` iterations.

    For each alpha the snapshot minimising ``alpha*L_D + (1-alpha)*L_S`` on
    the validation set is selected.
    """
    weights = weights or LossWeights()
    aug = aug if aug is not None else AugmentationConfig()
    if not run.augment:
        aug = AugmentationConfig.disabled()
    index = label_index(train_samples)
    missing = [l for l in range(N_LABELS) if not index[l]]
    if missing:
        raise LabelUnrepresented(missing)
    rng = np.random.default_rng(run.seed)
    state = OptimizerState(run.learning_rate, run.decay, run.momentum)
    snapshots: list[Snapshot] = []
    losses: list[float] = []

    def snapshot(iteration):
        ld, ls = evaluate_losses(net, val_samples, weights, run.eps)
        scores = {a: validation_metric(ld, ls, a) for a in run.alphas}
        snapshots.append(Snapshot(iteration, save_weights(net, {"iteration": iteration}), ld, ls, scores))
        log.info("iteration %d: val dice %.4f spec %.4f", iteration, ld, ls)

    snapshot(0)
    aborted = False
    params = net.parameters()
    for it in range(1, run.iterations + 1):
        batch = compose_batch(train_samples, rng, index)
        xs, ys = [], []
        for s in batch:
            params_aug = sample_augmentation(aug, s.pixels.shape[0], rng)
            px, lm = apply_augmentation(s.pixels, s.label_map, params_aug)
            xs.append(px)
            ys.append(downsample_mask(lm, geometry))
        try:
            preds = net.forward(np.stack(xs), train=True)
            loss, grad = dice_loss(np.stack(ys), preds, weights, run.eps)
            grads = net.backward(grad)
            sgd_step(state, params, grads)
            if not all(np.isfinite(p).all() for p in params.values()):
                raise NumericalInstability("parameters became non-finite")
        except NumericalInstability as err:
            log.warning("aborting at iteration %d: %s", it, err)
            aborted = True
            load_weights(snapshots[-1].weights, into=net)
            break
        losses.append(loss)
        if progress is not None:
            progress(it, loss)
        if it % run.snapshot_every == 0:
            snapshot(it)
    return TrainResult(snapshots, select_snapshots(snapshots, run.alphas), aborted, losses)


def make_samples(patches, label_maps, geometry: Geometry) -> list[TrainingSample]:
    return [
        TrainingSample(p.biopsy_id, p.origin, p.pixels.astype(np.float32), lm,
                       downsample_mask(lm, geometry))
        for p, lm in zip(patches, label_maps)
    ]
