"""Cross-validation fold assignment balanced on cribriform regions, then on all labels."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import N_LABELS, AnnotationSet, Label


@dataclass(frozen=True)
class BiopsyLabelProfile:
    biopsy_id: str
    region_count: tuple[int, ...]

    def __post_init__(self):
        if len(self.region_count) != N_LABELS or any(c < 0 for c in self.region_count):
            raise ValueError("region_count needs 7 non-negative entries")

    @property
    def has_cribriform(self) -> bool:
        return self.cribriform > 0

    @property
    def cribriform(self) -> int:
        return self.region_count[Label.G4_CRIBRIFORM]

    @property
    def total(self) -> int:
        return sum(self.region_count)

    @classmethod
    def from_annotations(cls, ann: AnnotationSet) -> "BiopsyLabelProfile":
        counts = [0] * N_LABELS
        for region in ann.regions:
            counts[region.label] += 1
        return cls(ann.biopsy_id, tuple(counts))


@dataclass(frozen=True)
class FoldAssignment:
    n_folds: int
    assignments: dict[str, int] = field(default_factory=dict)

    def members(self, fold: int) -> list[str]:
        return [b for b, f in self.assignments.items() if f == fold]

    def table(self, profiles: Sequence[BiopsyLabelProfile]) -> dict:
        """Per-fold ``regions/biopsies`` counts per label."""
        by_id = {p.biopsy_id: p for p in profiles}
        folds = []
        for k in range(self.n_folds):
            ids = self.members(k)
            rows = {}
            for label in Label:
                if label == Label.NON_LABELLED:
                    continue
                counts = [by_id[b].region_count[label] for b in ids]
                rows[label.display_name] = {"regions": int(sum(counts)),
                                            "biopsies": int(sum(c > 0 for c in counts))}
            folds.append({"fold": k, "n_biopsies": len(ids), "labels": rows,
                          "total_regions": int(sum(by_id[b].total for b in ids))})
        return {"folds": folds}

    def to_json(self, profiles: Sequence[BiopsyLabelProfile] | None = None) -> dict:
        out = {"n_folds": self.n_folds, "assignments": dict(sorted(self.assignments.items()))}
        if profiles is not None:
            out["table"] = self.table(profiles)["folds"]
        return out

    @classmethod
    def from_json(cls, data: dict) -> "FoldAssignment":
        return cls(int(data["n_folds"]), {k: int(v) for k, v in data["assignments"].items()})


def _tie_order(profiles: Sequence[BiopsyLabelProfile], seed: int | None) -> list[int]:
    order = list(range(len(profiles)))
    if seed is not None:
        order = list(np.random.default_rng(seed).permutation(len(profiles)))
    return order


def partition(profiles: Sequence[BiopsyLabelProfile], n_folds: int = 8, seed: int | None = 0) -> FoldAssignment:
    """Greedy two-phase split.

    Cribriform biopsies go first, largest cribriform count first, each into
    the fold with the lowest cribriform total. The rest follow by
    first-fit-decreasing on their total region count into the fold with the
    smallest grand total. ``seed`` only breaks ties between equal counts.
    """
    if n_folds < 2:
        raise ValueError("need at least two folds")
    if not profiles:
        raise ValueError("no biopsies to partition")
    if n_folds > len(profiles):
        raise ValueError(f"{n_folds} folds but only {len(profiles)} biopsies")
    ids = [p.biopsy_id for p in profiles]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate biopsy ids")

    tie = _tie_order(profiles, seed)
    rank = {i: r for r, i in enumerate(tie)}
    crib_tot = [0] * n_folds
    grand = [0] * n_folds
    count = [0] * n_folds
    out: dict[str, int] = {}

    crib = [i for i in range(len(profiles)) if profiles[i].has_cribriform]
    crib.sort(key=lambda i: (-profiles[i].cribriform, rank[i]))
    for i in crib:
        k = min(range(n_folds), key=lambda f: (crib_tot[f], f))
        out[profiles[i].biopsy_id] = k
        crib_tot[k] += profiles[i].cribriform
        grand[k] += profiles[i].total
        count[k] += 1

    rest = [i for i in range(len(profiles)) if not profiles[i].has_cribriform]
    rest.sort(key=lambda i: (-profiles[i].total, rank[i]))
    for i in rest:
        # empty folds win ties so no fold stays empty
        k = min(range(n_folds), key=lambda f: (grand[f], count[f], f))
        out[profiles[i].biopsy_id] = k
        grand[k] += profiles[i].total
        count[k] += 1
    return FoldAssignment(n_folds, {b: out[b] for b in ids})


def fold_roles(assignment: FoldAssignment | int, test_fold: int) -> tuple[list[int], int, int]:
    """``(train folds, validation fold, test fold)``; validation is the fold after the test fold."""
    n = assignment if isinstance(assignment, int) else assignment.n_folds
    if not 0 <= test_fold < n:
        raise ValueError(f"fold index {test_fold} outside 0..{n - 1}")
    val = (test_fold + 1) % n
    train = [f for f in range(n) if f not in (test_fold, val)]
    return train, val, test_fold


def profiles_from_annotations(annotations: Iterable[AnnotationSet]) -> list[BiopsyLabelProfile]:
    return [BiopsyLabelProfile.from_annotations(a) for a in annotations]
