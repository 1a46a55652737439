"""Case-aware stratified k-fold planning and the validation holdout."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .losses import ClassId


@dataclass
class FoldPlan:
    k: int
    seed: int
    assignment: dict  # case_id -> fold index
    slices: dict  # case_id -> [(slice_index, ClassId)]

    def test_cases(self, fold: int) -> list[str]:
        return [c for c, f in self.assignment.items() if f == fold]

    def train_cases(self, fold: int) -> list[str]:
        return [c for c, f in self.assignment.items() if f != fold]

    def fold_slices(self, fold: int) -> list[tuple[str, int, ClassId]]:
        return [(c, i, k) for c in self.test_cases(fold) for i, k in self.slices[c]]

    def class_counts(self, fold: int) -> np.ndarray:
        counts = np.zeros(len(ClassId), dtype=int)
        for _, _, k in self.fold_slices(fold):
            counts[int(k)] += 1
        return counts

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "seed": self.seed,
            "assignment": dict(sorted(self.assignment.items())),
            "folds": [
                [{"case_id": c, "slice_index": i, "chosen_class": k.name} for c, i, k in self.fold_slices(f)]
                for f in range(self.k)
            ],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "FoldPlan":
        d = json.loads(Path(path).read_text())
        slices: dict = {c: [] for c in d["assignment"]}
        for fold in d["folds"]:
            for e in fold:
                slices[e["case_id"]].append((e["slice_index"], ClassId[e["chosen_class"]]))
        return cls(d["k"], d["seed"], d["assignment"], slices)


def _class_vector(slices) -> np.ndarray:
    v = np.zeros(len(ClassId))
    for _, k in slices:
        v[int(k)] += 1
    return v


def stratified_group_kfold(cases, k: int = 5, seed: int = 0) -> FoldPlan:
    """Greedy assignment of whole cases to ``k`` folds, balancing slice classes.

    ``cases`` are :class:`~weakseg.dataset.Case` objects (or anything with
    ``case_id`` and ``annotated_slices``).  Cases are visited by descending
    slice count, then grouped by their most frequent class; each goes to the
    fold whose squared deviation from its proportional per-class target grows
    least.  Ties prefer the fold with fewer slices, then a seeded fold order.

    The greedy plan is then polished by single-case moves and pairwise swaps
    that shrink the worst relative gap between a fold's class proportions and
    the global ones; squared counts alone leave rare classes lopsided.
    """
    cases = list(cases)
    if k < 1 or len(cases) < k:
        raise ConfigurationError(f"need at least k={k} cases for {k}-fold splitting, got {len(cases)}")
    rng = np.random.default_rng(seed)
    vectors = {c.case_id: _class_vector(c.annotated_slices) for c in cases}
    target = sum(vectors.values()) / k
    jitter = rng.permutation(len(cases))
    fold_rank = rng.permutation(k)

    def key(item):
        i, c = item
        v = vectors[c.case_id]
        return (-v.sum(), int(np.argmax(v)) if v.sum() else len(ClassId), jitter[i])

    order = [c for _, c in sorted(enumerate(cases), key=key)]
    counts = np.zeros((k, len(ClassId)))
    sizes = np.zeros(k, dtype=int)
    assignment: dict[str, int] = {}
    for pos, case in enumerate(order):
        v = vectors[case.case_id]
        empty = [f for f in range(k) if sizes[f] == 0]
        candidates = empty if len(empty) >= len(order) - pos else range(k)
        best = min(
            candidates,
            key=lambda f: (
                float(np.sum((counts[f] + v - target) ** 2) - np.sum((counts[f] - target) ** 2)),
                counts[f].sum(),
                fold_rank[f],
            ),
        )
        counts[best] += v
        sizes[best] += 1
        assignment[case.case_id] = int(best)
    _polish(assignment, [c.case_id for c in order], vectors, k)
    slices = {c.case_id: [(int(i), ClassId(x)) for i, x in c.annotated_slices] for c in cases}
    return FoldPlan(k, seed, {c.case_id: assignment[c.case_id] for c in cases}, slices)


def proportion_gap(counts: np.ndarray) -> tuple[float, float]:
    """(max, sum of squares) of ``|fold share / global share - 1|`` over present classes."""
    counts = np.asarray(counts, dtype=float)
    sizes = counts.sum(axis=1, keepdims=True)
    present = counts.sum(axis=0) > 0
    if not present.any():
        return 0.0, 0.0
    if np.any(sizes == 0):
        return math.inf, math.inf
    share = counts.sum(axis=0)[present] / counts.sum()
    rel = np.abs(counts[:, present] / sizes / share - 1.0)
    return float(rel.max()), float(np.sum(rel * rel))


def _polish(assignment: dict, order: list, vectors: dict, k: int) -> None:
    counts = np.zeros((k, len(ClassId)))
    members = np.zeros(k, dtype=int)
    for c in order:
        counts[assignment[c]] += vectors[c]
        members[assignment[c]] += 1
    best = proportion_gap(counts)
    improved = True
    while improved:
        improved = False
        for i, x in enumerate(order):
            fx = assignment[x]
            for f in range(k):
                if f == fx or members[fx] == 1:
                    continue
                trial = counts.copy()
                trial[fx] -= vectors[x]
                trial[f] += vectors[x]
                score = proportion_gap(trial)
                if score < best:
                    counts, best, fx = trial, score, f
                    members[assignment[x]] -= 1
                    members[f] += 1
                    assignment[x] = f
                    improved = True
            for y in order[i + 1 :]:
                fy = assignment[y]
                if fx == fy:
                    continue
                delta = vectors[y] - vectors[x]
                trial = counts.copy()
                trial[fx] += delta
                trial[fy] -= delta
                score = proportion_gap(trial)
                if score < best:
                    counts, best = trial, score
                    assignment[x], assignment[y] = fy, fx
                    fx = fy
                    improved = True


def validation_split(train_slices, fraction: float = 0.2, seed: int = 0, key=lambda s: s.chosen_class):
    """Slice-level holdout stratified by chosen class.

    Returns ``(train, validation)`` in input order; the validation set has
    ``round(fraction * n)`` slices (half rounds up), apportioned over classes
    by largest remainder.
    """
    items = list(train_slices)
    if not items:
        raise ConfigurationError("cannot split an empty training set")
    if not 0 < fraction < 1:
        raise ConfigurationError(f"validation fraction must lie in (0, 1), got {fraction}")
    n = len(items)
    n_val = int(math.floor(fraction * n + 0.5))
    if n >= 2:
        n_val = min(max(n_val, 1), n - 1)
    rng = np.random.default_rng(seed)

    groups: dict[int, list[int]] = {}
    for i, s in enumerate(items):
        groups.setdefault(int(key(s)), []).append(i)
    classes = sorted(groups)
    quotas = {c: fraction * len(groups[c]) for c in classes}
    alloc = {c: int(math.floor(quotas[c])) for c in classes}
    tiebreak = rng.permutation(len(classes))
    by_remainder = sorted(
        range(len(classes)), key=lambda j: (-(quotas[classes[j]] - alloc[classes[j]]), tiebreak[j])
    )
    j = 0
    while sum(alloc.values()) < n_val:
        c = classes[by_remainder[j % len(classes)]]
        if alloc[c] < len(groups[c]):
            alloc[c] += 1
        j += 1
    while sum(alloc.values()) > n_val:
        c = classes[by_remainder[-1 - (j % len(classes))]]
        if alloc[c] > 0:
            alloc[c] -= 1
        j += 1

    val_idx = set()
    for c in classes:
        members = groups[c]
        picked = rng.permutation(len(members))[: alloc[c]]
        val_idx.update(members[p] for p in picked)
    train = [s for i, s in enumerate(items) if i not in val_idx]
    val = [s for i, s in enumerate(items) if i in val_idx]
    return train, val
