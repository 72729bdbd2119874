"""Weight-change statistics: delta ranking, top-k transplantation with
performance-retention curves, and cross-task key-weight overlap."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .data import DatasetHandle
from .importance import ScoreMap
from .masking import budget_count, select_topk, topk_indices
from .models import AlignmentError, Model, WeightBundle
from .trainer import evaluate

OVERLAP_GRID = (0.05, 0.01, 0.001, 0.0005)
CURVE_GRID = (0.0001, 0.001, 0.01, 0.05, 0.1, 0.25, 0.5, 1.0)


def weight_delta(ori: WeightBundle, ft: WeightBundle) -> ScoreMap:
    try:
        ori.check_aligned(ft)
    except AlignmentError as exc:
        raise AlignmentError(f"weight_delta: {exc}") from None
    d = np.abs(ft.flat.astype(np.float64) - ori.flat.astype(np.float64))
    return ScoreMap(d, "delta")


def transplant(ori: WeightBundle, ft: WeightBundle, k: float) -> WeightBundle:
    """Copy the top floor(k * N) most-changed weights of ``ft`` into ``ori``."""
    if not 0 <= k <= 1:
        raise ValueError(f"k must be in [0, 1], got {k}")
    delta = weight_delta(ori, ft)
    out = ori.copy()
    if k == 1:
        out.flat[:] = ft.flat
        return out
    count = budget_count(k, delta.values.size)
    idx = topk_indices(delta.values, count)
    out.flat[idx] = ft.flat[idx]
    return out


def transplant_oracle(ori: WeightBundle, ft: WeightBundle, k: float) -> np.ndarray:
    """Mask blend ``ori * (1 - M) + ft * M`` with M from :func:`select_topk`."""
    if budget_count(k, ori.flat.size) == 0:
        return ori.flat.copy()
    m = select_topk(weight_delta(ori, ft), k).bits
    return np.where(m, ft.flat, ori.flat)


@dataclass
class SparsityCurve:
    points: list  # (k, Metrics), k strictly increasing, endpoints k=0 and k=1 included

    def metric(self, name: str = "macro_f1") -> np.ndarray:
        return np.array([getattr(m, name) for _, m in self.points])

    @property
    def ks(self) -> np.ndarray:
        return np.array([k for k, _ in self.points])

    def retention(self, name: str = "macro_f1") -> np.ndarray:
        """(metric(k) - metric(0)) / (metric(1) - metric(0)); NaN when the
        fine-tuned model does not beat the starting point."""
        vals = self.metric(name)
        lo, hi = vals[0], vals[-1]
        if not hi > lo:
            return np.full(vals.shape, np.nan)
        return (vals - lo) / (hi - lo)

    def to_rows(self) -> list[dict]:
        ret_f1 = self.retention("macro_f1")
        ret_acc = self.retention("accuracy")
        return [
            {"k": k, "macro_f1": m.macro_f1, "accuracy": m.accuracy,
             "retention_f1": r1, "retention_acc": r2}
            for (k, m), r1, r2 in zip(self.points, ret_f1, ret_acc)
        ]


def sparsity_curve(model: Model, ori: WeightBundle, ft: WeightBundle, test: DatasetHandle,
                   k_grid=CURVE_GRID) -> SparsityCurve:
    """Evaluate ``model`` with transplanted weights at every k of the grid plus
    both endpoints; no training happens here."""
    ks = sorted({0.0, 1.0, *(float(k) for k in k_grid)})
    probe = model.copy()
    points = []
    for k in ks:
        probe.load_weights(transplant(ori, ft, k))
        points.append((k, evaluate(probe, test)))
    return SparsityCurve(points)


def overlap(a, b) -> float:
    """|A & B| / |A| for two masks of equal selected count."""
    a = np.asarray(getattr(a, "bits", a), dtype=bool)
    b = np.asarray(getattr(b, "bits", b), dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask lengths differ: {a.size} vs {b.size}")
    na, nb = int(a.sum()), int(b.sum())
    if na != nb:
        raise ValueError(f"overlap needs equal selected counts, got {na} and {nb}")
    if na == 0:
        raise ValueError("overlap of empty masks is undefined")
    return int(np.count_nonzero(a & b)) / na


def jaccard(a, b) -> float:
    a = np.asarray(getattr(a, "bits", a), dtype=bool)
    b = np.asarray(getattr(b, "bits", b), dtype=bool)
    union = int(np.count_nonzero(a | b))
    return int(np.count_nonzero(a & b)) / union if union else 1.0


def chance_overlap(n: int, k: float, trials: int = 200, seed: int = 0) -> tuple[float, float]:
    """Monte-Carlo mean and std of the overlap of two uniform random masks."""
    count = budget_count(k, n)
    rng = np.random.default_rng(seed)
    vals = np.empty(trials)
    for i in range(trials):
        a = np.zeros(n, dtype=bool)
        b = np.zeros(n, dtype=bool)
        a[rng.choice(n, count, replace=False)] = True
        b[rng.choice(n, count, replace=False)] = True
        vals[i] = overlap(a, b)
    return float(vals.mean()), float(vals.std())


@dataclass
class OverlapTable:
    rows: list = field(default_factory=list)  # dicts: task_a, task_b, k, overlap, jaccard
    k_grid: tuple = OVERLAP_GRID

    def mean_overlap(self, k: float) -> float:
        vals = [r["overlap"] for r in self.rows if r["k"] == k]
        return float(np.mean(vals)) if vals else float("nan")


def overlap_matrix(task_deltas: list, k_grid=OVERLAP_GRID, names: list | None = None,
                   scope: np.ndarray | None = None) -> OverlapTable:
    """Pairwise overlap of top-k delta masks for every unordered task pair."""
    if len(task_deltas) < 2:
        raise ValueError("overlap_matrix needs at least two tasks")
    sizes = {len(d) for d in task_deltas}
    if len(sizes) != 1:
        raise AlignmentError(f"task deltas have different lengths: {sorted(sizes)}")
    names = names or [f"task{i}" for i in range(len(task_deltas))]
    table = OverlapTable(k_grid=tuple(k_grid))
    masks = {(i, k): select_topk(d, k, scope) for i, d in enumerate(task_deltas) for k in k_grid}
    for i, j in itertools.combinations(range(len(task_deltas)), 2):
        for k in k_grid:
            a, b = masks[(i, k)], masks[(j, k)]
            table.rows.append({"task_a": names[i], "task_b": names[j], "k": k,
                               "overlap": overlap(a, b), "jaccard": jaccard(a, b)})
    return table
