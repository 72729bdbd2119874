"""Per-weight importance: task-specific gradient statistics, task-agnostic
weight magnitude, and their balanced hybrid."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import DatasetHandle, batch_iter
from .models import Model, WeightBundle, backbone_mask

STRATEGIES = ("L1", "L2")
KINDS = ("task-specific", "task-agnostic", "hybrid", "delta")
L1_MODES = ("abs-sum", "sum-abs")


@dataclass(frozen=True)
class ScoringConfig:
    """``l1_mode`` picks |sum_b g_b| ("abs-sum") or sum_b |g_b| ("sum-abs")."""

    strategy: str = "L2"
    lam: float = 1.0
    batches: int = 100
    batch_size: int = 32
    shuffle_seed: int = 0
    include_head: bool = False
    l1_mode: str = "abs-sum"

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.batches < 1 or self.batch_size < 1:
            raise ValueError("batches and batch_size must be >= 1")
        if self.l1_mode not in L1_MODES:
            raise ValueError(f"l1_mode must be one of {L1_MODES}")


@dataclass
class GradAccum:
    sum_grad: np.ndarray
    sum_sq_grad: np.ndarray
    sum_abs_grad: np.ndarray
    batches_seen: int = 0

    @classmethod
    def zeros(cls, n: int) -> "GradAccum":
        return cls(np.zeros(n), np.zeros(n), np.zeros(n), 0)

    def add(self, g: np.ndarray) -> None:
        g = g.astype(np.float64)
        self.sum_grad += g
        self.sum_sq_grad += g * g
        self.sum_abs_grad += np.abs(g)
        self.batches_seen += 1


@dataclass
class ScoreMap:
    values: np.ndarray
    kind: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.kind not in KINDS:
            raise ValueError(f"unknown score kind {self.kind!r}")
        if self.values.ndim != 1:
            raise ValueError("score values must be a flat vector")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("scores must be finite and non-negative")

    def __len__(self) -> int:
        return self.values.size


def accumulate_gradients(model: Model, dataset: DatasetHandle, config: ScoringConfig) -> GradAccum:
    """Gradient statistics over the first ``config.batches`` batches of one
    epoch, with the weights held fixed."""
    config.validate()
    if dataset.classes != model.classes:
        raise ValueError(f"model has {model.classes} outputs, dataset has {dataset.classes} classes")
    acc = GradAccum.zeros(model.n_params)
    names = model.registry
    for b, (x, y) in enumerate(batch_iter(dataset, config.batch_size, config.shuffle_seed)):
        if b >= config.batches:
            break
        _, g = model.loss_and_grad(x, y)
        if not np.all(np.isfinite(g)):
            bad = names.entry_at(int(np.flatnonzero(~np.isfinite(g))[0]))
            raise FloatingPointError(f"non-finite gradient in {bad.name} at batch {b}")
        acc.add(g)
    return acc


def score_task_specific(accum: GradAccum, strategy: str = "L2", l1_mode: str = "abs-sum") -> ScoreMap:
    if accum.batches_seen < 1:
        raise ValueError("gradient accumulation has not seen any batch")
    if strategy == "L1":
        vals = np.abs(accum.sum_grad) if l1_mode == "abs-sum" else accum.sum_abs_grad.copy()
    elif strategy == "L2":
        vals = accum.sum_sq_grad.copy()
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    return ScoreMap(vals, "task-specific", {"strategy": strategy, "batches": accum.batches_seen})


def score_task_agnostic(weights: WeightBundle | np.ndarray, strategy: str = "L2") -> ScoreMap:
    w = weights.flat if isinstance(weights, WeightBundle) else np.asarray(weights)
    w = w.astype(np.float64)
    if strategy == "L1":
        vals = np.abs(w)
    elif strategy == "L2":
        vals = w * w
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    return ScoreMap(vals, "task-agnostic", {"strategy": strategy})


def combine_hybrid(td: ScoreMap, ta: ScoreMap, lam: float = 1.0, scope: np.ndarray | None = None) -> ScoreMap:
    """``td + lam * beta * ta`` with ``beta = sum(td) / sum(ta)`` (0 if the
    agnostic mass is zero), so at ``lam=1`` both terms carry equal mass.

    ``scope`` (boolean, optional) restricts the two sums to the elements that
    compete for the budget.
    """
    if td.kind != "task-specific" or ta.kind != "task-agnostic":
        raise ValueError(f"combine_hybrid needs (task-specific, task-agnostic), got ({td.kind}, {ta.kind})")
    if len(td) != len(ta):
        raise ValueError(f"length mismatch: {len(td)} vs {len(ta)}")
    if scope is None:
        s_td, s_ta = td.values.sum(), ta.values.sum()
    else:
        s_td, s_ta = td.values[scope].sum(), ta.values[scope].sum()
    beta = s_td / s_ta if s_ta > 0 else 0.0
    vals = td.values + (lam * beta) * ta.values
    meta = {"strategy": td.meta.get("strategy"), "lambda": float(lam), "beta": float(beta)}
    return ScoreMap(vals, "hybrid", meta)


def hybrid_scores(model: Model, dataset: DatasetHandle, config: ScoringConfig) -> tuple[ScoreMap, ScoreMap, ScoreMap]:
    """Run the scoring pass and return (hybrid, task-specific, task-agnostic)."""
    accum = accumulate_gradients(model, dataset, config)
    td = score_task_specific(accum, config.strategy, config.l1_mode)
    ta = score_task_agnostic(model.bundle, config.strategy)
    scope = None if config.include_head else backbone_mask(model.registry)
    return combine_hybrid(td, ta, config.lam, scope), td, ta
