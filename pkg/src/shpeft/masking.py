"""Binary trainability masks: global top-k selection over importance scores
and fixed role-based baseline patterns."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .importance import ScoreMap
from .models import ROLES, Model, ParameterRegistry, backbone_mask

PATTERNS = ("full", "head-only", "bias-only", "norm-only", "attention-only", "random")
_PATTERN_ROLE = {"bias-only": "bias", "norm-only": "norm", "attention-only": "attention"}


class BudgetTooSmallError(ValueError):
    pass


@dataclass
class Mask:
    """``bits`` marks trainable elements; ``scope`` marks the elements that
    competed for the budget (``selected`` counts bits inside it).  Elements
    outside the scope (the head, by default) are forced per the head policy.
    """

    bits: np.ndarray
    budget: float
    tau: float
    scope: np.ndarray
    meta: dict | None = None

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        self.scope = np.asarray(self.scope, dtype=bool)
        if self.bits.shape != self.scope.shape or self.bits.ndim != 1:
            raise ValueError("mask bits and scope must be equal-length flat vectors")
        if self.meta is None:
            self.meta = {}

    @property
    def selected(self) -> int:
        return int(np.count_nonzero(self.bits & self.scope))

    @property
    def trainable(self) -> int:
        return int(np.count_nonzero(self.bits))

    @property
    def n_budgeted(self) -> int:
        return int(np.count_nonzero(self.scope))

    def __len__(self) -> int:
        return self.bits.size


def budget_count(k: float, n: int) -> int:
    """floor(k * n), rounded to 1e-9 first so decimal budgets like 0.29 * 100
    are not lost to binary representation."""
    return int(math.floor(round(k * n, 9)))


def topk_indices(values: np.ndarray, count: int) -> np.ndarray:
    """Indices of the ``count`` largest values, ties broken by ascending index.

    Uses a linear-time partition to find the k-th largest value, then keeps
    everything strictly above it plus the lowest-index elements equal to it.
    """
    n = values.size
    if count <= 0:
        return np.empty(0, dtype=np.int64)
    if count >= n:
        return np.arange(n)
    kth = np.partition(values, n - count)[n - count]
    above = np.flatnonzero(values > kth)
    ties = np.flatnonzero(values == kth)[: count - above.size]
    return np.sort(np.concatenate([above, ties]))


def select_topk(scores: ScoreMap | np.ndarray, budget: float, scope: np.ndarray | None = None,
                forced: np.ndarray | None = None) -> Mask:
    """Select exactly floor(budget * N) of the highest-scoring elements in
    ``scope`` (N = scope size, all elements by default).  ``forced`` elements
    are set regardless and do not count against the budget."""
    values = scores.values if isinstance(scores, ScoreMap) else np.asarray(scores, dtype=np.float64)
    if not 0 < budget <= 1:
        raise ValueError(f"budget must be in (0, 1], got {budget}")
    if not np.all(np.isfinite(values)):
        raise ValueError("scores must be finite")
    n_all = values.size
    scope = np.ones(n_all, dtype=bool) if scope is None else np.asarray(scope, dtype=bool)
    cand = np.flatnonzero(scope)
    count = budget_count(budget, cand.size)
    if count == 0:
        raise BudgetTooSmallError(f"budget {budget} of {cand.size} elements selects nothing")
    pick = cand[topk_indices(values[cand], count)]
    bits = np.zeros(n_all, dtype=bool)
    bits[pick] = True
    if forced is not None:
        bits |= np.asarray(forced, dtype=bool) & ~scope
    meta = dict(scores.meta) if isinstance(scores, ScoreMap) else {}
    return Mask(bits, float(budget), float(values[pick].min()), scope, meta)


def topk_oracle(values: np.ndarray, count: int) -> np.ndarray:
    """Reference selection by full stable sort (descending score, ascending index)."""
    order = np.lexsort((np.arange(values.size), -np.asarray(values)))
    return np.sort(order[:count])


def head_policy(model_or_registry, include_head: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """(scope, forced) arrays: by default the head sits outside the budget and
    is always trainable."""
    reg = model_or_registry.registry if isinstance(model_or_registry, Model) else model_or_registry
    if include_head:
        return np.ones(reg.size, dtype=bool), np.zeros(reg.size, dtype=bool)
    back = backbone_mask(reg)
    return back, ~back


def shpeft_mask(scores: ScoreMap, budget: float, registry: ParameterRegistry,
                include_head: bool = False) -> Mask:
    scope, forced = head_policy(registry, include_head)
    return select_topk(scores, budget, scope, forced)


def baseline_mask(model_or_registry, pattern: str, k: float | None = None, seed: int = 0,
                  include_head: bool = False) -> Mask:
    """Fixed selective-tuning patterns; ``random`` draws a uniform
    floor(k * N) subset of the budgeted elements."""
    reg = model_or_registry.registry if isinstance(model_or_registry, Model) else model_or_registry
    if pattern not in PATTERNS:
        raise ValueError(f"unknown pattern {pattern!r}; expected one of {PATTERNS}")
    scope, forced = head_policy(reg, include_head)
    has_head = bool((~backbone_mask(reg)).any())
    head = ~backbone_mask(reg) if has_head else np.zeros(reg.size, dtype=bool)
    if pattern == "full":
        bits = np.ones(reg.size, dtype=bool)
    elif pattern == "head-only":
        bits = head.copy()
    elif pattern == "random":
        if k is None:
            raise ValueError("random pattern needs a budget k")
        cand = np.flatnonzero(scope)
        count = budget_count(k, cand.size)
        if count == 0:
            raise BudgetTooSmallError(f"budget {k} of {cand.size} elements selects nothing")
        rng = np.random.default_rng(seed)
        bits = np.zeros(reg.size, dtype=bool)
        bits[rng.choice(cand, size=count, replace=False)] = True
    else:
        role = _PATTERN_ROLE[pattern]
        if not any(e.role == role for e in reg):
            raise ValueError(f"pattern {pattern!r} is invalid for a model without {role} parameters")
        bits = reg.role_mask(role)
    bits = bits | forced
    n_sel = int(np.count_nonzero(bits & scope))
    budget = n_sel / max(int(scope.sum()), 1)
    return Mask(bits, budget, float("nan"), scope, {"pattern": pattern})


def mask_stats(mask: Mask, registry: ParameterRegistry) -> dict[str, dict]:
    """Per-role selected counts, role sizes and selected fractions."""
    if len(mask) != registry.size:
        raise ValueError(f"mask length {len(mask)} != registry size {registry.size}")
    out = {}
    for role in ROLES:
        rm = registry.role_mask(role)
        size = int(rm.sum())
        count = int(np.count_nonzero(mask.bits & rm))
        out[role] = {"selected": count, "size": size, "fraction": count / size if size else 0.0}
    return out
