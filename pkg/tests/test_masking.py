import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shpeft.importance import ScoreMap
from shpeft.masking import (
    BudgetTooSmallError,
    baseline_mask,
    budget_count,
    mask_stats,
    select_topk,
    shpeft_mask,
    topk_indices,
    topk_oracle,
)
from shpeft.models import ModelSpec, backbone_mask, build_model, replace_head

MLP = ModelSpec(family="mlp", features=4, depth=1, width=8, classes=3, seed=5)
VIT = ModelSpec(image_side=8, patch=4, depth=1, width=8, heads=2, mlp_ratio=2, classes=3)


def test_half_of_four():
    m = select_topk(np.array([0.9, 0.5, 0.2, 0.1]), 0.5)
    assert m.bits.astype(int).tolist() == [1, 1, 0, 0]
    assert m.tau == 0.5 and m.selected == 2


def test_full_budget_all_ones():
    assert select_topk(np.array([0.3, 0.0, 7.0]), 1.0).bits.all()


def test_tie_goes_to_lower_index():
    m = select_topk(np.array([0.5, 0.5, 0.1]), 1 / 3)
    assert m.bits.tolist() == [True, False, False]


def test_budget_too_small():
    with pytest.raises(BudgetTooSmallError):
        select_topk(np.ones(10), 0.05)


@pytest.mark.parametrize("k", [0.0, -0.1, 1.5])
def test_budget_out_of_range(k):
    with pytest.raises(ValueError):
        select_topk(np.ones(10), k)


def test_nonfinite_scores_rejected():
    with pytest.raises(ValueError):
        select_topk(np.array([1.0, np.nan]), 0.5)


def test_decimal_budget_not_lost_to_rounding():
    assert budget_count(0.29, 100) == 29
    assert budget_count(0.07, 100) == 7


def test_all_roles_eligible():
    model = replace_head(build_model(VIT), 3)
    scores = np.zeros(model.n_params)
    for role in ("norm", "bias", "embed"):
        scores[np.flatnonzero(model.registry.role_mask(role))[-1]] = 1.0
    m = shpeft_mask(ScoreMap(scores, "hybrid"), 0.05, model.registry)
    for role in ("norm", "bias", "embed"):
        assert (m.bits & model.registry.role_mask(role)).any()


def test_head_policy_default_and_included():
    model = replace_head(build_model(VIT), 3)
    scores = ScoreMap(np.random.default_rng(0).random(model.n_params), "hybrid")
    back = backbone_mask(model.registry)
    m = shpeft_mask(scores, 0.1, model.registry)
    assert m.bits[~back].all()
    assert m.selected == budget_count(0.1, int(back.sum()))
    assert m.trainable == m.selected + int((~back).sum())
    inc = shpeft_mask(scores, 0.1, model.registry, include_head=True)
    assert inc.selected == inc.trainable == budget_count(0.1, model.n_params)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 400), k=st.floats(0.001, 1.0), seed=st.integers(0, 2**31 - 1),
       levels=st.integers(1, 6))
def test_exact_count_and_oracle_equivalence(n, k, seed, levels):
    rng = np.random.default_rng(seed)
    values = rng.integers(0, levels, n).astype(float)  # few levels -> many ties
    count = budget_count(k, n)
    if count == 0:
        return
    m = select_topk(values, k)
    assert abs(m.selected - k * n) < 1
    np.testing.assert_array_equal(np.flatnonzero(m.bits), topk_oracle(values, count))
    assert m.tau == values[m.bits].min()


def test_oracle_equivalence_large():
    values = np.random.default_rng(1).standard_normal(1_000_000).round(3)
    np.testing.assert_array_equal(topk_indices(values, 12_345), topk_oracle(values, 12_345))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), k1=st.floats(0.01, 1.0), k2=st.floats(0.01, 1.0))
def test_monotone_in_budget(seed, k1, k2):
    k1, k2 = sorted((k1, k2))
    values = np.random.default_rng(seed).integers(0, 5, 200).astype(float)
    a, b = select_topk(values, k1), select_topk(values, k2)
    assert not (a.bits & ~b.bits).any()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), c=st.sampled_from([0.5, 2.0, 1e-3, 1e3, 4.0]))
def test_scale_invariance(seed, c):
    values = np.random.default_rng(seed).random(300)
    assert np.array_equal(select_topk(values, 0.1).bits, select_topk(values * c, 0.1).bits)


# -- baselines --------------------------------------------------------------------


def test_bias_only_on_mlp_example():
    m = baseline_mask(build_model(MLP), "bias-only")
    assert m.trainable == 11


def test_head_only_has_no_backbone_bits():
    model = replace_head(build_model(VIT), 3)
    m = baseline_mask(model, "head-only")
    assert m.selected == 0 and m.trainable == int((~backbone_mask(model.registry)).sum())


def test_full_pattern():
    model = replace_head(build_model(VIT), 3)
    assert baseline_mask(model, "full").bits.all()


def test_random_pattern_deterministic_and_exact():
    model = replace_head(build_model(VIT), 3)
    a = baseline_mask(model, "random", k=0.1, seed=4)
    b = baseline_mask(model, "random", k=0.1, seed=4)
    c = baseline_mask(model, "random", k=0.1, seed=5)
    assert np.array_equal(a.bits, b.bits) and not np.array_equal(a.bits, c.bits)
    assert a.selected == budget_count(0.1, a.n_budgeted)


def test_attention_only_invalid_on_mlp():
    with pytest.raises(ValueError, match="attention"):
        baseline_mask(build_model(MLP), "attention-only")


def test_unknown_pattern():
    with pytest.raises(ValueError):
        baseline_mask(build_model(MLP), "lora")


def test_mask_stats_examples():
    model = replace_head(build_model(VIT), 3)
    reg = model.registry
    full = mask_stats(baseline_mask(model, "full"), reg)
    assert all(v["selected"] == v["size"] for v in full.values())
    assert sum(v["selected"] for v in full.values()) == reg.size
    empty = select_topk(np.ones(reg.size), 1.0)
    empty.bits[:] = False
    assert all(v["selected"] == 0 for v in mask_stats(empty, reg).values())
    bias = mask_stats(baseline_mask(build_model(MLP), "bias-only"), build_model(MLP).registry)
    assert bias["bias"]["selected"] == 11
    assert all(v["selected"] == 0 for r, v in bias.items() if r != "bias")


def test_mask_stats_length_mismatch():
    with pytest.raises(ValueError):
        mask_stats(select_topk(np.ones(5), 1.0), build_model(MLP).registry)
