import csv
import math

import pytest

from shpeft import checkpoint as ckpt
from shpeft.cli import main
from shpeft.masking import budget_count
from shpeft.models import ModelSpec, backbone_mask, build_model, replace_head
from shpeft.pipeline import backbone_digest, read_csv

CONFIG = """\
model: {image_side: 8, patch: 4, depth: 1, width: 16, heads: 2, mlp_ratio: 2, classes: 3, seed: 0}
data:
  tasks: 2
  base: {classes: 3, image_side: 8, n_train: 96, n_test: 48, sigma: 0.5}
pretrain: {lr0: 0.3, iterations: 150}
finetune: {lr0: 0.3, iterations: 20}
shpeft: {strategies: [L2, L1], lambdas: [0.0, 1.0], budgets: [0.05, 1.0], batches: 2, agnostic_only: true}
baselines: {patterns: [full, head-only, bias-only, random], random_budgets: [0.05]}
analysis: {curve_grid: [0.1, 0.5], overlap_grid: [0.05], chance_trials: 20}
seeds: [0]
"""

SPEC = ModelSpec(image_side=8, patch=4, depth=1, width=16, heads=2, mlp_ratio=2, classes=3)


@pytest.fixture(scope="module")
def cfg_path(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "run.yaml"
    p.write_text(CONFIG)
    return p


@pytest.fixture(scope="module")
def run_dir(cfg_path, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "a"
    assert main(["run-all", "--config", str(cfg_path), "--out", str(out)]) == 0
    return out


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_layout_and_config_echo(run_dir, cfg_path):
    assert (run_dir / "config.yaml").read_text() == cfg_path.read_text()
    assert (run_dir / "base" / "seed0" / "base.stw").exists()
    for name in ("shpeft", "baselines", "overlap", "sparsity_task1", "summary_shpeft", "winners"):
        assert (run_dir / "reports" / f"{name}.csv").exists(), name
    assert (run_dir / "reports" / "plot" / "overlap.dat").exists()


def test_pretrain_beats_chance(run_dir):
    rows = _rows(run_dir / "reports" / "pretrain.csv")
    assert all(float(r["accuracy"]) > 1 / 3 for r in rows)


def test_rerun_byte_identical(run_dir, cfg_path, tmp_path):
    out = tmp_path / "b"
    assert main(["run-all", "--config", str(cfg_path), "--out", str(out)]) == 0
    for p in sorted((run_dir / "reports").glob("*.csv")):
        assert (out / "reports" / p.name).read_bytes() == p.read_bytes(), p.name


def test_gen_data_digests_repeat(cfg_path, tmp_path):
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(tmp_path / "x")]) == 0
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(tmp_path / "y")]) == 0
    a = (tmp_path / "x" / "data" / "manifest.json").read_bytes()
    assert a == (tmp_path / "y" / "data" / "manifest.json").read_bytes()


def test_every_referenced_artifact_verifies(run_dir):
    files = list(run_dir.rglob("*.stw")) + list(run_dir.rglob("*.stm")) + list(run_dir.rglob("*.sts"))
    assert files
    for f in files:
        ckpt.verify(f)


def test_head_only_leaves_backbone_untouched(run_dir):
    ori = replace_head(build_model(SPEC), 3)
    ori.load_weights(ckpt.load_bundle(run_dir / "finetune" / "task1" / "seed0" / "ori.stw"))
    base = build_model(SPEC)
    base.load_weights(ckpt.load_bundle(run_dir / "base" / "seed0" / "base.stw"))
    assert ori.bundle.view("pos_embed").tobytes() == base.bundle.view("pos_embed").tobytes()
    rows = {r["baseline"]: r for r in _rows(run_dir / "reports" / "baselines.csv") if r["task"] == "task1"}
    assert rows["head-only"]["backbone_digest"] == backbone_digest(ori)
    assert rows["full"]["backbone_digest"] != backbone_digest(ori)


def test_random_popcount_and_one_row_per_cell(run_dir):
    rows = _rows(run_dir / "reports" / "baselines.csv")
    assert len(rows) == 2 * 4  # tasks x baselines x seeds
    mask = ckpt.load_mask(run_dir / "finetune" / "task1" / "seed0" / "baselines" / "random-k0.05" / "mask.stm")
    assert mask.selected == budget_count(0.05, mask.n_budgeted)


def test_lambda_zero_rows_are_task_specific(run_dir):
    rows = _rows(run_dir / "reports" / "shpeft.csv")
    est = {(r["strategy"], r["lambda"]): r["estimator"] for r in rows}
    assert est[("L2", "0.000000")] == "task-specific"
    assert est[("L2", "1.000000")] == "hybrid"
    assert est[("L2", "")] == "task-agnostic"


def test_full_budget_equals_full_finetune(run_dir):
    shp = [r for r in _rows(run_dir / "reports" / "shpeft.csv") if r["budget"] == "1.000000"]
    full = {r["task"]: r for r in _rows(run_dir / "reports" / "baselines.csv") if r["baseline"] == "full"}
    for r in shp:
        assert r["mask_digest"] == full[r["task"]]["mask_digest"]
        assert r["macro_f1"] == full[r["task"]]["macro_f1"]


def test_curve_endpoints_match_stored_metrics(run_dir):
    full = {r["task"]: r for r in _rows(run_dir / "reports" / "baselines.csv") if r["baseline"] == "full"}
    for task in ("task1", "task2"):
        rows = _rows(run_dir / "reports" / f"sparsity_{task}.csv")
        assert rows[-1]["k"] == "1.000000"
        assert rows[-1]["macro_f1"] == full[task]["macro_f1"]


def test_report_single_seed_and_retention(run_dir):
    assert main(["report", str(run_dir)]) == 0
    for r in _rows(run_dir / "reports" / "summary_shpeft.csv"):
        assert r["macro_f1_std"] == "0.000000"
    for r in _rows(run_dir / "reports" / "summary_sparsity.csv"):
        if r["k"] == "1.000000" and r["retention_f1_mean"] != "nan":
            assert float(r["retention_f1_mean"]) == 1.0


def test_overlap_has_chance_column(run_dir):
    rows = _rows(run_dir / "reports" / "overlap.csv")
    assert rows and all(0 <= float(r["overlap"]) <= 1 for r in rows)
    n = int(backbone_mask(ckpt.load_bundle(run_dir / "finetune" / "task1" / "seed0" / "ori.stw").registry).sum())
    k = 0.05
    sigma = math.sqrt(k * (1 - k) / budget_count(k, n)) / math.sqrt(20)
    assert abs(float(rows[0]["chance_mean"]) - k) < 4 * sigma


# -- exit codes -------------------------------------------------------------------


def test_unknown_key_exit_2(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text(CONFIG + "learning_rate: 3\n")
    assert main(["pretrain", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_bad_value_exit_2(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text(CONFIG.replace("budgets: [0.05, 1.0]", "budgets: [0.0]"))
    assert main(["shpeft", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "shpeft.budgets" in capsys.readouterr().err


def test_missing_config_exit_2(tmp_path):
    assert main(["pretrain", "--config", str(tmp_path / "nope.yaml")]) == 2
    assert main(["pretrain"]) == 2


def test_report_empty_dir_exit_2(tmp_path):
    assert main(["report", str(tmp_path)]) == 2


def test_missing_base_exit_3(cfg_path, tmp_path, capsys):
    assert main(["shpeft", "--config", str(cfg_path), "--out", str(tmp_path / "o")]) == 3
    assert "base.stw" in capsys.readouterr().err


def test_unwritable_out_exit_3(cfg_path, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(blocker / "run")]) == 3


def test_shpeft_out_env(cfg_path, tmp_path, monkeypatch):
    monkeypatch.setenv("SHPEFT_OUT", str(tmp_path / "env"))
    assert main(["gen-data", "--config", str(cfg_path)]) == 0
    assert (tmp_path / "env" / "data" / "manifest.json").exists()
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "data" / "manifest.json").exists()


def test_seed_offset_shifts_seeds(cfg_path, tmp_path):
    out = tmp_path / "o"
    assert main(["pretrain", "--config", str(cfg_path), "--out", str(out), "--seed-offset", "5"]) == 0
    assert (out / "base" / "seed5" / "base.stw").exists()
    assert read_csv(out / "reports" / "pretrain.csv")[0]["seed"] == "5"
