"""Experiment stages behind the CLI: data generation, pretraining, SH-PEFT
fine-tuning, fixed-mask baselines, sparsity/hybridity analysis and report
aggregation.  Every stage writes into one run directory and is deterministic
given the config and seeds.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .analysis import chance_overlap, overlap_matrix, sparsity_curve, weight_delta
from .config import ExperimentConfig
from .data import DatasetHandle, gen_synthetic, load_idx, make_task_family, save_dataset_idx
from .importance import ScoringConfig, accumulate_gradients, combine_hybrid, score_task_agnostic, score_task_specific
from .masking import baseline_mask, head_policy, select_topk
from .models import Model, backbone_mask, build_model, replace_head
from .trainer import TrainConfig, evaluate, mask_digest, train

log = logging.getLogger("shpeft")

SHPEFT_COLUMNS = ["task", "seed", "estimator", "strategy", "lambda", "budget", "selected", "trainable",
                  "beta", "tau", "macro_f1", "accuracy", "final_loss", "mask_digest"]
BASELINE_COLUMNS = ["task", "seed", "baseline", "budget", "selected", "trainable", "macro_f1",
                    "accuracy", "final_loss", "mask_digest", "backbone_digest"]
CURVE_COLUMNS = ["task", "seed", "k", "macro_f1", "accuracy", "retention_f1", "retention_acc"]
OVERLAP_COLUMNS = ["seed", "task_a", "task_b", "k", "overlap", "jaccard", "chance_mean", "chance_std"]


class StageError(RuntimeError):
    """A stage precondition failed (missing artifact, corrupt file, ...)."""


# -- formatting ----------------------------------------------------------------


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if v != v else f"{v:.6f}"
    return "" if v is None else str(v)


def write_csv(path: Path, columns: list, rows: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(r.get(c)) for c in columns])
    ckpt._atomic_write(path, buf.getvalue().encode())


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path: Path, obj) -> None:
    ckpt._atomic_write(path, (json.dumps(ckpt._jsonable(obj), indent=2, sort_keys=True) + "\n").encode())


def backbone_digest(model: Model) -> str:
    back = model.bundle.flat[backbone_mask(model.registry)]
    return hashlib.sha256(back.astype("<f4").tobytes()).hexdigest()[:16]


# -- run directory -------------------------------------------------------------


class Run:
    """Paths and shared helpers for one run directory."""

    def __init__(self, cfg: ExperimentConfig, out: Path, seed_offset: int = 0, threads: int = 1):
        self.cfg = cfg
        self.out = Path(out)
        self.seeds = [s + seed_offset for s in cfg.seeds]
        self.threads = max(1, int(threads))
        self._data: dict = {}

    # layout
    def data_dir(self, task: str) -> Path:
        return self.out / "data" / task

    def base_path(self, seed: int) -> Path:
        return self.out / "base" / f"seed{seed}" / "base.stw"

    def cell_dir(self, task: str, seed: int) -> Path:
        return self.out / "finetune" / task / f"seed{seed}"

    def reports(self) -> Path:
        return self.out / "reports"

    def prepare(self) -> None:
        try:
            self.out.mkdir(parents=True, exist_ok=True)
            echo = self.out / "config.yaml"
            if echo.exists() and self.cfg.raw_text and echo.read_text() != self.cfg.raw_text:
                raise StageError(f"{self.out} already holds a run with a different config; use a fresh --out")
            if self.cfg.raw_text and not echo.exists():
                echo.write_text(self.cfg.raw_text)
        except OSError as exc:
            raise StageError(f"cannot write run directory {self.out}: {exc}") from None

    # data
    def task_specs(self) -> dict:
        cfg = self.cfg.data
        fam = make_task_family(cfg.base, cfg.tasks + 1)
        specs = {"base": fam[0]}
        for i, spec in enumerate(fam[1:], start=1):
            if cfg.downstream_n_train:
                spec = dataclasses.replace(spec, n_train=cfg.downstream_n_train)
            specs[f"task{i}"] = spec
        return specs

    def dataset(self, task: str) -> tuple[DatasetHandle, DatasetHandle]:
        if task not in self._data:
            d = self.data_dir(task)
            if not (d / "train-labels.idx").exists():
                gen_data(self)
            classes = self.cfg.model.classes if self.cfg.data.kind == "synthetic" else None
            tr = load_idx(d / "train-images.idx", d / "train-labels.idx", classes, "train")
            te = load_idx(d / "test-images.idx", d / "test-labels.idx", classes or tr.classes, "test")
            self._data[task] = (tr, te)
        return self._data[task]

    def seeded_model(self, seed: int) -> Model:
        spec = dataclasses.replace(self.cfg.model, seed=self.cfg.model.seed + seed)
        return build_model(spec)

    def base_model(self, seed: int) -> Model:
        path = self.base_path(seed)
        if not path.exists():
            raise StageError(f"missing pretrained bundle {path}; run `pretrain` first")
        model = self.seeded_model(seed)
        model.load_weights(load_checked(path))
        return model

    def downstream_model(self, task: str, seed: int) -> Model:
        """Pretrained backbone with a fresh head for ``task`` (the W_ori of the
        transfer); saved once per cell as ``ori.stw``."""
        tr, _ = self.dataset(task)
        model = replace_head(self.base_model(seed), tr.classes)
        ori = self.cell_dir(task, seed) / "ori.stw"
        if not ori.exists():
            ckpt.save_bundle(model.bundle, ori)
        return model

    def train_config(self, base: TrainConfig, seed: int) -> TrainConfig:
        return dataclasses.replace(base, seed=base.seed + seed)

    def cells(self) -> list[tuple[str, int]]:
        return [(t, s) for t in self.cfg.task_names() for s in self.seeds]

    def map(self, fn, items):
        if self.threads == 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(self.threads) as pool:
            return list(pool.map(fn, items))


def load_checked(path: Path):
    try:
        return ckpt.load_bundle(path)
    except ckpt.CheckpointError as exc:
        raise StageError(f"{path}: {exc}") from None


# -- stages --------------------------------------------------------------------


def gen_data(run: Run) -> dict:
    """Materialise every task's train/test split as IDX files; returns the manifest."""
    run.prepare()
    cfg = run.cfg.data
    manifest = {}
    if cfg.kind == "synthetic":
        for task, spec in run.task_specs().items():
            tr, te = gen_synthetic(spec)
            d = run.data_dir(task)
            d.mkdir(parents=True, exist_ok=True)
            save_dataset_idx(tr, d / "train-images.idx", d / "train-labels.idx")
            save_dataset_idx(te, d / "test-images.idx", d / "test-labels.idx")
            manifest[task] = {"spec": spec.to_dict(), "train_digest": tr.digest(), "test_digest": te.digest()}
    else:
        sets = {"base": cfg.pretrain_files, **{f["name"]: f for f in cfg.downstream_files}}
        for task, files in sets.items():
            try:
                tr = load_idx(files["train_images"], files["train_labels"], split="train")
                te = load_idx(files["test_images"], files["test_labels"], tr.classes, "test")
            except OSError as exc:
                raise StageError(f"cannot read IDX files for {task}: {exc}") from None
            d = run.data_dir(task)
            d.mkdir(parents=True, exist_ok=True)
            save_dataset_idx(tr, d / "train-images.idx", d / "train-labels.idx")
            save_dataset_idx(te, d / "test-images.idx", d / "test-labels.idx")
            manifest[task] = {"files": files, "train_digest": tr.digest(), "test_digest": te.digest()}
    write_json(run.out / "data" / "manifest.json", manifest)
    log.info("gen-data: %d task(s) written", len(manifest))
    return manifest


def pretrain(run: Run) -> list[dict]:
    """Full-mask supervised training of the base model on the base task, per seed."""
    run.prepare()
    tr, te = run.dataset("base")

    def one(seed: int) -> dict:
        path = run.base_path(seed)
        model = run.seeded_model(seed)
        if path.exists():
            model.load_weights(load_checked(path))
            metrics = evaluate(model, te)
        else:
            mask = baseline_mask(model, "full")
            model, report = train(model, tr, mask, run.train_config(run.cfg.pretrain, seed), te)
            metrics = report.final_metrics
            ckpt.save_bundle(model.bundle, path)
            write_json(path.parent / "metrics.json", metrics.to_dict())
            log.info("pretrain seed=%d acc=%.4f f1=%.4f", seed, metrics.accuracy, metrics.macro_f1)
        return {"seed": seed, "macro_f1": metrics.macro_f1, "accuracy": metrics.accuracy}

    rows = run.map(one, run.seeds)
    write_csv(run.reports() / "pretrain.csv", ["seed", "macro_f1", "accuracy"], rows)
    return rows


def _finish(run_dir: Path, model: Model, mask, report, extra: dict) -> dict:
    ckpt.save_mask(mask, run_dir / "mask.stm", model.bundle.signature)
    ckpt.save_bundle(model.bundle, run_dir / "ft.stw")
    write_json(run_dir / "report.json", {**report.to_dict(), **extra})
    m = report.final_metrics
    final_loss = float(np.mean(report.loss_curve[-20:])) if report.loss_curve else float("nan")
    return {"macro_f1": m.macro_f1, "accuracy": m.accuracy, "final_loss": final_loss,
            "selected": mask.selected, "trainable": mask.trainable, "mask_digest": mask_digest(mask)}


def _scoring_config(run: Run, seed: int, strategy: str) -> ScoringConfig:
    s = run.cfg.shpeft
    return ScoringConfig(strategy=strategy, lam=1.0, batches=s.batches, batch_size=s.batch_size,
                         shuffle_seed=seed, include_head=s.include_head, l1_mode=s.l1_mode)


def _tag(v: float) -> str:
    return f"{v:g}"


def shpeft_cell(run: Run, task: str, seed: int) -> list[dict]:
    """Score once per strategy, then select/train/evaluate for every (lambda, k)."""
    cfg = run.cfg.shpeft
    tr, te = run.dataset(task)
    model = run.downstream_model(task, seed)
    scope, forced = head_policy(model, cfg.include_head)
    tcfg = run.train_config(run.cfg.finetune, seed)
    cell = run.cell_dir(task, seed)
    rows = []
    for strategy in cfg.strategies:
        sdir = cell / "scores"
        td_path, ta_path = sdir / f"td_{strategy}.sts", sdir / f"ta_{strategy}.sts"
        if td_path.exists() and ta_path.exists():
            td, ta = ckpt.load_scores(td_path), ckpt.load_scores(ta_path)
        else:
            accum = accumulate_gradients(model, tr, _scoring_config(run, seed, strategy))
            td = score_task_specific(accum, strategy, cfg.l1_mode)
            ta = score_task_agnostic(model.bundle, strategy)
            ckpt.save_scores(td, td_path, model.bundle.signature)
            ckpt.save_scores(ta, ta_path, model.bundle.signature)
        variants = [("hybrid" if lam > 0 else "task-specific", lam) for lam in cfg.lambdas]
        if cfg.agnostic_only:
            variants.append(("task-agnostic", None))
        for estimator, lam in variants:
            scores = ta if lam is None else combine_hybrid(td, ta, lam, None if cfg.include_head else scope)
            for k in cfg.budgets:
                mask = select_topk(scores, k, scope, forced)
                lam_tag = "ta" if lam is None else f"lam{_tag(lam)}"
                rdir = cell / "shpeft" / f"{strategy}_{lam_tag}_k{_tag(k)}"
                fm, report = train(model, tr, mask, tcfg, te)
                row = _finish(rdir, fm, mask, report, {"scores_meta": scores.meta})
                row.update(task=task, seed=seed, estimator=estimator, strategy=strategy,
                           budget=k, tau=mask.tau, beta=scores.meta.get("beta"),
                           **{"lambda": lam})
                rows.append(row)
                log.info("shpeft %s seed=%d %s %s k=%g f1=%.4f", task, seed, strategy, lam_tag, k, row["macro_f1"])
    return rows


def shpeft(run: Run) -> list[dict]:
    run.prepare()
    for s in run.seeds:
        if not run.base_path(s).exists():
            raise StageError(f"missing pretrained bundle {run.base_path(s)}; run `pretrain` first")
    rows = [r for rs in run.map(lambda c: shpeft_cell(run, *c), run.cells()) for r in rs]
    write_csv(run.reports() / "shpeft.csv", SHPEFT_COLUMNS, rows)
    write_json(run.reports() / "shpeft.json", rows)
    return rows


def baseline_cell(run: Run, task: str, seed: int) -> list[dict]:
    tr, te = run.dataset(task)
    model = run.downstream_model(task, seed)
    tcfg = run.train_config(run.cfg.finetune, seed)
    include_head = run.cfg.shpeft.include_head
    rows = []
    for pattern in run.cfg.baselines.patterns:
        budgets = run.cfg.baselines.random_budgets if pattern == "random" else [None]
        for k in budgets:
            mask = baseline_mask(model, pattern, k=k, seed=seed, include_head=include_head)
            name = pattern if k is None else f"random-k{_tag(k)}"
            fm, report = train(model, tr, mask, tcfg, te)
            row = _finish(run.cell_dir(task, seed) / "baselines" / name, fm, mask, report, {"pattern": name})
            row.update(task=task, seed=seed, baseline=name, budget=mask.budget if k is None else k,
                       backbone_digest=backbone_digest(fm))
            rows.append(row)
            log.info("baseline %s seed=%d %s f1=%.4f", task, seed, name, row["macro_f1"])
    return rows


def baselines(run: Run) -> list[dict]:
    run.prepare()
    for s in run.seeds:
        if not run.base_path(s).exists():
            raise StageError(f"missing pretrained bundle {run.base_path(s)}; run `pretrain` first")
    rows = [r for rs in run.map(lambda c: baseline_cell(run, *c), run.cells()) for r in rs]
    write_csv(run.reports() / "baselines.csv", BASELINE_COLUMNS, rows)
    write_json(run.reports() / "baselines.json", rows)
    return rows


def analyze(run: Run) -> dict:
    """Sparsity curves (transplanting the full fine-tune into W_ori) and the
    cross-task overlap of top-k delta masks."""
    run.prepare()
    acfg = run.cfg.analysis
    tasks = run.cfg.task_names()
    curve_rows: dict[str, list] = {t: [] for t in tasks}
    overlap_rows = []
    for seed in run.seeds:
        deltas = []
        for task in tasks:
            cell = run.cell_dir(task, seed)
            ori_p, ft_p = cell / "ori.stw", cell / "baselines" / "full" / "ft.stw"
            for p in (ori_p, ft_p):
                if not p.exists():
                    raise StageError(f"missing bundle {p}; run `baselines` with the full pattern first")
            ori, ft = load_checked(ori_p), load_checked(ft_p)
            _, te = run.dataset(task)
            probe = replace_head(run.seeded_model(seed), te.classes)
            curve = sparsity_curve(probe, ori, ft, te, acfg.curve_grid)
            curve_rows[task] += [{"task": task, "seed": seed, **r} for r in curve.to_rows()]
            deltas.append(weight_delta(ori, ft))
        if len(tasks) >= 2:
            scope = backbone_mask(ori.registry)
            table = overlap_matrix(deltas, acfg.overlap_grid, tasks, scope)
            n = int(scope.sum())
            chance = {k: chance_overlap(n, k, acfg.chance_trials, seed) for k in acfg.overlap_grid}
            for r in table.rows:
                overlap_rows.append({"seed": seed, **r, "chance_mean": chance[r["k"]][0],
                                     "chance_std": chance[r["k"]][1]})
    rep = run.reports()
    plot = rep / "plot"
    for task, rows in curve_rows.items():
        write_csv(rep / f"sparsity_{task}.csv", CURVE_COLUMNS, rows)
        ks = sorted({r["k"] for r in rows})
        lines = ["# k mean_retention_f1"]
        for k in ks:
            vals = [r["retention_f1"] for r in rows if r["k"] == k]
            lines.append(f"{fmt(k)} {fmt(float(np.mean(vals)))}")
        ckpt._atomic_write(plot / f"sparsity_{task}.dat", ("\n".join(lines) + "\n").encode())
    if overlap_rows:
        write_csv(rep / "overlap.csv", OVERLAP_COLUMNS, overlap_rows)
        lines = ["# k mean_overlap"]
        for k in acfg.overlap_grid:
            vals = [r["overlap"] for r in overlap_rows if r["k"] == k]
            lines.append(f"{fmt(k)} {fmt(float(np.mean(vals)))}")
        ckpt._atomic_write(plot / "overlap.dat", ("\n".join(lines) + "\n").encode())
    write_json(rep / "analysis.json", {"curves": curve_rows, "overlap": overlap_rows})
    return {"curves": curve_rows, "overlap": overlap_rows}


# -- report --------------------------------------------------------------------


def _agg(rows: list[dict], keys: list[str], metrics: list[str]) -> list[dict]:
    groups: dict[tuple, list] = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    out = []
    for key in sorted(groups, key=lambda t: tuple(_sort_key(v) for v in t)):
        rs = groups[key]
        row = dict(zip(keys, key))
        row["n_seeds"] = len(rs)
        for m in metrics:
            vals = np.array(sorted(float(r[m]) for r in rs))
            row[f"{m}_mean"] = float(vals.mean())
            row[f"{m}_std"] = float(vals.std())
        out.append(row)
    return out


def _sort_key(v):
    try:
        return (0, float(v), "")
    except (TypeError, ValueError):
        return (1, 0.0, str(v))


def report(run_dir: Path) -> dict:
    """Seed-aggregated summaries (mean and population std) with fixed columns."""
    run_dir = Path(run_dir)
    rep = run_dir / "reports"
    sources = {name: rep / f"{name}.csv" for name in ("shpeft", "baselines")}
    curves = sorted(rep.glob("sparsity_*.csv")) if rep.exists() else []
    if not any(p.exists() for p in sources.values()) and not curves:
        raise FileNotFoundError(f"{run_dir} has no completed runs to report")
    out = {}
    metrics = ["macro_f1", "accuracy"]
    if sources["shpeft"].exists():
        rows = read_csv(sources["shpeft"])
        keys = ["task", "estimator", "strategy", "lambda", "budget"]
        agg = _agg(rows, keys, metrics)
        write_csv(rep / "summary_shpeft.csv", keys + ["n_seeds"] + _mcols(metrics), agg)
        out["shpeft"] = agg
    if sources["baselines"].exists():
        rows = read_csv(sources["baselines"])
        keys = ["task", "baseline"]
        agg = _agg(rows, keys, metrics)
        write_csv(rep / "summary_baselines.csv", keys + ["n_seeds"] + _mcols(metrics), agg)
        out["baselines"] = agg
    if curves:
        rows = [r for p in curves for r in read_csv(p)]
        keys = ["task", "k"]
        agg = _agg(rows, keys, ["macro_f1", "retention_f1"])
        write_csv(rep / "summary_sparsity.csv", keys + ["n_seeds"] + _mcols(["macro_f1", "retention_f1"]), agg)
        out["sparsity"] = agg
    if (rep / "overlap.csv").exists():
        rows = read_csv(rep / "overlap.csv")
        agg = _agg(rows, ["k"], ["overlap", "jaccard", "chance_mean"])
        write_csv(rep / "summary_overlap.csv", ["k", "n_seeds"] + _mcols(["overlap", "jaccard", "chance_mean"]), agg)
        out["overlap"] = agg
    out["winners"] = _winners(out)
    write_csv(rep / "winners.csv", ["task", "budget", "winner", "macro_f1_mean"], out["winners"])
    write_json(rep / "summary.json", out)
    return out


def _mcols(metrics):
    return [f"{m}_{s}" for m in metrics for s in ("mean", "std")]


def _winners(out: dict) -> list[dict]:
    """Best mean macro-F1 per (task, budget) among SH-PEFT variants and the
    random-k baseline at the same budget."""
    cands: dict[tuple, list] = {}
    for r in out.get("shpeft", []):
        lam = r["lambda"] or "ta"
        name = f"{r['estimator']}-{r['strategy']}" + (f"-lam{lam}" if r["estimator"] == "hybrid" else "")
        cands.setdefault((r["task"], float(r["budget"])), []).append((name, r["macro_f1_mean"]))
    for r in out.get("baselines", []):
        if r["baseline"].startswith("random-k"):
            k = float(r["baseline"][len("random-k"):])
            cands.setdefault((r["task"], k), []).append((r["baseline"], r["macro_f1_mean"]))
    rows = []
    for (task, k) in sorted(cands):
        name, val = max(sorted(cands[(task, k)]), key=lambda t: t[1])
        rows.append({"task": task, "budget": k, "winner": name, "macro_f1_mean": val})
    return rows


def run_all(run: Run) -> dict:
    gen_data(run)
    pretrain(run)
    baselines(run)
    shpeft(run)
    analyze(run)
    return report(run.out)
