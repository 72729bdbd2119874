"""Print the seed-aggregated tables of a finished run directory.

    python3 scripts/summarize.py runs/desk
"""

import argparse
import csv
from pathlib import Path


def rows(path):
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def table(title, header, body):
    print(f"\n{title}")
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    for r in [header, *body]:
        print("  ".join(str(x).rjust(w) for x, w in zip(r, widths)))


def pm(r, m):
    return f"{float(r[m + '_mean']):.4f} ± {float(r[m + '_std']):.4f}"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("run_dir", type=Path)
    rep = ap.parse_args().run_dir / "reports"

    base = rows(rep / "summary_baselines.csv")
    table("baselines (macro-F1)", ["task", "baseline", "seeds", "macro-F1"],
          [[r["task"], r["baseline"], r["n_seeds"], pm(r, "macro_f1")] for r in base])

    shp = rows(rep / "summary_shpeft.csv")
    table("SH-PEFT (macro-F1)", ["task", "estimator", "strategy", "lambda", "k", "seeds", "macro-F1"],
          [[r["task"], r["estimator"], r["strategy"], r["lambda"] or "-", r["budget"], r["n_seeds"],
            pm(r, "macro_f1")] for r in shp])

    sp = rows(rep / "summary_sparsity.csv")
    table("transplant retention", ["task", "k", "macro-F1", "retention"],
          [[r["task"], r["k"], pm(r, "macro_f1"), pm(r, "retention_f1")] for r in sp])

    ov = rows(rep / "summary_overlap.csv")
    table("top-k delta overlap across tasks", ["k", "overlap", "jaccard", "chance"],
          [[r["k"], pm(r, "overlap"), pm(r, "jaccard"), r["chance_mean_mean"]] for r in ov])

    win = rows(rep / "winners.csv")
    table("best selective method per budget", ["task", "k", "winner", "macro-F1"],
          [[r["task"], r["budget"], r["winner"], r["macro_f1_mean"]] for r in win])


if __name__ == "__main__":
    main()
