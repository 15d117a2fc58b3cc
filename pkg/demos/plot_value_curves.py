"""Summarize a results CSV written by ``fdtr-experiment`` as a value table.

Usage: ``python demos/plot_value_curves.py results/value_curves.csv``.
Prints the seed mean and 95% interval half-width of the site-averaged value
for every method and sample size. Pass ``--png out.png`` to also draw the
curves when matplotlib is available.
"""
import argparse
import csv

from fdtr.experiment import summarize_rows

parser = argparse.ArgumentParser()
parser.add_argument("csv")
parser.add_argument("--png")
args = parser.parse_args()

with open(args.csv) as fh:
    rows = [
        {"method": r["method"], "n": int(r["n"]), "seed": int(r["seed"]), "value_mean": float(r["value_mean"])}
        for r in csv.DictReader(fh)
    ]
summary = summarize_rows(rows)
methods = sorted({m for m, _ in summary})
grid = sorted({n for _, n in summary})

print("n      " + "".join(f"{m:>16s}" for m in methods))
for n in grid:
    cells = "".join(f"{summary[(m, n)]['mean']:9.3f}+-{1.96 * summary[(m, n)]['se']:.3f}" for m in methods)
    print(f"{n:<7d}{cells}")

if args.png:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for m in methods:
        mean = [summary[(m, n)]["mean"] for n in grid]
        half = [1.96 * summary[(m, n)]["se"] for n in grid]
        ax.errorbar(grid, mean, yerr=half, label=m, capsize=3)
    ax.set_xscale("log")
    ax.set_xlabel("trajectories per site")
    ax.set_ylabel("value")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(args.png, dpi=120)
