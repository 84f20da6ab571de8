#!/usr/bin/env python3
"""Render figures from the CSV outputs of `protompc`.

Usage: plot_results.py OUT_DIR [--figs DIR]

Every panel is skipped quietly if its input files are missing, so the script
can be run after any subset of the pipeline.
"""

import argparse
import glob
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402


def save(fig, figs, name):
    path = os.path.join(figs, name)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    print(path)


def static_rmse(out, figs):
    path = os.path.join(out, "static", "rmse.csv")
    if not os.path.exists(path):
        return
    df = pd.read_csv(path)
    pivot = df.pivot(index="condition", columns="mode", values="rmse_x").sort_index()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    pivot.plot.bar(ax=ax)
    ax.set_xlabel("constant side wind [m/s]")
    ax.set_ylabel("x RMSE [m]")
    save(fig, figs, "static_rmse_x.png")


def spatial_box(out, figs):
    path = os.path.join(out, "spatial", "deviations.csv")
    if not os.path.exists(path):
        return
    df = pd.read_csv(path)
    df["abs_ex"] = df["ex"].abs()
    trajs = list(dict.fromkeys(df["trajectory"]))
    modes = list(dict.fromkeys(df["mode"]))
    fig, ax = plt.subplots(figsize=(7, 3.5))
    data, labels = [], []
    for t in trajs:
        for m in modes:
            data.append(df[(df.trajectory == t) & (df["mode"] == m)]["abs_ex"].values)
            labels.append(f"{t}\n{m}")
    ax.boxplot(data, showfliers=False)
    ax.set_xticks(range(1, len(labels) + 1), labels)
    ax.set_ylabel("|x error| [m]")
    ax.tick_params(axis="x", labelsize=7)
    save(fig, figs, "spatial_abs_x_box.png")


def loss_history(out, figs):
    path = os.path.join(out, "train", "loss_history.csv")
    if not os.path.exists(path):
        return
    df = pd.read_csv(path)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for col in [c for c in df.columns if c.startswith("smoothed_")]:
        ax.plot(df["iteration"], df[col], label=col.removeprefix("smoothed_"))
    ax.set_xlabel("meta iteration")
    ax.set_ylabel("smoothed batch risk (whitened)")
    ax.legend()
    save(fig, figs, "loss_history.png")


def validation(out, figs):
    path = os.path.join(out, "train", "validation.csv")
    if not os.path.exists(path):
        return
    df = pd.read_csv(path)
    fig, axes = plt.subplots(1, 3, figsize=(9, 3))
    for ax, a in zip(axes, "xyz"):
        for tid, g in df.groupby("task_id"):
            ax.scatter(g[f"y{a}"], g[f"pred_{a}"], s=2, label=tid)
        lo, hi = df[f"y{a}"].min(), df[f"y{a}"].max()
        ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
        ax.set_title(f"{a}: measured vs predicted [N]")
    axes[0].legend(markerscale=4)
    save(fig, figs, "validation.png")


def beta_sweep(out, figs):
    files = sorted(glob.glob(os.path.join(out, "beta_sweep", "risk_dump_beta_*.csv")))
    if not files:
        return
    fig, axes = plt.subplots(1, len(files), figsize=(3 * len(files), 3), sharex=True, sharey=True)
    axes = axes if len(files) > 1 else [axes]
    for ax, f in zip(axes, files):
        df = pd.read_csv(f)
        for tid, g in df.groupby("task_id"):
            ax.scatter(g["ex"], g["ey"], s=1, alpha=0.5, label=tid)
        beta = os.path.basename(f).removeprefix("risk_dump_beta_").removesuffix(".csv").replace("p", ".")
        ax.set_title(f"beta = {beta}")
        ax.set_xlabel("normalized error x")
    axes[0].set_ylabel("normalized error y")
    axes[0].legend(markerscale=6)
    save(fig, figs, "beta_sweep_clusters.png")


def adapt_trace(out, figs):
    files = sorted(glob.glob(os.path.join(out, "adapt_trace", "*_adapt.csv")))
    for f in files:
        df = pd.read_csv(f)
        fig, ax = plt.subplots(figsize=(6, 3))
        for col in [c for c in df.columns if c.startswith("a_")]:
            ax.plot(df["t"], df[col], label=col.removeprefix("a_"))
        ax.set_xlabel("t [s]")
        ax.set_ylabel("simplex coordinate")
        ax.legend()
        save(fig, figs, os.path.basename(f).replace(".csv", ".png"))


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("out", help="output directory passed to protompc --out")
    p.add_argument("--figs", default=None, help="figure directory (default OUT/figs)")
    args = p.parse_args()
    figs = args.figs or os.path.join(args.out, "figs")
    os.makedirs(figs, exist_ok=True)
    for panel in (static_rmse, spatial_box, loss_history, validation, beta_sweep, adapt_trace):
        panel(args.out, figs)


if __name__ == "__main__":
    main()
