#!/usr/bin/env python3
"""Plot the evaluation CSVs produced by `hsidiff expand-eval` / `sweep-omega`.

Writes PNGs next to the CSVs: per-class spectral error bars (real vs
generated), the 2-D PCA scatter of central-pixel spectra, training loss
curves, and the guidance-weight sweep if present.
"""

import argparse
import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def read_rows(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def plot_spectral_stats(out: Path) -> None:
    rows = read_rows(out / "spectral_stats.csv")
    classes = sorted({int(r["class"]) for r in rows})
    fig, axes = plt.subplots(1, len(classes), figsize=(4 * len(classes), 3.2),
                             sharey=True, squeeze=False)
    for ax, cls in zip(axes[0], classes):
        for source, color in (("real", "tab:blue"), ("generated", "tab:orange")):
            sel = [r for r in rows if int(r["class"]) == cls and r["source"] == source]
            sel.sort(key=lambda r: int(r["band"]))
            bands = [int(r["band"]) for r in sel]
            mean = [float(r["mean"]) for r in sel]
            std = [float(r["std"]) for r in sel]
            ax.errorbar(bands, mean, yerr=std, label=source, color=color,
                        capsize=3, marker="o", markersize=3)
        ax.set_title(f"class {cls}")
        ax.set_xlabel("band")
    axes[0][0].set_ylabel("central-pixel reflectance")
    axes[0][0].legend()
    fig.tight_layout()
    fig.savefig(out / "spectral_stats.png", dpi=150)
    print(f"wrote {out / 'spectral_stats.png'}")


def plot_pca(out: Path) -> None:
    rows = read_rows(out / "pca.csv")
    fig, ax = plt.subplots(figsize=(5, 4))
    groups = defaultdict(list)
    for r in rows:
        groups[(int(r["class"]), r["source"])].append((float(r["x"]), float(r["y"])))
    colors = plt.cm.tab10.colors
    for (cls, source), pts in sorted(groups.items()):
        xs, ys = zip(*pts)
        ax.scatter(xs, ys, s=14 if source == "real" else 28,
                   marker="o" if source == "real" else "x",
                   color=colors[(cls - 1) % len(colors)],
                   alpha=0.6 if source == "real" else 1.0,
                   label=f"class {cls} {source}")
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "pca.png", dpi=150)
    print(f"wrote {out / 'pca.png'}")


def plot_losses(out: Path) -> None:
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    for ax, name, cols in (
        (axes[0], "vae_loss.csv", ("recon_mse", "kl")),
        (axes[1], "ldm_loss.csv", ("loss_dm", "loss_con")),
    ):
        path = out / name
        if not path.exists():
            ax.set_visible(False)
            continue
        rows = read_rows(path)
        epochs = [int(float(r["epoch"])) for r in rows]
        for col in cols:
            ax.plot(epochs, [float(r[col]) for r in rows], label=col)
        ax.set_xlabel("epoch")
        ax.set_yscale("log")
        ax.set_title(name.removesuffix(".csv"))
        ax.legend()
    fig.tight_layout()
    fig.savefig(out / "losses.png", dpi=150)
    print(f"wrote {out / 'losses.png'}")


def plot_sweep(out: Path) -> None:
    path = out / "sweep.csv"
    if not path.exists():
        return
    rows = read_rows(path)
    baseline = next(r for r in rows if r["omega"] == "baseline")
    swept = [r for r in rows if r["omega"] != "baseline"]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    omegas = [float(r["omega"]) for r in swept]
    for metric in ("oa", "aa", "kappa"):
        ax.plot(omegas, [float(r[metric]) for r in swept], marker="o", label=metric)
        ax.axhline(float(baseline[metric]), linestyle=":", alpha=0.5)
    ax.set_xlabel("guidance weight")
    ax.set_ylabel("score (dotted: baseline)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "sweep.png", dpi=150)
    print(f"wrote {out / 'sweep.png'}")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="out/toy", help="directory holding the CSVs")
    args = parser.parse_args()
    out = Path(args.out)
    plot_spectral_stats(out)
    plot_pca(out)
    plot_losses(out)
    plot_sweep(out)


if __name__ == "__main__":
    main()
