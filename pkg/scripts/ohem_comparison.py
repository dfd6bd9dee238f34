"""Train the tiny detector with and without hard example mining and compare loss curves.

Writes loss_ohem.csv / loss_no_ohem.csv and, if matplotlib is installed,
ohem_comparison.png into --out.

    python3 scripts/ohem_comparison.py --out runs/ohem --iters 300 --seed 3
"""
import argparse
import logging
from pathlib import Path

import numpy as np

from iyolo.trainer import TrainConfig, synth_dataset, train


def smooth(values, window):
    window = max(1, min(window, len(values)))
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ohem")
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--iters", type=int, default=300)
    ap.add_argument("--n-images", type=int, default=8)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--window", type=int, default=20)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = synth_dataset(args.seed, args.n_images)
    curves = {}
    for label, ohem in (("ohem", True), ("no_ohem", False)):
        cfg = TrainConfig(seed=args.seed, iterations=args.iters, batch_size=args.batch,
                          learning_rate=args.lr, ohem_enabled=ohem)
        _, hist = train(cfg, data)
        hist.to_csv(out / f"loss_{label}.csv")
        first, last = hist.smoothed(args.window)
        logging.info("%-8s smoothed loss %.4f -> %.4f (ratio %.3f)", label, first, last,
                     last / first)
        curves[label] = hist.totals()

    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        logging.info("matplotlib not installed; skipping the plot")
        return
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, totals in curves.items():
        s = smooth(totals, args.window)
        ax.plot(np.arange(len(s)) + len(totals) - len(s), s, label=label.replace("_", " "))
    ax.set_xlabel("iteration")
    ax.set_ylabel(f"loss (moving average, window {args.window})")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "ohem_comparison.png", dpi=120)
    logging.info("wrote %s", out / "ohem_comparison.png")


if __name__ == "__main__":
    main()
