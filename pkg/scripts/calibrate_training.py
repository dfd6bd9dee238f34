"""Measure the smoothed-loss ratio of toy training runs across seeds and learning rates.

This is the run used to pick the regression bound checked by the test suite
(final smoothed loss <= 0.5 x initial, window 20).

    python3 scripts/calibrate_training.py --seeds 3 4 5 --lrs 1e-3 3e-4
"""
import argparse
import time

from iyolo.errors import TrainingDivergedError
from iyolo.trainer import TrainConfig, synth_dataset, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[3])
    ap.add_argument("--lrs", type=float, nargs="+", default=[1e-3])
    ap.add_argument("--iters", type=int, default=300)
    ap.add_argument("--n-images", type=int, default=8)
    ap.add_argument("--batch", type=int, default=8)
    args = ap.parse_args()

    print("seed,lr,initial,final,ratio,seconds")
    for seed in args.seeds:
        data = synth_dataset(seed, args.n_images)
        for lr in args.lrs:
            start = time.perf_counter()
            try:
                _, hist = train(TrainConfig(seed=seed, iterations=args.iters,
                                            batch_size=args.batch, learning_rate=lr), data)
            except TrainingDivergedError as exc:
                print(f"{seed},{lr},diverged,,,{time.perf_counter() - start:.0f}  # {exc}")
                continue
            first, last = hist.smoothed(20)
            print(f"{seed},{lr},{first:.4f},{last:.4f},{last / first:.4f},"
                  f"{time.perf_counter() - start:.0f}")


if __name__ == "__main__":
    main()
