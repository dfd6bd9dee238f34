"""Time a forward pass of the full 416x416 network on one CPU core.

    python3 scripts/benchmark_forward.py --repeats 3
"""
import argparse
import time

import numpy as np

from iyolo.network import build, iyolo_spec


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    start = time.perf_counter()
    net = build(iyolo_spec(), seed=args.seed)
    print(f"build: {time.perf_counter() - start:.2f}s, {net.num_params():,} parameters")
    x = np.random.default_rng(args.seed).random((3, 416, 416), dtype=np.float32)
    times = []
    for _ in range(args.repeats):
        start = time.perf_counter()
        y = net.forward(x)
        times.append(time.perf_counter() - start)
    print(f"forward -> {y.shape}: best {min(times):.2f}s, "
          f"median {np.median(times):.2f}s ({1 / min(times):.2f} images/s)")


if __name__ == "__main__":
    main()
