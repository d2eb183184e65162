"""Single-threaded wall time of the full metric set on one 256x256 RGB pair."""

import argparse
import time

import cv2
import numpy as np
from threadpoolctl import threadpool_limits

from desmoke import bench
from desmoke.smokesim import tissue_scene


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--size", type=int, default=256)
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    clean = tissue_scene(args.size, rng)
    out = np.clip(clean + 0.05 * rng.standard_normal(clean.shape), 0, 1)
    cv2.setNumThreads(1)
    with threadpool_limits(1):
        bench.compute_metrics(clean, out)
        for m in bench.METRICS:
            t0 = time.perf_counter()
            for _ in range(args.repeats):
                bench.METRIC_FUNCS[m](clean, out)
            print(f"{m:10s} {1000 * (time.perf_counter() - t0) / args.repeats:7.2f} ms")
        times = []
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            bench.compute_metrics(clean, out)
            times.append(time.perf_counter() - t0)
    print(f"{'all':10s} {1000 * np.median(times):7.2f} ms (median of {args.repeats})")


if __name__ == "__main__":
    main()
