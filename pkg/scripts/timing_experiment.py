#!/usr/bin/env python3
"""Small-vs-page DMA size classification across seeds, with and without constant-time transfers."""

import argparse

import numpy as np

from gpucc_sim import adversary as adv
from gpucc_sim import gsp_dma as dma


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--per-class", type=int, default=1000)
    args = ap.parse_args()
    for ct in (False, True):
        accs = []
        for seed in range(args.seeds):
            samples = dma.synthetic_samples(dma.TimingModel(constant_time=ct), args.per_class,
                                            np.random.default_rng(seed))
            accs.append(adv.classify_timing(samples)["accuracy"])
        a = np.array(accs)
        print(f"constant_time={ct!s:5s} accuracy mean={a.mean():.3f} min={a.min():.3f} max={a.max():.3f}")


if __name__ == "__main__":
    main()
