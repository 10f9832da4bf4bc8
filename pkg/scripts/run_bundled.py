#!/usr/bin/env python3
"""Run every bundled scenario (or the named ones) and print a pass/fail table."""

import argparse
import time
from pathlib import Path

from gpucc_sim.scenario import BUNDLED, Scenario, run_scenario, write_outputs


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("names", nargs="*", default=list(BUNDLED))
    ap.add_argument("--out", default=None, help="write each run's artifacts under OUT/<name>")
    args = ap.parse_args()
    failed = 0
    for name in args.names:
        t0 = time.perf_counter()
        res = run_scenario(Scenario.load(name))
        if args.out:
            write_outputs(res, Path(args.out) / name)
        bad = [f"{s['index']}:{s['op']}" for s in res.steps if not s["ok"]]
        failed += not res.ok
        print(f"{name:24s} {'PASS' if res.ok else 'FAIL'} {time.perf_counter() - t0:6.1f}s "
              f"trace={res.trace.digest()[:16]} {' '.join(bad)}")
    raise SystemExit(1 if failed else 0)


if __name__ == "__main__":
    main()
