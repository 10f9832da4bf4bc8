#!/usr/bin/env python3
"""Compare the host-visible plaintext surfaces with and without each mitigation."""

import argparse

from gpucc_sim.scenario import Scenario, run_scenario

STEPS = [
    {"op": "boot"},
    {"op": "setup"},
    {"op": "rpc_calls", "count": 8, "multi": 2},
    {"op": "dma", "reads": 20, "writes": 40},
    {"op": "uvm_launch", "count": 16},
    {"op": "scrub", "pages": 2},
    {"op": "fault", "count": 2},
    {"op": "attest"},
    {"op": "leak_sweep", "expect_exact": False},
]


def sweep(mitigations: dict, commands: int, seed: int) -> None:
    steps = STEPS[:-1] + [{"op": "attack_infer", "commands": commands}, STEPS[-1]]
    sc = Scenario.from_dict({"name": "leak-budget", "seed": seed, "machine": {"preset": "small"},
                             "mitigations": mitigations, "steps": steps})
    res = run_scenario(sc)
    inf, leak = res.steps[-2], res.steps[-1]
    label = ",".join(k for k, v in mitigations.items() if v) or "none"
    missing = sorted(set(leak["budget"]) - set(leak["groups"]))
    print(f"mitigations={label}")
    print(f"  plaintext groups: {', '.join(leak['groups'])}")
    print(f"  budget met exactly: {leak['exact']}  missing: {missing or '-'}  unexpected: {leak['unexpected'] or '-'}")
    print(f"  canaries: {leak['canaries']}, hits: {len(leak['canary_hits'])}")
    print(f"  elemCount inference accuracy: {inf['accuracy']:.3f} (chance {inf['chance']:.3f})")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--commands", type=int, default=200)
    ap.add_argument("--seed", type=int, default=2)
    args = ap.parse_args()
    for mitigations in ({}, {"encrypt_rpc_metadata": True}, {"encrypt_scrubber_pushes": True}):
        sweep(mitigations, args.commands, args.seed)


if __name__ == "__main__":
    main()
