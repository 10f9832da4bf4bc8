#!/usr/bin/env python3
"""Write one on-disk evidence bundle per attestation fixture case.

Layout: OUT/<case>/{evidence/{chain,report,ocsp}.json, rims/, nonce.txt} plus
shared OUT/root.json and OUT/rim_root.json, and OUT/expected.json mapping each
case to its verdict reason ("pass" for the clean cases).
"""

import argparse
import json
from pathlib import Path

import numpy as np

from gpucc_sim import attestation as att
from gpucc_sim import system as sysm
from gpucc_sim.trace import Trace

SEED = 1


def dump(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "tests/fixtures/attestation"))
    args = ap.parse_args()
    out = Path(args.out)
    s = sysm.build_system(sysm.SystemConfig.small(seed=SEED), Trace(level=0), stages=("boot", "attestation"))
    nonce = np.random.default_rng(SEED).bytes(32)
    cases = att.build_matrix(s.machine, s.pki, sysm.golden_boot_hashes(s.config), nonce)
    dump(out / "root.json", s.pki.local_root)
    dump(out / "rim_root.json", s.pki.local_rim_root)
    for name, (chain, report, case_nonce, svc) in cases.items():
        d = out / name
        dump(d / "evidence/chain.json", chain)
        dump(d / "evidence/report.json", report)
        dump(d / "evidence/ocsp.json", svc.ocsp.dump())
        svc.rim_store.save(d / "rims")
        (d / "nonce.txt").write_text(case_nonce.hex() + "\n")
    dump(out / "expected.json", {k: v or "pass" for k, v in att.MATRIX_EXPECTED.items()})
    print(f"wrote {len(cases)} fixture bundles to {out}")


if __name__ == "__main__":
    main()
