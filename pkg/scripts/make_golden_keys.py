#!/usr/bin/env python3
"""Regenerate tests/fixtures/golden_keys.json from fixed session randoms."""

import argparse
import json
from pathlib import Path

from gpucc_sim import crypto_keys as ck

REQUESTER = bytes(range(32))
RESPONDER = bytes(range(32, 64))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "tests/fixtures/golden_keys.json"))
    args = ap.parse_args()
    master = ck.establish_session(REQUESTER, RESPONDER)
    table = ck.derive_all_keys(master)
    doc = {"requester_random": REQUESTER.hex(), "responder_random": RESPONDER.hex(),
           "master_secret": master.secret.hex(), "keys": table.to_hex()}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(doc, indent=1) + "\n")
    print(f"wrote {len(table)} keys to {args.out}")


if __name__ == "__main__":
    main()
