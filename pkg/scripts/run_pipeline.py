"""Run every CLI stage for one config and print per-stage wall time.

    python scripts/run_pipeline.py --config configs/default.json --out runs/default
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from steerlab import cli

STAGES = [["gen-data"], ["train"], ["train-oracle"], ["estimate", "--z-grid"], ["pair"], ["evaluate"],
          ["ablate"], ["maps"]]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--from-stage", default="gen-data", help="skip stages before this one")
    args = ap.parse_args()
    names = [s[0] for s in STAGES]
    if args.from_stage not in names:
        ap.error(f"--from-stage must be one of {names}")
    timings = {}
    for argv in STAGES[names.index(args.from_stage):]:
        t0 = time.perf_counter()
        code = cli.run(argv + ["--config", args.config, "--out", args.out, "--threads", str(args.threads)])
        timings[argv[0]] = round(time.perf_counter() - t0, 1)
        print(f"# {argv[0]}: {timings[argv[0]]}s", file=sys.stderr)
        if code:
            return code
    Path(args.out, "timings.json").write_text(json.dumps(timings, indent=1))
    return 0


if __name__ == "__main__":
    sys.exit(main())
