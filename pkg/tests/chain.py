"""Run the CLI stage by stage into a directory and collect its outputs."""
from __future__ import annotations

import time
from pathlib import Path

from steerlab import cli

ROOT = Path(__file__).resolve().parents[1]
TINY = ROOT / "configs" / "tiny.json"
DEFAULT = ROOT / "configs" / "default.json"
CHAIN = [
    ["gen-data"], ["train"], ["train-oracle"], ["estimate", "--z-grid"], ["pair"],
    ["evaluate"], ["ablate"], ["maps"],
]


def run_chain(out: Path, config: Path = TINY, chain=CHAIN) -> dict[str, float]:
    """Seconds per stage; fails on the first nonzero exit code."""
    timings = {}
    for argv in chain:
        t0 = time.perf_counter()
        code = cli.run(argv + ["--config", str(config), "--out", str(out)])
        assert code == 0, argv
        timings[argv[0]] = time.perf_counter() - t0
    return timings


def primary_outputs(root: Path) -> dict[str, bytes]:
    files = {}
    for p in sorted(root.rglob("*")):
        rel = p.relative_to(root).as_posix()
        # resolved configs embed the output directory
        if p.is_file() and not rel.endswith("resolved_config.json"):
            files[rel] = p.read_bytes()
    return files
