"""Tile unsteered/steered pairs (and sigma maps, if present) of a run into one PNG.

    python scripts/pair_montage.py runs/default montage.png --n 8 --scale 4
"""
from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np
from PIL import Image

from steerlab import synthgen


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("run", type=Path)
    ap.add_argument("out", type=Path)
    ap.add_argument("--n", type=int, default=8)
    ap.add_argument("--scale", type=int, default=4)
    args = ap.parse_args()
    un = sorted((args.run / "pairs").glob("*_unsteered.ppm"), key=lambda p: int(p.name.split("_")[0]))[: args.n]
    if not un:
        raise SystemExit(f"no pairs under {args.run / 'pairs'}; run `steerlab pair` first")
    rows = []
    for kind in ("unsteered", "steered"):
        imgs = [synthgen.read_ppm(p.with_name(p.name.replace("unsteered", kind))) for p in un]
        rows.append(np.concatenate([np.transpose(x, (1, 2, 0)) for x in imgs], axis=1))
    grid = np.concatenate(rows, axis=0)
    img = Image.fromarray((np.clip(grid, 0, 1) * 255).round().astype(np.uint8))
    img = img.resize((img.width * args.scale, img.height * args.scale), Image.NEAREST)
    img.save(args.out)
    maps = sorted((args.run / "maps").glob("sigma_*.pgm"), key=lambda p: int(p.stem.rsplit("_t", 1)[1]))
    if maps:
        tiles = [synthgen.read_pgm(p) for p in maps]
        strip = Image.fromarray((np.concatenate(tiles, axis=1) * 255).round().astype(np.uint8))
        strip = strip.resize((strip.width * args.scale, strip.height * args.scale), Image.NEAREST)
        strip.save(args.out.with_name(args.out.stem + "_sigma.png"))
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
