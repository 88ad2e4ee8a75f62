"""Print the ablation grids and evaluation reports of a run directory as markdown tables.

    python scripts/ablation_tables.py runs/default
"""
from __future__ import annotations

import json
import sys
from pathlib import Path


def fmt(x) -> str:
    if x is None:
        return "n/a"
    if isinstance(x, float):
        return f"{x:.3f}"
    return str(x)


def table(rows: list[dict], cols: list[str]) -> str:
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    lines += ["| " + " | ".join(fmt(r.get(c)) for c in cols) + " |" for r in rows]
    return "\n".join(lines)


def main(root: Path) -> None:
    metric_cols = ["n_eligible", "flip_rate", "delta_p", "bg_ssim", "bg_psnr", "bg_featdist"]
    ab = root / "ablate"
    if (ab / "alpha.json").exists():
        print("## Steering strength\n\n" + table(json.loads((ab / "alpha.json").read_text()), ["alpha"] + metric_cols) + "\n")
    if (ab / "windows.json").exists():
        rows = json.loads((ab / "windows.json").read_text())
        for r in rows:
            r["window"] = f"{r['source_window'][0]}-{r['source_window'][1]} -> {r['layers'][0]}-{r['layers'][1]}"
        print("## Layer window\n\n" + table(rows, ["window"] + metric_cols) + "\n")
    if (ab / "z.json").exists():
        z = json.loads((ab / "z.json").read_text())
        print("## Number of contrastive seeds\n\n" + table(z["rows"], ["z"] + metric_cols) + "\n")
        print(table(z["cosines"], ["z_a", "z_b", "mean_cosine", "min_cosine"]) + "\n")
    rep = root / "reports"
    if (rep / "dye.json").exists():
        d = json.loads((rep / "dye.json").read_text())
        row = {**d, **d.get("extra", {})}
        print("## Dye removal\n\n" + table([row], ["ddr_unsteered", "ddr", "lesion_presence_unsteered",
                                                   "lesion_presence_steered", "eff_ssim", "eff_psnr", "eff_lpips_proxy"]) + "\n")
    if (rep / "downstream.json").exists():
        dn = json.loads((rep / "downstream.json").read_text())
        print("## Downstream detector (unseen backgrounds)\n\n"
              + table(list(dn["conditions"].values()), ["condition", "n_train", "auc_mean", "auc_sd", "f1_mean", "f1_sd"]) + "\n")


if __name__ == "__main__":
    if len(sys.argv) != 2:
        sys.exit(__doc__)
    main(Path(sys.argv[1]))
