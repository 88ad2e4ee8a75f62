"""Command-line entry point: ``steerlab <subcommand> --config <path>``.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 numeric failure.
Failures print one ``steerlab-error`` line on stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import dit, pipeline, steering, synthgen
from .config import RunConfig
from .errors import SteerlabError, ValidationError
from .eval.oracle import OracleClassifier

log = logging.getLogger("steerlab")

THREADS_ENV = "STEERLAB_THREADS"
SUBCOMMANDS = ("gen-data", "train", "train-oracle", "estimate", "pair", "evaluate", "ablate", "maps")
EXIT_USAGE = 1


class UsageError(SteerlabError):
    exit_code = EXIT_USAGE


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="steerlab", description="Toy concept-steering pipeline.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="run config JSON")
        sp.add_argument("--out", help="run directory (default: config out_dir)")
        sp.add_argument("--threads", type=int, help=f"worker threads (default: ${THREADS_ENV} or 1)")
        sp.add_argument("--seed", type=int, help="override the seed of this stage")
        if name == "gen-data":
            sp.add_argument("--no-images", action="store_true", help="write the manifest only")
        if name == "estimate":
            sp.add_argument("--z-grid", action="store_true", help="also estimate one bank per ablate.z_grid entry")
        if name == "evaluate":
            sp.add_argument("--suites", default="counterfactual,dye,downstream")
        if name == "ablate":
            sp.add_argument("--grids", default="alpha,windows,z")
        if name == "maps":
            sp.add_argument("--pair-index", type=int, default=0)
    return p


# -- run directory ------------------------------------------------------------------

@dataclasses.dataclass
class RunDir:
    root: Path

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def model(self) -> Path:
        return self.root / "model"

    @property
    def oracle(self) -> Path:
        return self.root / "oracle"

    def bank(self, concept: str, z: int | None = None) -> Path:
        return self.root / "banks" / (concept if z is None else f"{concept}_z{z}")

    def require(self, path: Path, producer: str) -> Path:
        if not path.exists():
            raise UsageError(f"missing {path}; run `steerlab {producer}` first")
        return path

    def corpus(self) -> synthgen.Corpus:
        return synthgen.Corpus.load_manifest(self.require(self.data / "manifest.json", "gen-data"))

    def load_lab(self, rc: RunConfig, oracle: bool = True) -> pipeline.Lab:
        params, cfg, _ = dit.load_checkpoint(self.require(self.model, "train"))
        if cfg != rc.model.model_config():
            raise ValidationError("checkpoint architecture differs from config.model")
        orc = OracleClassifier.load(self.require(self.oracle, "train-oracle")) if oracle else None
        lab = pipeline.Lab(rc, params, orc, self.corpus())
        for concept in pipeline.CONCEPTS:
            if self.bank(concept).exists():
                lab.banks[concept] = steering.PathologyVectorBank.load(self.bank(concept))
        return lab


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_jsonable))


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def file_fingerprint(path: Path) -> str:
    """Hash of a file or of every file under a directory (sorted by relative path)."""
    import hashlib

    h = hashlib.sha256()
    files = [path] if path.is_file() else sorted(p for p in path.rglob("*") if p.is_file())
    for f in files:
        h.update(str(f.relative_to(path.parent if path.is_file() else path)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()[:16]


def apply_seed(rc: RunConfig, command: str, seed: int | None) -> RunConfig:
    """``--seed`` replaces the seed owned by the stage being run."""
    if seed is None:
        return rc
    if seed < 0 or seed >= 2**64:
        raise ValidationError("--seed must be an unsigned 64-bit integer")
    r = dataclasses.replace
    if command == "gen-data":
        return rc.replace(data=r(rc.data, split_seed=seed))
    if command == "train":
        return rc.replace(train=r(rc.train, seed=seed))
    if command == "train-oracle":
        return rc.replace(eval=r(rc.eval, oracle_seed=seed))
    if command == "estimate":
        return rc.replace(vectors=r(rc.vectors, seed_start=seed))
    return rc.replace(eval=r(rc.eval, pair_seed_start=seed))


def resolve_threads(arg: int | None) -> int:
    raw = arg if arg is not None else os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("thread count must be >= 1")
    return n


# -- subcommands --------------------------------------------------------------------

def cmd_gen_data(rc: RunConfig, run: RunDir, args) -> dict:
    corpus = pipeline.build_corpus(rc)
    synthgen.export_corpus(corpus, run.data, images=not args.no_images)
    counts = {s: len(corpus.subset(s)) for s in ("train", "val", "test")}
    return {"n_scenes": len(corpus.specs), "splits": counts, "manifest": file_fingerprint(run.data / "manifest.json")}


def cmd_train(rc: RunConfig, run: RunDir, args) -> dict:
    corpus = run.corpus()
    res = pipeline.train_model(rc, corpus, progress=lambda step, loss: log.info("train step %d loss %.5f", step, loss))
    meta = {"trained": True, "steps": len(res.loss_curve), "final_loss_smoothed": float(res.smoothed(50)[-1]),
            "config_fingerprint": rc.fingerprint}
    dit.save_checkpoint(run.model, res.params, rc.model.model_config(), meta)
    write_json(run.model / "loss_curve.json", res.loss_curve)
    return {"steps": meta["steps"], "final_loss_smoothed": meta["final_loss_smoothed"],
            "checksum": dit.param_checksum(res.params)}


def cmd_train_oracle(rc: RunConfig, run: RunDir, args) -> dict:
    oracle = pipeline.fit_oracle(rc, run.corpus())
    oracle.save(run.oracle)
    return {"val_accuracy": oracle.val_accuracy, "val_auc": oracle.val_auc}


def cmd_estimate(rc: RunConfig, run: RunDir, args) -> dict:
    lab = run.load_lab(rc, oracle=False)
    out = {}
    for concept in pipeline.CONCEPTS:
        bank = pipeline.estimate_concept_bank(lab, concept)
        bank.save(run.bank(concept))
        out[concept] = {"Z": bank.Z, "layers": [bank.layers[0], bank.layers[-1]]}
    if args.z_grid:
        grid = pipeline.z_grid(lab, evaluate=False)
        for z, bank in grid["banks"].items():
            bank.save(run.bank("lesion", z))
        write_json(run.root / "banks" / "z_grid_cosines.json", grid["cosines"])
        out["z_grid"] = grid["cosines"]
    return out


def _pair_out(run: RunDir) -> Path:
    return run.root / "pairs"


def cmd_pair(rc: RunConfig, run: RunDir, args) -> dict:
    lab = run.load_lab(rc, oracle=False)
    run.require(run.bank("lesion"), "estimate")
    bank = lab.banks["lesion"]
    n = rc.eval.n_pairs
    seeds = pipeline.seed_range(rc.eval.pair_seed_start, n)
    prompts = pipeline.source_prompts(synthgen.LESION, n)
    config = pipeline.steer_config(rc)
    unsteered = lab.generate(prompts, seeds)
    steered, _ = lab.steer(prompts, seeds, bank, config)
    out = _pair_out(run)
    out.mkdir(parents=True, exist_ok=True)
    for i, seed in enumerate(seeds):
        synthgen.write_ppm(out / f"{seed}_unsteered.ppm", unsteered[i])
        synthgen.write_ppm(out / f"{seed}_steered.ppm", steered[i])
    identical = [bool(np.array_equal(unsteered[i], steered[i])) for i in range(n)]
    summary = {"n": n, "alpha": config.alpha, "seeds": seeds, "identical": identical,
               "prompts": [p.text for p in prompts]}
    if config.alpha == 0.0:
        summary["identity_check"] = "passed" if all(identical) else "failed"
        if not all(identical):
            write_json(out / "summary.json", summary)
            raise SteerlabError("alpha = 0 produced steered images that differ from unsteered")
    write_json(out / "summary.json", summary)
    return {k: v for k, v in summary.items() if k not in ("identical", "seeds", "prompts")}


def cmd_evaluate(rc: RunConfig, run: RunDir, args) -> dict:
    suites = [s.strip() for s in args.suites.split(",") if s.strip()]
    bad = sorted(set(suites) - {"counterfactual", "dye", "downstream"})
    if bad:
        raise UsageError(f"unknown suites {bad}")
    lab = run.load_lab(rc)
    lab.oracle.require(rc.eval.oracle_floor)
    for concept in pipeline.CONCEPTS:
        run.require(run.bank(concept), "estimate")
    out_dir = run.root / "reports"
    summary = {}
    if "counterfactual" in suites:
        cf = pipeline.counterfactual_suite(lab)
        write_json(out_dir / "counterfactual.json", cf["report"].to_dict())
        write_json(out_dir / "sparsity.json", cf["sparsity"])
        summary["counterfactual"] = {"flip_rate": cf["report"].flip_rate, "delta_p": cf["report"].delta_p,
                                     "preservation_win_rate": cf["report"].extra["preservation_win_rate"],
                                     "sparser_at_end": cf["sparsity"]["sparser_at_end"]}
    if "dye" in suites:
        dy = pipeline.dye_suite(lab)
        write_json(out_dir / "dye.json", dy["report"].to_dict())
        summary["dye"] = {"ddr": dy["report"].ddr, "ddr_unsteered": dy["report"].extra["ddr_unsteered"]}
    if "downstream" in suites:
        dn = pipeline.downstream_suite(lab)
        dn["config_fingerprint"] = rc.fingerprint
        write_json(out_dir / "downstream.json", dn)
        summary["downstream"] = {c: r["auc_mean"] for c, r in dn["conditions"].items()}
    return summary


def cmd_ablate(rc: RunConfig, run: RunDir, args) -> dict:
    grids = [g.strip() for g in args.grids.split(",") if g.strip()]
    bad = sorted(set(grids) - {"alpha", "windows", "z"})
    if bad:
        raise UsageError(f"unknown grids {bad}")
    lab = run.load_lab(rc)
    run.require(run.bank("lesion"), "estimate")
    out_dir = run.root / "ablate"
    summary = {}
    if "alpha" in grids:
        rows = pipeline.alpha_sweep(lab, workers=args.threads)
        write_json(out_dir / "alpha.json", rows)
        summary["alpha"] = [(r["alpha"], r["flip_rate"]) for r in rows]
    if "windows" in grids:
        rows = pipeline.window_ablation(lab, workers=args.threads)
        write_json(out_dir / "windows.json", rows)
        summary["windows"] = [(r["layers"], r["flip_rate"]) for r in rows]
    if "z" in grids:
        grid = pipeline.z_grid(lab, workers=args.threads)
        write_json(out_dir / "z.json", {"rows": grid["rows"], "cosines": grid["cosines"]})
        summary["z"] = [(r["z"], r["flip_rate"]) for r in grid["rows"]]
    return summary


def cmd_maps(rc: RunConfig, run: RunDir, args) -> dict:
    lab = run.load_lab(rc, oracle=False)
    run.require(run.bank("lesion"), "estimate")
    bank = lab.banks["lesion"]
    config = pipeline.steer_config(rc)
    seed = rc.eval.pair_seed_start + args.pair_index
    prompt = pipeline.source_prompts(synthgen.LESION, args.pair_index + 1)[-1]
    un, st, stack = steering.generate_pair(lab.params, lab.cfg, lab.schedule, prompt, bank, config, seed)
    layer = rc.eval.sigma_layer if rc.eval.sigma_layer is not None else config.layers[0]
    out = run.root / "maps"
    index = steering.export_sigma_maps(stack, layer, None, out, lab.cfg.image_size)
    synthgen.write_ppm(out / "unsteered.ppm", un)
    synthgen.write_ppm(out / "steered.ppm", st)
    report = steering.sparsity_report(stack, layer)
    write_json(out / "sparsity.json", report)
    return {"seed": seed, "layer": layer, "n_maps": len(index["files"]), "sparser_at_end": report["sparser_at_end"]}


INPUTS = {
    "gen-data": (), "train": ("data",), "train-oracle": ("data",), "estimate": ("data", "model"),
    "pair": ("data", "model", "banks"), "evaluate": ("data", "model", "oracle", "banks"),
    "ablate": ("data", "model", "oracle", "banks"), "maps": ("model", "banks"),
}

COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "train-oracle": cmd_train_oracle, "estimate": cmd_estimate,
    "pair": cmd_pair, "evaluate": cmd_evaluate, "ablate": cmd_ablate, "maps": cmd_maps,
}


def _diagnostic(exc: BaseException, code: int) -> str:
    msg = " ".join(str(exc).split())
    return f"steerlab-error code={code} kind={type(exc).__name__} msg={json.dumps(msg)}"


def run(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.threads = resolve_threads(args.threads)
        rc = apply_seed(RunConfig.load(args.config), args.command, args.seed)
        if args.out:
            rc = rc.replace(out_dir=args.out)
        root = Path(rc.out_dir)
        run_dir = RunDir(root)
        cfg_dir = root / "configs" / args.command
        rc.write_resolved(cfg_dir)
        inputs = {name: file_fingerprint(root / name) for name in INPUTS[args.command] if (root / name).exists()}
        write_json(cfg_dir / "inputs.json", inputs)
        summary = COMMANDS[args.command](rc, run_dir, args)
        summary = {"command": args.command, "config_fingerprint": rc.fingerprint, **summary}
        write_json(cfg_dir / "summary.json", summary)
        print(json.dumps(summary, sort_keys=True, default=_jsonable))
        return 0
    except SteerlabError as exc:
        print(_diagnostic(exc, exc.exit_code), file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(_diagnostic(exc, EXIT_USAGE), file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(_diagnostic(exc, 3), file=sys.stderr)
        return 3


def main() -> None:
    logging.basicConfig(level=os.environ.get("STEERLAB_LOG", "WARNING"), format="%(name)s %(levelname)s %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
