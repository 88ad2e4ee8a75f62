"""Experiment suites built from the model, oracle and vector bank.

Every suite is a pure function of its inputs: seeds are explicit, batches are
index-ordered, and reductions run in a fixed order.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import dit, steering, synthgen
from .config import RunConfig
from .errors import ValidationError
from .eval import downstream as ds
from .eval import metrics as M
from .eval.oracle import OracleClassifier, OracleSettings, train_oracle
from .eval.segment import DEFAULT_RULE, union_background
from .steering import PathologyVectorBank, SteerConfig
from .synthgen import PromptSpec

CONCEPTS = ("lesion", "dye")


def concept_prompts(concept: str) -> tuple[PromptSpec, PromptSpec]:
    """(positive, negative) prompt templates; context is varied per seed elsewhere."""
    if concept == "lesion":
        return PromptSpec.for_class(synthgen.LESION), PromptSpec.for_class(synthgen.PLAIN)
    if concept == "dye":
        return PromptSpec.for_class(synthgen.DYED), PromptSpec.for_class(synthgen.LESION)
    raise ValidationError(f"concept must be one of {CONCEPTS}, got {concept!r}")


def seed_range(start: int, n: int) -> list[int]:
    return list(range(int(start), int(start) + int(n)))


def source_prompts(label: int, n: int) -> list[PromptSpec]:
    return [PromptSpec.for_class(label, context=i) for i in range(n)]


def map_window(start: int, end: int, source_depth: int, n_layers: int) -> tuple[int, int]:
    """Rescale a layer window by fraction of depth, rounding both ends."""
    lo = int(round(start * n_layers / source_depth))
    hi = int(round(end * n_layers / source_depth))
    lo = min(max(lo, 0), n_layers - 1)
    hi = min(max(hi, lo), n_layers - 1)
    return lo, hi


def steer_config(rc: RunConfig, **overrides) -> SteerConfig:
    s = rc.steer
    kw = dict(alpha=s.alpha, layer_start=s.layer_start, layer_end=s.layer_end, steps=s.steps, mode=s.mode)
    kw.update(overrides)
    return SteerConfig(**kw)


@dataclass
class Lab:
    """Trained artifacts a suite needs."""

    config: RunConfig
    params: dict[str, np.ndarray]
    oracle: OracleClassifier
    corpus: synthgen.Corpus | None = None
    banks: dict[str, PathologyVectorBank] = field(default_factory=dict)

    @property
    def cfg(self) -> dit.ModelConfig:
        return self.config.model.model_config()

    @property
    def schedule(self) -> dit.DiffusionSchedule:
        return dit.DiffusionSchedule.from_config(self.cfg)

    def generate(self, prompts, seeds, hooks=None) -> np.ndarray:
        bs = self.config.eval.batch_size
        out = []
        cfg, sch = self.cfg, self.schedule
        for s in range(0, len(seeds), bs):
            out.append(steering.generate(self.params, cfg, sch, prompts[s : s + bs], seeds[s : s + bs], hooks))
        return np.concatenate(out)

    def steer(self, prompts, seeds, bank: PathologyVectorBank, config: SteerConfig):
        """Steered images and the recorded gate values."""
        config.validate(self.cfg, bank)
        bs = self.config.eval.batch_size
        images, sig = [], []
        for s in range(0, len(seeds), bs):
            hook = steering.SteeringHook(bank, config, self.cfg.t_sample)
            images.append(self.generate(prompts[s : s + bs], seeds[s : s + bs], hook))
            sig.append(hook.sigma)
        sigma = {k: np.concatenate([x[k] for x in sig]) for k in sig[0]}
        return np.concatenate(images), sigma

    def bank(self, concept: str) -> PathologyVectorBank:
        if concept not in self.banks:
            self.banks[concept] = estimate_concept_bank(self, concept)
        return self.banks[concept]


# -- building blocks ---------------------------------------------------------------

def build_corpus(rc: RunConfig) -> synthgen.Corpus:
    return synthgen.make_dataset(rc.data.n_per_class, rc.data.split_seed)


def train_model(rc: RunConfig, corpus: synthgen.Corpus, progress: Callable[[int, float], None] | None = None):
    specs = corpus.subset("train")
    images, _, _ = synthgen.render_batch(specs)
    tokens = np.array([synthgen.prompt_for_scene(s).tokens for s in specs], np.int64)
    cfg = rc.model.model_config()
    init = dit.init_params(cfg, rc.model.init_seed)
    return dit.train(images, tokens, cfg, rc.train.settings(), init=init, progress=progress)


def oracle_settings(rc: RunConfig) -> OracleSettings:
    e = rc.eval
    return OracleSettings(epochs=e.oracle_epochs, lr=e.oracle_lr, seed=e.oracle_seed, floor=e.oracle_floor)


def fit_oracle(rc: RunConfig, corpus: synthgen.Corpus) -> OracleClassifier:
    return train_oracle(corpus, oracle_settings(rc), enforce_floor=True)


def estimate_concept_bank(lab: Lab, concept: str, z: int | None = None) -> PathologyVectorBank:
    v = lab.config.vectors
    pos, neg = concept_prompts(concept)
    seeds = seed_range(v.seed_start, v.z if z is None else z)
    bank = steering.estimate_bank(lab.params, lab.cfg, lab.schedule, pos, neg, seeds, v.layers, v.vary_context,
                                  lab.config.eval.batch_size)
    bank.meta["concept"] = concept
    return bank


# -- per-pair fidelity -------------------------------------------------------------

def background_scores(oracle: OracleClassifier, ref: np.ndarray, other: np.ndarray, masks: Sequence[np.ndarray]):
    """(ssim, psnr, feature distance) per pair over the given background masks.

    Pairs whose background admits no full SSIM window score NaN and are left
    out of the means (see :func:`nanmean`).
    """
    n = len(masks)
    ssim, psnr, feat = np.full(n, np.nan), np.full(n, np.nan), np.full(n, np.nan)
    fr = oracle.features(ref)
    fo = oracle.features(other)
    r = M.SSIM_WIN // 2
    for i, m in enumerate(masks):
        if not m[r:-r, r:-r].any():
            continue
        ssim[i] = M.masked_ssim(ref[i], other[i], m)
        psnr[i] = M.masked_psnr(ref[i], other[i], m)
        feat[i] = M.feature_distance_from_features(fr[i], fo[i], m)
    return ssim, psnr, feat


def nanmean(x: np.ndarray) -> float | None:
    ok = ~np.isnan(x)
    return float(np.mean(x[ok])) if ok.any() else None


def pair_masks(*groups: np.ndarray) -> list[np.ndarray]:
    """Shared background per pair: pixels no image of the pair marks as lesion or dye."""
    n = len(groups[0])
    return [union_background([g[i] for g in groups], DEFAULT_RULE) for i in range(n)]


def eligible_flip(oracle: OracleClassifier, unsteered: np.ndarray, steered: np.ndarray, source: int):
    """Flip rate and confidence shift over pairs whose unsteered image shows the source class."""
    pu = oracle.proba(unsteered)
    ps = oracle.proba(steered)
    keep = np.argmax(pu, axis=1) == source
    if not keep.any():
        return float("nan"), float("nan"), 0
    flip = M.flip_rate_from_predictions(np.argmax(ps[keep], axis=1), source)
    dp = M.confidence_shift_from_proba(ps[keep], pu[keep], source)
    return flip, dp, int(keep.sum())


# -- suites ------------------------------------------------------------------------

def counterfactual_suite(lab: Lab, bank: PathologyVectorBank | None = None, config: SteerConfig | None = None,
                         n_pairs: int | None = None, seed_start: int | None = None) -> dict:
    """Lesion removal: flip/confidence metrics plus background fidelity against a re-prompt baseline."""
    rc = lab.config
    bank = bank or lab.bank("lesion")
    config = config or steer_config(rc)
    n = rc.eval.n_pairs if n_pairs is None else n_pairs
    seeds = seed_range(rc.eval.pair_seed_start if seed_start is None else seed_start, n)
    prompts = source_prompts(synthgen.LESION, n)
    unsteered = lab.generate(prompts, seeds)
    steered, sigma = lab.steer(prompts, seeds, bank, config)
    reprompt = lab.generate([p.with_concept(synthgen.CONCEPT_NORMAL) for p in prompts], seeds)
    masks = pair_masks(unsteered, steered, reprompt)
    s_ssim, s_psnr, s_feat = background_scores(lab.oracle, unsteered, steered, masks)
    r_ssim, r_psnr, r_feat = background_scores(lab.oracle, unsteered, reprompt, masks)
    flip, dp, n_eligible = eligible_flip(lab.oracle, unsteered, steered, synthgen.LESION)
    rflip, rdp, _ = eligible_flip(lab.oracle, unsteered, reprompt, synthgen.LESION)
    scored = ~np.isnan(s_ssim) & ~np.isnan(r_ssim)
    wins = s_ssim[scored] > r_ssim[scored]
    fp = M.fingerprint({"config": rc.fingerprint, "steer": config.__dict__, "seeds": [seeds[0], n]})
    report = M.MetricsReport(
        "counterfactual", n, flip_rate=_nan_none(flip), delta_p=_nan_none(dp), bg_ssim=nanmean(s_ssim),
        bg_psnr=nanmean(s_psnr), bg_featdist=nanmean(s_feat), config_fingerprint=fp,
        extra={"n_eligible": n_eligible, "reprompt": {"flip_rate": _nan_none(rflip), "delta_p": _nan_none(rdp),
               "bg_ssim": nanmean(r_ssim), "bg_psnr": nanmean(r_psnr), "bg_featdist": nanmean(r_feat)},
               "preservation_win_rate": float(wins.mean()) if wins.size else None,
               "n_background_scored": int(scored.sum()), "lesion_presence_unsteered": M.lesion_presence_rate(lab.oracle, unsteered)},
    )
    sp_layer = rc.eval.sigma_layer if rc.eval.sigma_layer is not None else config.layers[0]
    return {"report": report, "unsteered": unsteered, "steered": steered, "reprompt": reprompt, "seeds": seeds,
            "sigma": sigma, "steered_ssim": s_ssim, "reprompt_ssim": r_ssim,
            "sparsity": steering.sparsity_report(sigma, sp_layer)}


def dye_suite(lab: Lab, bank: PathologyVectorBank | None = None, config: SteerConfig | None = None,
              n_pairs: int | None = None, seed_start: int | None = None) -> dict:
    """Dye removal on dyed-lesion prompts: DDR before/after and whether the lesion survives."""
    rc = lab.config
    bank = bank or lab.bank("dye")
    alpha = rc.eval.dye_alpha if rc.eval.dye_alpha is not None else rc.steer.alpha
    config = config or steer_config(rc, alpha=alpha)
    n = rc.eval.n_pairs if n_pairs is None else n_pairs
    seeds = seed_range(rc.eval.pair_seed_start if seed_start is None else seed_start, n)
    prompts = source_prompts(synthgen.DYED, n)
    unsteered = lab.generate(prompts, seeds)
    steered, sigma = lab.steer(prompts, seeds, bank, config)
    masks = pair_masks(unsteered, steered)
    ssim, psnr, feat = background_scores(lab.oracle, unsteered, steered, masks)
    ddr_un = M.ddr(lab.oracle, unsteered)
    ddr_st = M.ddr(lab.oracle, steered)
    raw = (nanmean(feat), nanmean(ssim), nanmean(psnr))
    eff = M.effective_metrics(*raw, ddr_st) if None not in raw else M.EffectiveMetrics(None, None, None)
    lp_un = M.lesion_presence_rate(lab.oracle, unsteered)
    lp_st = M.lesion_presence_rate(lab.oracle, steered)
    fp = M.fingerprint({"config": rc.fingerprint, "steer": config.__dict__, "seeds": [seeds[0], n]})
    report = M.MetricsReport(
        "dye", n, bg_ssim=nanmean(ssim), bg_psnr=nanmean(psnr), bg_featdist=nanmean(feat),
        ddr=ddr_st, eff_lpips_proxy=eff.eff_lpips, eff_ssim=eff.eff_ssim, eff_psnr=eff.eff_psnr, config_fingerprint=fp,
        extra={"ddr_unsteered": ddr_un, "lesion_presence_unsteered": lp_un, "lesion_presence_steered": lp_st,
               "ddr_drop": ddr_un - ddr_st, "lesion_presence_drop": lp_un - lp_st},
    )
    return {"report": report, "unsteered": unsteered, "steered": steered, "seeds": seeds, "sigma": sigma}


def alpha_sweep(lab: Lab, alphas: Sequence[float] | None = None, bank: PathologyVectorBank | None = None,
                n_pairs: int | None = None, seed_start: int | None = None, workers: int = 1) -> list[dict]:
    """One metrics row per alpha (alpha = 0 is prepended as the identity reference)."""
    rc = lab.config
    bank = bank or lab.bank("lesion")
    alphas = list(rc.ablate.alpha_grid if alphas is None else alphas)
    n = rc.ablate.n_pairs if n_pairs is None else n_pairs
    seeds = seed_range(rc.eval.pair_seed_start if seed_start is None else seed_start, n)
    prompts = source_prompts(synthgen.LESION, n)
    unsteered = lab.generate(prompts, seeds)
    def cell(a: float) -> dict:
        steered, _ = lab.steer(prompts, seeds, bank, steer_config(rc, alpha=a))
        masks = pair_masks(unsteered, steered)
        ssim, psnr, feat = background_scores(lab.oracle, unsteered, steered, masks)
        flip, dp, k = eligible_flip(lab.oracle, unsteered, steered, synthgen.LESION)
        return {"alpha": a, "n": n, "n_eligible": k, "flip_rate": _nan_none(flip), "delta_p": _nan_none(dp),
                "bg_ssim": nanmean(ssim), "bg_psnr": nanmean(psnr), "bg_featdist": nanmean(feat),
                "identical_to_unsteered": bool(np.array_equal(steered, unsteered))}

    return ordered_map(cell, [0.0] + [a for a in alphas if a != 0.0], workers)


def window_ablation(lab: Lab, windows: Sequence[tuple[int, int]] | None = None,
                    n_pairs: int | None = None, seed_start: int | None = None, workers: int = 1) -> list[dict]:
    rc = lab.config
    bank = lab.bank("lesion")
    windows = rc.ablate.windows if windows is None else windows
    n = rc.ablate.n_pairs if n_pairs is None else n_pairs
    seeds = seed_range(rc.eval.pair_seed_start if seed_start is None else seed_start, n)
    prompts = source_prompts(synthgen.LESION, n)
    unsteered = lab.generate(prompts, seeds)
    def cell(src) -> dict:
        lo, hi = map_window(src[0], src[1], rc.ablate.source_depth, lab.cfg.n_layers)
        steered, _ = lab.steer(prompts, seeds, bank, steer_config(rc, layer_start=lo, layer_end=hi))
        ssim, psnr, feat = background_scores(lab.oracle, unsteered, steered, pair_masks(unsteered, steered))
        flip, dp, k = eligible_flip(lab.oracle, unsteered, steered, synthgen.LESION)
        return {"source_window": list(src), "layers": [lo, hi], "n": n, "n_eligible": k,
                "flip_rate": _nan_none(flip), "delta_p": _nan_none(dp), "bg_ssim": nanmean(ssim),
                "bg_psnr": nanmean(psnr), "bg_featdist": nanmean(feat)}

    return ordered_map(cell, windows, workers)


def bank_cosines(banks: dict[int, PathologyVectorBank]) -> list[dict]:
    """Mean cosine between vectors of two banks over every shared (layer, step)."""
    out = []
    zs = sorted(banks)
    for i, a in enumerate(zs):
        for b in zs[i + 1 :]:
            va, vb = banks[a].vectors.astype(np.float64), banks[b].vectors.astype(np.float64)
            cos = np.sum(va * vb, axis=-1)  # rows are unit norm
            out.append({"z_a": a, "z_b": b, "mean_cosine": float(cos.mean()), "min_cosine": float(cos.min())})
    return out


def z_grid(lab: Lab, zs: Sequence[int] | None = None, concept: str = "lesion",
           evaluate: bool = True, n_pairs: int | None = None, workers: int = 1) -> dict:
    """Banks for nested seed prefixes of size Z, their pairwise agreement, and optionally flip rates."""
    rc = lab.config
    zs = sorted(rc.ablate.z_grid if zs is None else zs)
    pos, neg = concept_prompts(concept)
    seeds = seed_range(rc.vectors.seed_start, zs[-1])
    pos_tr, neg_tr = steering.contrastive_traces(lab.params, lab.cfg, lab.schedule, pos, neg, seeds,
                                                 rc.vectors.layers, rc.vectors.vary_context, rc.eval.batch_size)
    banks = {z: steering.estimate_vectors(pos_tr[:z], neg_tr[:z]) for z in zs}
    for z, b in banks.items():
        b.meta["concept"] = concept
    rows = []
    if evaluate:
        n = rc.ablate.n_pairs if n_pairs is None else n_pairs
        ps = seed_range(rc.eval.pair_seed_start, n)
        prompts = source_prompts(synthgen.LESION, n)
        unsteered = lab.generate(prompts, ps)

        def cell(z: int) -> dict:
            steered, _ = lab.steer(prompts, ps, banks[z], steer_config(rc))
            ssim, psnr, feat = background_scores(lab.oracle, unsteered, steered, pair_masks(unsteered, steered))
            flip, dp, k = eligible_flip(lab.oracle, unsteered, steered, synthgen.LESION)
            return {"z": z, "n": n, "n_eligible": k, "flip_rate": _nan_none(flip), "delta_p": _nan_none(dp),
                    "bg_ssim": nanmean(ssim), "bg_psnr": nanmean(psnr), "bg_featdist": nanmean(feat)}

        rows = ordered_map(cell, zs, workers)
    return {"banks": banks, "cosines": bank_cosines(banks), "rows": rows}


def downstream_suite(lab: Lab, bank: PathologyVectorBank | None = None, config: SteerConfig | None = None) -> dict:
    """Real-only vs. re-prompt vs. counterfactual augmentation, scored on unseen backgrounds."""
    rc = lab.config
    e = rc.eval
    bank = bank or lab.bank("lesion")
    config = config or steer_config(rc)
    corpus = lab.corpus or build_corpus(rc)
    train_specs = corpus.subset("train")
    plain = [s for s in train_specs if s.label == synthgen.PLAIN][: e.downstream_real_per_class]
    lesion = [s for s in train_specs if s.label == synthgen.LESION][: e.downstream_real_per_class]
    real_x, _, _ = synthgen.render_batch(plain + lesion)
    real_y = ds.binary_labels(plain + lesion)
    test_specs = [s for s in synthgen.make_ood_scenes(rc.data.ood_per_class, rc.data.ood_seed) if not s.has_dye]
    test_x, _, _ = synthgen.render_batch(test_specs)
    test_y = ds.binary_labels(test_specs)
    seeds = seed_range(e.downstream_seed_start, e.downstream_pairs)
    prompts = source_prompts(synthgen.LESION, len(seeds))
    pos = lab.generate(prompts, seeds)
    steered, _ = lab.steer(prompts, seeds, bank, config)
    reprompt = lab.generate([p.with_concept(synthgen.CONCEPT_NORMAL) for p in prompts], seeds)
    synthetic = {"reprompt": ds.paired_set(pos, reprompt), "counterfactual": ds.paired_set(pos, steered)}
    settings = ds.DownstreamSettings(detector_seeds=tuple(e.detector_seeds), epochs=e.detector_epochs)
    results = ds.downstream_experiment(real_x, real_y, test_x, test_y, synthetic, settings)
    rows = {c: r.to_dict() for c, r in results.items()}
    margin = results["counterfactual"].auc_mean - results["none"].auc_mean
    return {"conditions": rows, "counterfactual_minus_real_auc": margin, "n_test": len(test_y),
            "n_real": len(real_y), "n_synthetic": len(synthetic["counterfactual"].labels)}


def ordered_map(fn, items, workers: int = 1) -> list:
    """``map`` over independent grid cells; results keep input order."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _nan_none(x: float) -> float | None:
    return None if x != x else float(x)
