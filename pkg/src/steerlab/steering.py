"""Contrastive concept vectors in cross-attention space and gated steering.

A concept vector for (layer, step) is the normalized difference between the
mean cross-attention output under a positive prompt and under a negative
prompt, averaged over seeds and image tokens. Steering removes, per token,
the part of the activation aligned with that vector::

    sigma_i = max(<h_i, v>, 0)
    h'_i    = h_i - alpha * sigma_i * v

The gate is a plain dot product (no 1/|h| factor), so tokens that express the
concept more strongly are pushed harder.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import dit, synthgen
from .errors import DegenerateDirectionError, ValidationError
from .nn import ops
from .nn.io import load_tensor, save_tensor
from .synthgen import PromptSpec

UNIT_TOL = 1e-6
DEGENERATE_NORM = 1e-8
MODES = ("remove", "add")


@dataclass
class ActivationTrace:
    prompt: PromptSpec
    seed: int
    entries: dict[tuple[int, int], np.ndarray]  # (layer, step) -> [tokens, d]

    @property
    def sites(self) -> list[tuple[int, int]]:
        return sorted(self.entries)

    @property
    def n_tokens(self) -> int:
        return next(iter(self.entries.values())).shape[0]


def _as_prompt_list(prompt, n: int) -> list[PromptSpec]:
    if isinstance(prompt, PromptSpec):
        return [prompt] * n
    prompts = list(prompt)
    if len(prompts) != n:
        raise ValidationError(f"got {len(prompts)} prompts for {n} seeds")
    return prompts


def generate(params, cfg: dit.ModelConfig, schedule: dit.DiffusionSchedule, prompt, seeds: Sequence[int],
             hooks: dit.Hooks = None) -> np.ndarray:
    """Plain batch generation; one image per seed."""
    prompts = _as_prompt_list(prompt, len(seeds))
    enc = dit.encode_prompts(params, prompts)
    return dit.ddim_sample(params, cfg, schedule, enc, x_T=dit.initial_noise(seeds, cfg), hooks=hooks).images


def capture_activations(
    params,
    cfg: dit.ModelConfig,
    schedule: dit.DiffusionSchedule,
    prompt,
    seeds: Sequence[int],
    layers: Sequence[int],
    batch_size: int = 32,
) -> list[ActivationTrace]:
    """One unsteered DDIM run per seed, recording CA outputs at ``layers`` x all steps."""
    layers = sorted(set(int(l) for l in layers))
    if not layers or layers[0] < 0 or layers[-1] >= cfg.n_layers:
        raise ValidationError(f"capture layers {layers} outside [0, {cfg.n_layers})")
    if len(seeds) < 1:
        raise ValidationError("need at least one seed")
    prompts = _as_prompt_list(prompt, len(seeds))
    traces: list[ActivationTrace] = []
    for start in range(0, len(seeds), batch_size):
        chunk = list(seeds[start : start + batch_size])
        store: dict[tuple[int, int], np.ndarray] = {}
        wanted = set(layers)

        def capture(site: dit.HookSite, h: np.ndarray):
            if site.layer in wanted:
                store[(site.layer, site.step)] = h.copy()
            return None

        generate(params, cfg, schedule, prompts[start : start + batch_size], chunk, hooks=capture)
        for i, seed in enumerate(chunk):
            traces.append(ActivationTrace(prompts[start + i], int(seed), {k: v[i] for k, v in store.items()}))
    return traces


# -- vector bank ---------------------------------------------------------------

@dataclass
class PathologyVectorBank:
    layers: list[int]          # contiguous, ascending
    t_sample: int
    vectors: np.ndarray        # [len(layers), t_sample, d], unit rows
    mean_pos: np.ndarray
    mean_neg: np.ndarray
    pos_prompts: list[PromptSpec]
    neg_prompts: list[PromptSpec]
    seeds: list[int]
    meta: dict = field(default_factory=dict)

    @property
    def Z(self) -> int:
        return len(self.seeds)

    @property
    def d(self) -> int:
        return int(self.vectors.shape[-1])

    def vector(self, layer: int, step: int) -> np.ndarray:
        if layer not in self.layers or not 1 <= step <= self.t_sample:
            raise ValidationError(f"bank has no vector for layer={layer} step={step}")
        return self.vectors[self.layers.index(layer), step - 1]

    def negated(self) -> "PathologyVectorBank":
        return PathologyVectorBank(self.layers, self.t_sample, -self.vectors, self.mean_neg, self.mean_pos,
                                   self.neg_prompts, self.pos_prompts, self.seeds, dict(self.meta))

    def save(self, path: str | Path) -> None:
        out = Path(path)
        out.mkdir(parents=True, exist_ok=True)
        save_tensor(out / "v.stensor", self.vectors)
        save_tensor(out / "mean_pos.stensor", self.mean_pos)
        save_tensor(out / "mean_neg.stensor", self.mean_neg)
        manifest = {
            "pos_prompts": [list(p.tokens) for p in self.pos_prompts],
            "neg_prompts": [list(p.tokens) for p in self.neg_prompts],
            "pos_text": self.pos_prompts[0].text,
            "neg_text": self.neg_prompts[0].text,
            "Z": self.Z,
            "layer_range": [self.layers[0], self.layers[-1]],
            "t_sample": self.t_sample,
            "d": self.d,
            "seeds": self.seeds,
            **self.meta,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "PathologyVectorBank":
        root = Path(path)
        m = json.loads((root / "manifest.json").read_text())
        lo, hi = m["layer_range"]
        known = {"pos_prompts", "neg_prompts", "pos_text", "neg_text", "Z", "layer_range", "t_sample", "d", "seeds"}
        bank = cls(
            list(range(lo, hi + 1)), int(m["t_sample"]),
            load_tensor(root / "v.stensor"), load_tensor(root / "mean_pos.stensor"), load_tensor(root / "mean_neg.stensor"),
            [PromptSpec(tuple(p)) for p in m["pos_prompts"]], [PromptSpec(tuple(p)) for p in m["neg_prompts"]],
            [int(s) for s in m["seeds"]], {k: v for k, v in m.items() if k not in known},
        )
        if bank.vectors.shape != (len(bank.layers), bank.t_sample, int(m["d"])):
            raise ValidationError(f"{root}: v.stensor shape {bank.vectors.shape} disagrees with manifest")
        return bank


def _trace_grid(traces: Sequence[ActivationTrace]) -> tuple[list[tuple[int, int]], int]:
    if not traces:
        raise ValidationError("empty trace set")
    sites = traces[0].sites
    n_tok = traces[0].n_tokens
    for tr in traces:
        if tr.sites != sites:
            raise ValidationError(f"trace for seed {tr.seed} covers a different (layer, step) grid")
        if any(e.shape[0] != n_tok for e in tr.entries.values()):
            raise ValidationError(f"trace for seed {tr.seed} has inconsistent token count")
    return sites, n_tok


def _mean_activation(traces: Sequence[ActivationTrace], site: tuple[int, int]) -> np.ndarray:
    """Mean over tokens per seed, then over seeds in ascending seed order."""
    acc = None
    for tr in sorted(traces, key=lambda t: t.seed):
        m = tr.entries[site].mean(axis=0, dtype=np.float32)
        acc = m.copy() if acc is None else acc + m
    return acc / np.float32(len(traces))


def estimate_vectors(pos: Sequence[ActivationTrace], neg: Sequence[ActivationTrace]) -> PathologyVectorBank:
    pos_sites, pos_tok = _trace_grid(pos)
    neg_sites, neg_tok = _trace_grid(neg)
    if pos_sites != neg_sites or pos_tok != neg_tok:
        raise ValidationError("positive and negative traces cover different grids")
    if sorted(t.seed for t in pos) != sorted(t.seed for t in neg):
        raise ValidationError("positive and negative traces must share seeds")
    layers = sorted({l for l, _ in pos_sites})
    steps = sorted({t for _, t in pos_sites})
    if layers != list(range(layers[0], layers[-1] + 1)) or steps != list(range(1, len(steps) + 1)):
        raise ValidationError("traces must cover a contiguous layer range and steps 1..T")
    if len(pos_sites) != len(layers) * len(steps):
        raise ValidationError("traces do not cover the full (layer, step) grid")
    d = pos[0].entries[pos_sites[0]].shape[1]
    shape = (len(layers), len(steps), d)
    v = np.zeros(shape, np.float32)
    mp = np.zeros(shape, np.float32)
    mn = np.zeros(shape, np.float32)
    for li, l in enumerate(layers):
        for t in steps:
            hp = _mean_activation(pos, (l, t))
            hn = _mean_activation(neg, (l, t))
            diff = hp - hn
            norm = float(np.sqrt(np.dot(diff.astype(np.float64), diff.astype(np.float64))))
            if norm < DEGENERATE_NORM:
                raise DegenerateDirectionError(l, t, norm)
            v[li, t - 1] = diff / np.float32(norm)
            mp[li, t - 1] = hp
            mn[li, t - 1] = hn
    by_seed = lambda trs: sorted(trs, key=lambda t: t.seed)
    return PathologyVectorBank(
        layers, len(steps), v, mp, mn,
        [t.prompt for t in by_seed(pos)], [t.prompt for t in by_seed(neg)], sorted(t.seed for t in pos),
    )


def contrastive_prompts(pos: PromptSpec, neg: PromptSpec, seeds: Sequence[int], vary_context: bool = True):
    """Per-seed prompt pairs; context varies with the seed index, the concept slot stays fixed."""
    if vary_context:
        return ([pos.with_context(i) for i in range(len(seeds))], [neg.with_context(i) for i in range(len(seeds))])
    return [pos] * len(seeds), [neg] * len(seeds)


def token_mean_trace(trace: ActivationTrace) -> ActivationTrace:
    """Collapse every entry to its [1, d] token mean; estimation results are unchanged."""
    return ActivationTrace(trace.prompt, trace.seed, {k: v.mean(axis=0, dtype=np.float32)[None] for k, v in trace.entries.items()})


def contrastive_traces(params, cfg, schedule, pos: PromptSpec, neg: PromptSpec, seeds: Sequence[int],
                       layers: Sequence[int] | None = None, vary_context: bool = True, batch_size: int = 32):
    """Token-mean traces for both prompts, batch by batch; a prefix of the
    result equals the traces of a prefix of ``seeds``."""
    layers = list(range(cfg.n_layers)) if layers is None else sorted(layers)
    seeds = [int(s) for s in seeds]
    pos_prompts, neg_prompts = contrastive_prompts(pos, neg, seeds, vary_context)
    pos_tr, neg_tr = [], []
    for start in range(0, len(seeds), batch_size):
        sl = slice(start, start + batch_size)
        for prompts, out in ((pos_prompts, pos_tr), (neg_prompts, neg_tr)):
            for tr in capture_activations(params, cfg, schedule, prompts[sl], seeds[sl], layers, batch_size):
                out.append(token_mean_trace(tr))
    return pos_tr, neg_tr


def estimate_bank(params, cfg, schedule, pos: PromptSpec, neg: PromptSpec, seeds: Sequence[int],
                  layers: Sequence[int] | None = None, vary_context: bool = True, batch_size: int = 32) -> PathologyVectorBank:
    """Capture + estimate, keeping only per-seed token means in memory."""
    pos_tr, neg_tr = contrastive_traces(params, cfg, schedule, pos, neg, seeds, layers, vary_context, batch_size)
    return estimate_vectors(pos_tr, neg_tr)


# -- steering ------------------------------------------------------------------

@dataclass(frozen=True)
class SteerConfig:
    alpha: float = 2.5
    layer_start: int = 2
    layer_end: int = 5
    steps: tuple[int, ...] | None = None  # None = every sampler step
    mode: str = "remove"

    def __post_init__(self):
        if self.alpha < 0:
            raise ValidationError("alpha must be nonnegative (use mode='add' to push toward the concept)")
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}")
        if self.layer_start > self.layer_end:
            raise ValidationError("layer_start must be <= layer_end")
        if self.steps is not None and len(self.steps) == 0:
            raise ValidationError("step set must be nonempty")

    @property
    def layers(self) -> list[int]:
        return list(range(self.layer_start, self.layer_end + 1))

    def step_set(self, t_sample: int) -> list[int]:
        return list(range(1, t_sample + 1)) if self.steps is None else sorted(self.steps)

    def validate(self, cfg: dit.ModelConfig, bank: PathologyVectorBank | None = None) -> None:
        if self.layer_start < 0 or self.layer_end >= cfg.n_layers:
            raise ValidationError(f"layer window [{self.layer_start}, {self.layer_end}] outside [0, {cfg.n_layers})")
        steps = self.step_set(cfg.t_sample)
        if steps[0] < 1 or steps[-1] > cfg.t_sample:
            raise ValidationError(f"steps outside [1, {cfg.t_sample}]")
        if bank is not None:
            missing = [l for l in self.layers if l not in bank.layers]
            if missing or bank.t_sample != cfg.t_sample:
                raise ValidationError(f"bank (layers {bank.layers[0]}-{bank.layers[-1]}, T={bank.t_sample}) does not cover config")


def ssps_apply(h: np.ndarray, v: np.ndarray, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Gated removal of the ``v``-aligned component of every token.

    ``h`` is [..., d] (tokens along the leading axes). Returns the steered
    activations and the per-token gate ``sigma`` (before scaling by alpha).
    Tokens with a closed gate are returned bit-identical.
    """
    v = ops.as_tensor(v)
    norm = float(np.sqrt(np.dot(v.astype(np.float64), v.astype(np.float64))))
    if abs(norm - 1.0) > UNIT_TOL:
        raise ValidationError(f"steering vector must be unit norm, got {norm:.8f}")
    h = ops.as_tensor(h)
    flat = h.reshape(-1, h.shape[-1])
    sigma = np.maximum(ops.matmul(flat, v[:, None])[:, 0], np.float32(0.0))
    scale = np.float32(alpha) * sigma
    moved = flat - scale[:, None] * v[None, :]
    out = np.where((scale > 0)[:, None], moved, flat)
    return out.reshape(h.shape), sigma.reshape(h.shape[:-1])


class SteeringHook:
    """Interceptor applying :func:`ssps_apply` inside the configured window; records sigma."""

    def __init__(self, bank: PathologyVectorBank, config: SteerConfig, t_sample: int):
        self.config = config
        sign = np.float32(-1.0 if config.mode == "add" else 1.0)
        self.vectors = {(l, t): sign * bank.vector(l, t) for l in config.layers for t in config.step_set(t_sample)}
        self.sigma: dict[tuple[int, int], np.ndarray] = {}

    def __call__(self, site: dit.HookSite, h: np.ndarray):
        v = self.vectors.get((site.layer, site.step))
        if v is None:
            return None
        out, sigma = ssps_apply(h, v, self.config.alpha)
        self.sigma[(site.layer, site.step)] = sigma
        return out


@dataclass
class PairBatch:
    seeds: list[int]
    unsteered: np.ndarray                                # [B, 3, H, W]
    steered: np.ndarray
    sigma: dict[tuple[int, int], np.ndarray]             # (layer, step) -> [B, tokens]

    def sigma_stack(self, i: int) -> dict[tuple[int, int], np.ndarray]:
        return {k: v[i] for k, v in self.sigma.items()}


def generate_pairs(params, cfg, schedule, prompt, bank: PathologyVectorBank, config: SteerConfig,
                   seeds: Sequence[int], batch_size: int = 32) -> PairBatch:
    """Unsteered and steered images from identical x_T per seed."""
    config.validate(cfg, bank)
    seeds = [int(s) for s in seeds]
    prompts = _as_prompt_list(prompt, len(seeds))
    un, st, sig = [], [], []
    for start in range(0, len(seeds), batch_size):
        chunk = seeds[start : start + batch_size]
        pr = prompts[start : start + batch_size]
        un.append(generate(params, cfg, schedule, pr, chunk))
        hook = SteeringHook(bank, config, cfg.t_sample)
        st.append(generate(params, cfg, schedule, pr, chunk, hooks=hook))
        sig.append(hook.sigma)
    sigma = {k: np.concatenate([s[k] for s in sig]) for k in sig[0]}
    return PairBatch(seeds, np.concatenate(un), np.concatenate(st), sigma)


def generate_pair(params, cfg, schedule, prompt: PromptSpec, bank: PathologyVectorBank, config: SteerConfig, seed: int):
    """(unsteered image, steered image, sigma stack) for a single seed."""
    pb = generate_pairs(params, cfg, schedule, prompt, bank, config, [seed])
    return pb.unsteered[0], pb.steered[0], pb.sigma_stack(0)


# -- sigma maps ----------------------------------------------------------------

def sigma_step_means(stack: Mapping[tuple[int, int], np.ndarray], layer: int) -> dict[int, float]:
    return {t: float(np.mean(s)) for (l, t), s in sorted(stack.items()) if l == layer}


def sparsity_report(stack: Mapping[tuple[int, int], np.ndarray], layer: int) -> dict:
    """Mean gate and open-token fraction at the first vs. last recorded step (soft flag, not a gate)."""
    means = sigma_step_means(stack, layer)
    if not means:
        raise ValidationError(f"no sigma entries for layer {layer}")
    steps = sorted(means)
    first, last = steps[0], steps[-1]
    open_frac = {t: float(np.mean(stack[(layer, t)] > 0)) for t in steps}
    return {
        "layer": layer,
        "first_step": first,
        "final_step": last,
        "mean_sigma_first": means[first],
        "mean_sigma_final": means[last],
        "open_fraction_first": open_frac[first],
        "open_fraction_final": open_frac[last],
        "sparser_at_end": bool(means[last] < means[first]),
        "mean_sigma_per_step": {str(t): means[t] for t in steps},
        "open_fraction_per_step": {str(t): open_frac[t] for t in steps},
    }


def sigma_to_map(sigma: np.ndarray, lo: float, hi: float, image_size: int) -> np.ndarray:
    grid = int(round(np.sqrt(sigma.size)))
    m = sigma.reshape(grid, grid).astype(np.float32)
    m = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
    up = image_size // grid
    return np.kron(m, np.ones((up, up), np.float32))


def export_sigma_maps(stack: Mapping[tuple[int, int], np.ndarray], layer: int, steps: Sequence[int] | None,
                      out_dir: str | Path, image_size: int = synthgen.IMAGE_SIZE) -> dict:
    """Write ``sigma_l{l}_t{t}.pgm`` per requested step plus ``index.json``.

    All maps of the stack share one min-max scale, so brightness is comparable
    across steps. A constant stack renders black.
    """
    if not stack:
        raise ValidationError("empty sigma stack")
    steps = sorted(t for (l, t) in stack if l == layer) if steps is None else list(steps)
    missing = [t for t in steps if (layer, t) not in stack]
    if missing:
        raise ValidationError(f"sigma stack lacks layer {layer} steps {missing}")
    values = np.concatenate([np.ravel(s) for s in stack.values()])
    lo, hi = float(values.min()), float(values.max())
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for t in steps:
        name = f"sigma_l{layer}_t{t}.pgm"
        synthgen.write_pgm(out / name, sigma_to_map(stack[(layer, t)], lo, hi, image_size))
        files.append(name)
    index = {
        "layer": layer,
        "steps": steps,
        "files": files,
        "raw_min": lo,
        "raw_max": hi,
        "mean_sigma_per_step": {str(t): m for t, m in sigma_step_means(stack, layer).items()},
    }
    (out / "index.json").write_text(json.dumps(index, indent=1))
    return index
