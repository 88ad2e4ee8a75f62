"""Miniature diffusion transformer with cross-attention text conditioning.

Each block is pre-norm: ``x += SA(LN(x)); x += CA(LN(x), prompt); x +=
FF(LN(x))``. The cross-attention output (after its output projection, before
the residual add) is the only place prompt tokens touch image tokens, and it
is the single hook site per (layer, sampler step).
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Union

import numpy as np

from . import synthgen
from .errors import NumericError, ValidationError
from .nn import ops
from .nn.autodiff import Graph, Node
from .nn.io import load_tensor, save_tensor
from .nn.optim import Adam, AdamSettings
from .nn.rng import Rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    d: int = 64
    heads: int = 4
    patch: int = 4
    d_text: int = 32
    image_size: int = 32
    t_train: int = 200
    t_sample: int = 20
    ff_mult: int = 2
    channels: int = 3
    # linear beta range; with t_train=200 the terminal alpha-bar is ~0.13, so
    # x_T is not pure noise (see README, "Noise schedule")
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.d % self.heads:
            raise ValidationError("d must be divisible by heads")
        if self.image_size % self.patch:
            raise ValidationError("image_size must be divisible by patch")
        if not 1 <= self.t_sample <= self.t_train:
            raise ValidationError("t_sample must be in [1, t_train]")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def n_tokens(self) -> int:
        return self.grid**2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch**2


@dataclass(frozen=True)
class HookSite:
    layer: int
    step: int  # sampler step, 1 = noisiest

    def __str__(self) -> str:
        return f"l{self.layer}_t{self.step}"


Interceptor = Callable[[HookSite, np.ndarray], Union[np.ndarray, None]]
Hooks = Union[Interceptor, Mapping[HookSite, Interceptor], None]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, dt, f = cfg.d, cfg.d_text, cfg.ff_mult * cfg.d
    shapes = {
        "patch.w": (cfg.patch_dim, d), "patch.b": (d,), "pos": (cfg.n_tokens, d),
        "time": (cfg.t_train, d), "prompt": (synthgen.VOCAB_SIZE, dt),
    }
    for l in range(cfg.n_layers):
        p = f"l{l}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "sa.wqkv": (d, 3 * d), p + "sa.bqkv": (3 * d,), p + "sa.wo": (d, d), p + "sa.bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "ca.wq": (d, d), p + "ca.bq": (d,), p + "ca.wk": (dt, d), p + "ca.wv": (dt, d),
            p + "ca.wo": (d, d), p + "ca.bo": (d,),
            p + "ln3.g": (d,), p + "ln3.b": (d,),
            p + "ff.w1": (d, f), p + "ff.b1": (f,), p + "ff.w2": (f, d), p + "ff.b2": (d,),
        })
    shapes.update({"out.ln.g": (d,), "out.ln.b": (d,), "out.w": (d, cfg.patch_dim), "out.b": (cfg.patch_dim,)})
    return shapes


def _sinusoid(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    freq = np.exp(-math.log(1000.0) * np.arange(d // 2) / (d // 2))[None]
    return np.concatenate([np.sin(pos * freq), np.cos(pos * freq)], axis=1)


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = Rng(seed, "init")
    resid = 1.0 / math.sqrt(2 * cfg.n_layers)
    params = {}
    for name, shape in param_shapes(cfg).items():
        kind = name.split(".")[-1]
        if name == "time":
            val = 0.5 * _sinusoid(cfg.t_train, cfg.d)
        elif name == "pos":
            val = 0.5 * _sinusoid(cfg.n_tokens, cfg.d)[::-1] + 0.02 * rng.randn(shape)
        elif name == "prompt":
            val = rng.randn(shape)
        elif kind == "g":
            val = np.ones(shape)
        elif len(shape) == 1:
            val = np.zeros(shape)
        else:
            std = 1.0 / math.sqrt(shape[0])
            if kind in ("wo", "w2"):
                std *= resid
            if name == "out.w":
                std *= 0.1
            val = std * rng.randn(shape)
        params[name] = ops.as_tensor(val)
    return params


def param_checksum(params: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype="<f4").tobytes())
    return h.hexdigest()


# -- schedule ------------------------------------------------------------------

@dataclass
class DiffusionSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray
    timesteps: np.ndarray  # DDIM subsequence, strictly decreasing, t_train-1 ... 0

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "DiffusionSchedule":
        betas = np.linspace(cfg.beta_start, cfg.beta_end, cfg.t_train)
        alpha_bars = np.cumprod(1.0 - betas)
        ts = np.round(np.linspace(cfg.t_train - 1, 0, cfg.t_sample)).astype(np.int64)
        if cfg.t_sample > 1 and np.any(np.diff(ts) >= 0):
            raise ValidationError("DDIM subsequence is not strictly decreasing")
        return cls(betas, alpha_bars, ts)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    def alpha_bar_prev(self, step: int) -> float:
        """alpha-bar of the timestep after 1-based sampler ``step`` (1.0 after the last)."""
        return 1.0 if step >= len(self.timesteps) else float(self.alpha_bars[self.timesteps[step]])


def ddim_step(x_t: np.ndarray, eps: np.ndarray, ab_t: float, ab_prev: float) -> np.ndarray:
    """Deterministic (eta = 0) DDIM update."""
    f = x_t.dtype.type
    x0 = (x_t - f(math.sqrt(1.0 - ab_t)) * eps) / f(math.sqrt(ab_t))
    return f(math.sqrt(ab_prev)) * x0 + f(math.sqrt(1.0 - ab_prev)) * eps


# -- denoiser ------------------------------------------------------------------

def patchify(x: np.ndarray, p: int) -> np.ndarray:
    b, c, h, w = x.shape
    g = h // p
    return np.ascontiguousarray(x.reshape(b, c, g, p, g, p).transpose(0, 2, 4, 1, 3, 5).reshape(b, g * g, c * p * p))


def unpatchify(tokens: np.ndarray, p: int, c: int = 3) -> np.ndarray:
    b, n, _ = tokens.shape
    g = int(round(math.sqrt(n)))
    return np.ascontiguousarray(tokens.reshape(b, g, g, c, p, p).transpose(0, 3, 1, 4, 2, 5).reshape(b, c, g * p, g * p))


def _heads(g: Graph, x: Node, b: int, n: int, heads: int, dh: int) -> Node:
    """[B, n, heads*dh] -> [B*heads, n, dh]."""
    x = g.reshape(x, (b, n, heads, dh))
    x = g.transpose(x, (0, 2, 1, 3))
    return g.reshape(x, (b * heads, n, dh))


def _merge(g: Graph, x: Node, b: int, n: int, heads: int, dh: int) -> Node:
    x = g.reshape(x, (b, heads, n, dh))
    x = g.transpose(x, (0, 2, 1, 3))
    return g.reshape(x, (b, n, heads * dh))


def _attention(g: Graph, q: Node, k: Node, v: Node, dh: int) -> Node:
    scores = g.scale(g.matmul(q, g.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    return g.matmul(g.softmax_rows(scores), v)


def resolve_hook(hooks: Hooks, site: HookSite) -> Interceptor | None:
    if hooks is None:
        return None
    if callable(hooks):
        return hooks
    return hooks.get(site)


def validate_hooks(hooks: Hooks, cfg: ModelConfig) -> None:
    if hooks is None or callable(hooks):
        return
    for site in hooks:
        if not (0 <= site.layer < cfg.n_layers and 1 <= site.step <= cfg.t_sample):
            raise ValidationError(f"hook site {site} outside layers [0,{cfg.n_layers}) x steps [1,{cfg.t_sample}]")


def denoiser_graph(
    g: Graph,
    P: Mapping[str, Node],
    cfg: ModelConfig,
    x_t: np.ndarray,
    timesteps: np.ndarray,
    prompt: Node,
    hooks: Hooks = None,
    step: int | None = None,
) -> Node:
    """Build the forward pass on ``g``; returns predicted noise [B,3,H,W]."""
    b = x_t.shape[0]
    n, d, H = cfg.n_tokens, cfg.d, cfg.heads
    dh = d // H
    tokens = g.const(patchify(x_t, cfg.patch))
    temb = g.reshape(g.take_rows(P["time"], timesteps), (b, 1, d))
    h = g.add(g.add(g.linear(tokens, P["patch.w"], P["patch.b"]), P["pos"]), temb)
    m = prompt.shape[1]
    for l in range(cfg.n_layers):
        p = f"l{l}."
        # self-attention
        a = g.layer_norm(h, P[p + "ln1.g"], P[p + "ln1.b"])
        qkv = g.reshape(g.linear(a, P[p + "sa.wqkv"], P[p + "sa.bqkv"]), (b, n, 3, H, dh))
        qkv = g.transpose(qkv, (2, 0, 3, 1, 4))  # [3, B, H, n, dh]
        q, k, v = (g.reshape(g.slice(qkv, i), (b * H, n, dh)) for i in range(3))
        sa = _merge(g, _attention(g, q, k, v, dh), b, n, H, dh)
        h = g.add(h, g.linear(sa, P[p + "sa.wo"], P[p + "sa.bo"]))
        # cross-attention: queries from image tokens, keys/values from prompt tokens
        a = g.layer_norm(h, P[p + "ln2.g"], P[p + "ln2.b"])
        q = _heads(g, g.linear(a, P[p + "ca.wq"], P[p + "ca.bq"]), b, n, H, dh)
        k = _heads(g, g.linear(prompt, P[p + "ca.wk"]), b, m, H, dh)
        v = _heads(g, g.linear(prompt, P[p + "ca.wv"]), b, m, H, dh)
        ca = _merge(g, _attention(g, q, k, v, dh), b, n, H, dh)
        ca = g.linear(ca, P[p + "ca.wo"], P[p + "ca.bo"])
        fn = resolve_hook(hooks, HookSite(l, step)) if step is not None else None
        if fn is not None:
            out = fn(HookSite(l, step), ca.value)
            if out is not None:
                if out.shape != ca.shape:
                    raise ValidationError(f"interceptor at {HookSite(l, step)} returned shape {out.shape}")
                ca = g.const(out)
        h = g.add(h, ca)
        # feed-forward
        a = g.layer_norm(h, P[p + "ln3.g"], P[p + "ln3.b"])
        ff = g.linear(g.gelu(g.linear(a, P[p + "ff.w1"], P[p + "ff.b1"])), P[p + "ff.w2"], P[p + "ff.b2"])
        h = g.add(h, ff)
    h = g.layer_norm(h, P["out.ln.g"], P["out.ln.b"])
    out = g.linear(h, P["out.w"], P["out.b"])  # [B, n, patch_dim]
    return g.reshape(
        g.transpose(g.reshape(out, (b, cfg.grid, cfg.grid, cfg.channels, cfg.patch, cfg.patch)), (0, 3, 1, 4, 2, 5)),
        (b, cfg.channels, cfg.image_size, cfg.image_size),
    )


def encode_prompts(params: Mapping[str, np.ndarray], prompts) -> np.ndarray:
    """PromptSpecs (or one PromptSpec) -> [B, 4, d_text]."""
    if isinstance(prompts, synthgen.PromptSpec):
        prompts = [prompts]
    return np.stack([synthgen.encode_prompt(p, params["prompt"]) for p in prompts])


def forward_denoiser(
    params: Mapping[str, np.ndarray],
    cfg: ModelConfig,
    x_t: np.ndarray,
    timesteps,
    prompt_enc: np.ndarray,
    hooks: Hooks = None,
    step: int | None = None,
) -> np.ndarray:
    """Predicted noise for noisy images ``x_t`` [B,3,H,W] at training timesteps."""
    x_t = ops.as_tensor(x_t)
    b = x_t.shape[0]
    if x_t.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ValidationError(f"x_t shape {x_t.shape} does not match config")
    timesteps = np.broadcast_to(np.asarray(timesteps, dtype=np.int64), (b,))
    if timesteps.min() < 0 or timesteps.max() >= cfg.t_train:
        raise ValidationError("timestep outside schedule")
    prompt_enc = ops.as_tensor(prompt_enc)
    if prompt_enc.ndim == 2:
        prompt_enc = np.broadcast_to(prompt_enc, (b,) + prompt_enc.shape).copy()
    if step is not None and not 1 <= step <= cfg.t_sample:
        raise ValidationError(f"sampler step {step} outside [1, {cfg.t_sample}]")
    validate_hooks(hooks, cfg)
    g = Graph(record=False)
    P = {k: g.param(k, v) for k, v in params.items()}
    return denoiser_graph(g, P, cfg, x_t, timesteps, g.const(prompt_enc), hooks, step).value


# -- sampling ------------------------------------------------------------------

def initial_noise(seeds, cfg: ModelConfig) -> np.ndarray:
    """x_T for each seed; each seed owns its own stream, so batches are order-free."""
    shape = (cfg.channels, cfg.image_size, cfg.image_size)
    return np.stack([Rng(int(s), "x_T").randn(shape) for s in seeds])


@dataclass
class SampleResult:
    images: np.ndarray               # [B, 3, H, W] in [0, 1]
    latents: list[np.ndarray] = field(default_factory=list)  # x_T, then x after each step


def ddim_sample(
    params: Mapping[str, np.ndarray],
    cfg: ModelConfig,
    schedule: DiffusionSchedule,
    prompt_enc: np.ndarray,
    x_T: np.ndarray | None = None,
    rng: Rng | None = None,
    hooks: Hooks = None,
    keep_latents: bool = False,
) -> SampleResult:
    """Deterministic DDIM from ``x_T`` (or a draw from ``rng``); hooks fire at every step."""
    validate_hooks(hooks, cfg)
    if x_T is None:
        if rng is None:
            raise ValidationError("ddim_sample needs x_T or an rng")
        b = 1 if prompt_enc.ndim == 2 else prompt_enc.shape[0]
        x_T = rng.randn((b, cfg.channels, cfg.image_size, cfg.image_size))
    x = ops.as_tensor(x_T)
    latents = [x] if keep_latents else []
    for step, t in enumerate(schedule.timesteps, start=1):
        eps = forward_denoiser(params, cfg, x, int(t), prompt_enc, hooks, step)
        x = ops.check_finite(ddim_step(x, eps, float(schedule.alpha_bars[t]), schedule.alpha_bar_prev(step)), "ddim")
        if keep_latents:
            latents.append(x)
    images = np.clip((x + np.float32(1.0)) * np.float32(0.5), 0.0, 1.0).astype(np.float32)
    return SampleResult(images, latents)


def to_model_space(images: np.ndarray) -> np.ndarray:
    return ops.as_tensor(images) * np.float32(2.0) - np.float32(1.0)


# -- training ------------------------------------------------------------------

@dataclass
class TrainSettings:
    epochs: int = 60
    batch_size: int = 32
    lr: float = 3e-4
    seed: int = 0
    max_steps: int | None = None
    log_every: int = 50
    ema_decay: float | None = None  # when set, ``TrainResult.params`` is the weight average


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    loss_curve: list[float]
    last_params: dict[str, np.ndarray] | None = None  # raw optimizer weights when averaging is on

    def smoothed(self, window: int = 50) -> np.ndarray:
        c = np.asarray(self.loss_curve, dtype=np.float64)
        w = max(1, min(window, len(c)))
        return np.convolve(c, np.ones(w) / w, mode="valid")


def diffusion_loss(
    g: Graph,
    P: Mapping[str, Node],
    cfg: ModelConfig,
    schedule: DiffusionSchedule,
    x0: np.ndarray,
    tokens: np.ndarray,
    t: np.ndarray,
    eps: np.ndarray,
) -> Node:
    ab = schedule.alpha_bars[t].astype(np.float32)[:, None, None, None]
    x_t = np.sqrt(ab) * x0 + np.sqrt(np.float32(1.0) - ab) * eps
    prompt = g.take_rows(P["prompt"], tokens)  # [B, 4, d_text]
    pred = denoiser_graph(g, P, cfg, x_t.astype(np.float32), t, prompt)
    return g.mse(pred, g.const(eps))


def train(
    images: np.ndarray,
    prompt_tokens: np.ndarray,
    cfg: ModelConfig,
    settings: TrainSettings,
    init: dict[str, np.ndarray] | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """epsilon-prediction training with Adam; ``images`` in [0, 1]."""
    n = len(images)
    if n == 0:
        raise ValidationError("empty training split")
    schedule = DiffusionSchedule.from_config(cfg)
    params = init if init is not None else init_params(cfg, settings.seed)
    params = {k: v.copy() for k, v in params.items()}
    opt = Adam(params, AdamSettings(lr=settings.lr))
    x_all = to_model_space(images)
    tokens_all = np.asarray(prompt_tokens, dtype=np.int64)
    root = Rng(settings.seed, "train")
    ema = {k: v.copy() for k, v in params.items()} if settings.ema_decay is not None else None

    def result() -> TrainResult:
        if ema is None:
            return TrainResult(params, losses)
        return TrainResult(ema, losses, params)

    losses: list[float] = []
    step = 0
    for epoch in range(settings.epochs):
        order = root.substream(f"epoch{epoch}").permutation(n)
        for start in range(0, n, settings.batch_size):
            if settings.max_steps is not None and step >= settings.max_steps:
                return result()
            idx = order[start : start + settings.batch_size]
            srng = root.substream(f"step{step}")
            t = srng.integers(0, cfg.t_train, (len(idx),))
            eps = srng.randn((len(idx),) + x_all.shape[1:])
            g = Graph()
            P = {k: g.param(k, v) for k, v in params.items()}
            try:
                loss = diffusion_loss(g, P, cfg, schedule, x_all[idx], tokens_all[idx], t, eps)
                grads = g.backward(loss)
            except NumericError as exc:
                raise NumericError(f"training diverged at epoch {epoch} step {step}: {exc}") from exc
            lv = float(loss.value)
            if not math.isfinite(lv):
                raise NumericError(f"training diverged at epoch {epoch} step {step}: loss={lv}")
            opt.step(params, grads)
            if ema is not None:
                # warm-up keeps the average from anchoring on the initial weights
                d = np.float32(min(settings.ema_decay, (1.0 + step) / (10.0 + step)))
                for k in sorted(ema):
                    ema[k] *= d
                    ema[k] += (np.float32(1.0) - d) * params[k]
            losses.append(lv)
            if progress is not None and step % settings.log_every == 0:
                progress(step, lv)
            step += 1
    return result()


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path: str | Path, params: Mapping[str, np.ndarray], cfg: ModelConfig, meta: dict | None = None) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    for name, arr in params.items():
        save_tensor(out / f"{name}.stensor", arr)
    manifest = {"config": asdict(cfg), "checksum": param_checksum(params), "params": sorted(params), **(meta or {})}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_checkpoint(path: str | Path, require_trained: bool = True) -> tuple[dict[str, np.ndarray], ModelConfig, dict]:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    if require_trained and not manifest.get("trained", False):
        raise ValidationError(f"{root}: checkpoint is flagged untrained")
    cfg = ModelConfig(**manifest["config"])
    params = {name: load_tensor(root / f"{name}.stensor") for name in manifest["params"]}
    if param_checksum(params) != manifest["checksum"]:
        raise ValidationError(f"{root}: parameter checksum mismatch")
    return params, cfg, manifest
