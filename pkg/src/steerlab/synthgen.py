"""Procedural concept images with exact ground-truth masks.

Scenes are textured "mucosa" backgrounds with an optional soft elliptical
lesion and an optional blue dye tint over the lesion core. Background pixels
are drawn from their own random stream, so a scene's background is identical
whatever its concept flags are.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .nn.rng import Rng

IMAGE_SIZE = 32
CHANNELS = 3
VOCAB_SIZE = 16
PROMPT_LEN = 4

# token ids
CONTEXT_TOKENS = (0, 1, 2, 3)
FILLER_TOKEN = 4
SITE_MAIN, SITE_ALT = 6, 7
CONCEPT_NORMAL, CONCEPT_LESION, CONCEPT_DYED = 8, 9, 10
CONCEPT_SLOT = 3
VOCAB = {
    0: "an image", 1: "a view", 2: "a frame", 3: "a capture", 4: "of", 5: "showing",
    6: "mucosa", 7: "alt-mucosa", 8: "normal", 9: "lesion", 10: "dyed lesion",
}

CLASS_NAMES = ("plain", "lesion", "dyed", "alt")
PLAIN, LESION, DYED, ALT = range(4)

# background_style palettes: (base rgb, texture amplitude rgb, chroma-noise rgb)
_STYLES = (
    ((0.80, 0.50, 0.48), (0.08, 0.06, 0.06), (0.03, 0.02, -0.02)),
    ((0.84, 0.55, 0.46), (0.07, 0.07, 0.05), (0.02, -0.02, 0.02)),
    ((0.76, 0.47, 0.50), (0.09, 0.05, 0.06), (-0.02, 0.03, 0.02)),
    ((0.86, 0.58, 0.52), (0.06, 0.06, 0.07), (0.03, 0.02, 0.03)),
    # held out of training: used for the unseen-background test split
    ((0.72, 0.52, 0.58), (0.08, 0.06, 0.08), (0.03, -0.02, 0.03)),
    ((0.90, 0.63, 0.42), (0.06, 0.08, 0.05), (-0.03, 0.02, 0.02)),
    # "alt" site family
    ((0.86, 0.82, 0.64), (0.06, 0.06, 0.07), (0.02, 0.02, -0.03)),
    ((0.80, 0.84, 0.70), (0.07, 0.05, 0.06), (-0.02, 0.03, 0.02)),
)
N_STYLES = len(_STYLES)
MAIN_STYLES = (0, 1, 2, 3)
HELDOUT_STYLES = (4, 5)
ALT_STYLES = (6, 7)

LESION_AREA_BOUNDS = (0.02, 0.20)
_LESION_RGB = np.array([0.60, 0.12, 0.14])
_DYE_RGB = np.array([0.16, 0.26, 0.80])
_EDGE = 0.35
_DYE_RADIUS = 0.8


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    has_lesion: bool = False
    has_dye: bool = False
    background_style: int = 0
    image_size: int = IMAGE_SIZE
    channels: int = CHANNELS

    def __post_init__(self):
        if self.has_dye and not self.has_lesion:
            raise ValidationError("has_dye requires has_lesion")
        if not 0 <= self.background_style < N_STYLES:
            raise ValidationError(f"background_style must be in [0, {N_STYLES})")
        if self.channels != CHANNELS:
            raise ValidationError("only 3-channel scenes are supported")

    @property
    def label(self) -> int:
        if self.has_dye:
            return DYED
        if self.has_lesion:
            return LESION
        return ALT if self.background_style in ALT_STYLES else PLAIN

    def with_flags(self, has_lesion: bool, has_dye: bool = False) -> "SceneSpec":
        return SceneSpec(self.seed, has_lesion, has_dye, self.background_style, self.image_size, self.channels)


@dataclass
class Scene:
    image: np.ndarray       # [3, H, W] in [0, 1]
    lesion_mask: np.ndarray  # [H, W] in {0, 1}
    dye_mask: np.ndarray
    spec: SceneSpec


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def value_noise(rng: Rng, size: int, cells: int) -> np.ndarray:
    """Smoothly interpolated lattice noise in [-1, 1] on a size x size grid."""
    grid = rng.uniform((cells + 1, cells + 1), -1.0, 1.0)
    coord = (np.arange(size) + 0.5) / size * cells
    i0 = np.minimum(coord.astype(int), cells - 1)
    f = _smoothstep(coord - i0)
    rows0, rows1 = grid[i0], grid[i0 + 1]
    top = rows0[:, i0] * (1 - f) + rows0[:, i0 + 1] * f
    bot = rows1[:, i0] * (1 - f) + rows1[:, i0 + 1] * f
    return top * (1 - f[:, None]) + bot * f[:, None]


def _background(spec: SceneSpec) -> np.ndarray:
    rng = Rng(spec.seed, "background")
    s = spec.image_size
    base, amp, chroma = (np.array(v)[:, None, None] for v in _STYLES[spec.background_style])
    lum = 0.7 * value_noise(rng, s, 4) + 0.3 * value_noise(rng, s, 8)
    tint = value_noise(rng, s, 3)
    yy, xx = np.mgrid[0:s, 0:s]
    r2 = ((yy + 0.5 - s / 2) ** 2 + (xx + 0.5 - s / 2) ** 2) / (s / 2) ** 2
    vignette = 1.0 - 0.12 * r2
    img = (base + amp * lum[None] + chroma * tint[None]) * vignette[None]
    return np.clip(img, 0.0, 1.0)


def _lesion_field(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Normalized ellipse radius d (d < 1 inside) and per-pixel shading noise."""
    rng = Rng(spec.seed, "lesion")
    s = spec.image_size
    cy, cx = rng.uniform((2,), 0.28 * s, 0.72 * s)
    frac = rng.uniform((), 0.03, 0.17)
    aspect = rng.uniform((), 0.65, 1.5)
    theta = rng.uniform((), 0.0, np.pi)
    area = frac * s * s / np.pi
    a, b = np.sqrt(area * aspect), np.sqrt(area / aspect)
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    d = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    return d, value_noise(rng, s, 6)


def render_scene(spec: SceneSpec) -> Scene:
    img = _background(spec)
    s = spec.image_size
    lesion_mask = np.zeros((s, s), dtype=np.float32)
    dye_mask = np.zeros((s, s), dtype=np.float32)
    if spec.has_lesion:
        d, shade = _lesion_field(spec)
        inside = d < 1.0
        alpha = np.where(inside, _smoothstep((1.0 - d) / _EDGE), 0.0)
        col = _LESION_RGB[:, None, None] * (0.85 + 0.25 * (1.0 - np.minimum(d, 1.0)) + 0.08 * shade)[None]
        if spec.has_dye:
            dye_in = d < _DYE_RADIUS
            dye_alpha = np.where(dye_in, _smoothstep((_DYE_RADIUS - d) / 0.3), 0.0)
            col = col * (1 - 0.85 * dye_alpha[None]) + 0.85 * dye_alpha[None] * _DYE_RGB[:, None, None]
            dye_mask = dye_in.astype(np.float32)
        img = np.where(inside[None], (1 - alpha[None]) * img + alpha[None] * col, img)
        lesion_mask = inside.astype(np.float32)
    return Scene(np.clip(img, 0.0, 1.0).astype(np.float32), lesion_mask, dye_mask, spec)


# -- prompts -------------------------------------------------------------------

@dataclass(frozen=True)
class PromptSpec:
    tokens: tuple[int, int, int, int]

    def __post_init__(self):
        if len(self.tokens) != PROMPT_LEN:
            raise ValidationError(f"prompts have exactly {PROMPT_LEN} tokens")
        bad = [t for t in self.tokens if not 0 <= t < VOCAB_SIZE]
        if bad:
            raise ValidationError(f"out-of-vocabulary token ids {bad}")

    @classmethod
    def for_class(cls, label: int, context: int = 0) -> "PromptSpec":
        site = SITE_ALT if label == ALT else SITE_MAIN
        concept = {PLAIN: CONCEPT_NORMAL, ALT: CONCEPT_NORMAL, LESION: CONCEPT_LESION, DYED: CONCEPT_DYED}[label]
        return cls((CONTEXT_TOKENS[context % len(CONTEXT_TOKENS)], FILLER_TOKEN, site, concept))

    def with_concept(self, concept: int) -> "PromptSpec":
        t = list(self.tokens)
        t[CONCEPT_SLOT] = concept
        return PromptSpec(tuple(t))

    def with_context(self, context: int) -> "PromptSpec":
        t = list(self.tokens)
        t[0] = CONTEXT_TOKENS[context % len(CONTEXT_TOKENS)]
        return PromptSpec(tuple(t))

    @property
    def text(self) -> str:
        return " ".join(VOCAB.get(t, f"<{t}>") for t in self.tokens)


def prompt_for_scene(spec: SceneSpec) -> PromptSpec:
    context = Rng(spec.seed, "context").integers(0, len(CONTEXT_TOKENS))
    return PromptSpec.for_class(spec.label, context)


def encode_prompt(spec: PromptSpec, table: np.ndarray) -> np.ndarray:
    if table.shape[0] != VOCAB_SIZE:
        raise ValidationError(f"embedding table must have {VOCAB_SIZE} rows")
    return np.ascontiguousarray(table[list(spec.tokens)])


# -- corpus --------------------------------------------------------------------

SPLITS = ("train", "val", "test")


@dataclass
class Corpus:
    specs: list[SceneSpec]
    splits: list[str]
    n_per_class: int
    split_seed: int

    def subset(self, split: str) -> list[SceneSpec]:
        return [s for s, sp in zip(self.specs, self.splits) if sp == split]

    def manifest(self) -> list[dict]:
        return [
            {"seed": s.seed, "has_lesion": s.has_lesion, "has_dye": s.has_dye,
             "background_style": s.background_style, "split": sp}
            for s, sp in zip(self.specs, self.splits)
        ]

    def save_manifest(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=1))

    @classmethod
    def from_manifest(cls, rows: list[dict], n_per_class: int = 0, split_seed: int = 0) -> "Corpus":
        specs = [SceneSpec(int(r["seed"]), bool(r["has_lesion"]), bool(r["has_dye"]), int(r["background_style"])) for r in rows]
        return cls(specs, [r["split"] for r in rows], n_per_class, split_seed)

    @classmethod
    def load_manifest(cls, path: str | Path) -> "Corpus":
        return cls.from_manifest(json.loads(Path(path).read_text()))


def _class_specs(label: int, n: int, rng: Rng, styles) -> list[SceneSpec]:
    seeds = rng.raw(n) >> np.uint64(1)
    picks = rng.integers(0, len(styles), (n,))
    return [
        SceneSpec(int(sd), label in (LESION, DYED), label == DYED, styles[int(p)])
        for sd, p in zip(seeds, picks)
    ]


def make_dataset(n_per_class: int, split_seed: int, styles=MAIN_STYLES, alt_styles=ALT_STYLES) -> Corpus:
    """Balanced corpus over {plain, lesion, dyed, alt} with a 70/15/15 split.

    Classes are interleaved round-robin after a per-class shuffle, so every
    contiguous split window is balanced to within one scene per class.
    """
    if n_per_class < 1:
        raise ValidationError("n_per_class must be >= 1")
    root = Rng(split_seed, "dataset")
    per_class = []
    for label in range(len(CLASS_NAMES)):
        rng = root.substream(CLASS_NAMES[label])
        specs = _class_specs(label, n_per_class, rng, alt_styles if label == ALT else styles)
        order = rng.permutation(n_per_class)
        per_class.append([specs[i] for i in order])
    specs = [per_class[c][i] for i in range(n_per_class) for c in range(len(CLASS_NAMES))]
    n = len(specs)
    n_train = round(0.70 * n)
    n_val = round(0.15 * n)
    splits = ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)
    return Corpus(specs, splits, n_per_class, split_seed)


def make_ood_scenes(n_per_class: int, seed: int, styles=HELDOUT_STYLES) -> list[SceneSpec]:
    """Plain and lesion scenes on background styles never used in training."""
    root = Rng(seed, "ood")
    out = []
    for label in (PLAIN, LESION):
        out += _class_specs(label, n_per_class, root.substream(CLASS_NAMES[label]), styles)
    return out


def render_batch(specs: list[SceneSpec]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Images [N,3,H,W], labels [N], lesion masks [N,H,W]."""
    scenes = [render_scene(s) for s in specs]
    images = np.stack([sc.image for sc in scenes]).astype(np.float32)
    labels = np.array([s.label for s in specs], dtype=np.int64)
    masks = np.stack([sc.lesion_mask for sc in scenes]).astype(np.float32)
    return images, labels, masks


# -- PPM / PGM -----------------------------------------------------------------

def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    c, h, w = image.shape
    data = _to_u8(image).transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + data)


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    h, w = gray.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + _to_u8(gray).tobytes())


def _read_pnm(path: str | Path, magic: bytes) -> tuple[np.ndarray, int, int]:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != magic:
        raise ValidationError(f"{path}: expected {magic.decode()} file")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(raw[pos + 1 :], dtype=np.uint8), w, h


def read_ppm(path: str | Path) -> np.ndarray:
    data, w, h = _read_pnm(path, b"P6")
    return (data.reshape(h, w, 3).transpose(2, 0, 1) / 255.0).astype(np.float32)


def read_pgm(path: str | Path) -> np.ndarray:
    data, w, h = _read_pnm(path, b"P5")
    return (data.reshape(h, w) / 255.0).astype(np.float32)


def export_corpus(corpus: Corpus, out_dir: str | Path, images: bool = True) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus.save_manifest(out / "manifest.json")
    if not images:
        return
    (out / "images").mkdir(exist_ok=True)
    for i, spec in enumerate(corpus.specs):
        sc = render_scene(spec)
        write_ppm(out / "images" / f"{i:05d}.ppm", sc.image)
        write_pgm(out / "images" / f"{i:05d}_lesion.pgm", sc.lesion_mask)
        write_pgm(out / "images" / f"{i:05d}_dye.pgm", sc.dye_mask)


def scene_dict(spec: SceneSpec) -> dict:
    return asdict(spec)
