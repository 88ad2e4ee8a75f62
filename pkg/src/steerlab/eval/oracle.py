"""Small convolutional classifier used as a frozen oracle (and as the downstream detector).

Architecture: conv 3->16 (3x3, stride 2) -> GELU -> conv 16->32 (3x3,
stride 2) -> GELU -> global mean pool -> linear head. The second conv's
activation map [32, 8, 8] is the "penultimate" feature map.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import synthgen
from ..errors import OracleRejected, ValidationError
from ..nn import ops
from ..nn.autodiff import Graph
from ..nn.io import load_tensor, save_tensor
from ..nn.optim import Adam, AdamSettings
from ..nn.rng import Rng
from .metrics import roc_auc

C1, C2 = 16, 32
KERNEL, STRIDE, PAD = 3, 2, 1
DEFAULT_FLOOR = 0.95


def receptive_field(i: int, size: int = synthgen.IMAGE_SIZE) -> tuple[int, int]:
    """Input pixel span [lo, hi] seen by row/column ``i`` of the feature map."""
    lo = STRIDE * (STRIDE * i - PAD) - PAD
    hi = STRIDE * (STRIDE * i - PAD + KERNEL - 1) - PAD + KERNEL - 1
    return max(lo, 0), min(hi, size - 1)


def init_oracle(n_classes: int, seed: int) -> dict[str, np.ndarray]:
    rng = Rng(seed, "oracle-init")
    shapes = {"c1.w": (3 * KERNEL * KERNEL, C1), "c2.w": (C1 * KERNEL * KERNEL, C2), "head.w": (C2, n_classes)}
    params = {name: ops.as_tensor(rng.randn(s) * math.sqrt(2.0 / s[0])) for name, s in shapes.items()}
    params.update({"c1.b": np.zeros(C1, np.float32), "c2.b": np.zeros(C2, np.float32), "head.b": np.zeros(n_classes, np.float32)})
    return params


def _forward(g: Graph, P, images: np.ndarray):
    x = g.const(ops.as_tensor(images) * np.float32(2.0) - np.float32(1.0))
    f1 = g.gelu(g.conv2d(x, P["c1.w"], P["c1.b"], STRIDE, PAD))
    f2 = g.gelu(g.conv2d(f1, P["c2.w"], P["c2.b"], STRIDE, PAD))
    b, c = f2.shape[:2]
    pooled = g.mean(g.reshape(f2, (b, c, -1)), axis=2)
    return g.linear(pooled, P["head.w"], P["head.b"]), f2


@dataclass
class OracleClassifier:
    params: dict[str, np.ndarray]
    class_names: tuple[str, ...]
    val_accuracy: float = float("nan")
    val_auc: float = float("nan")
    manifest: dict = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def _run(self, images: np.ndarray, batch: int = 256):
        logits, feats = [], []
        for s in range(0, len(images), batch):
            g = Graph(record=False)
            P = {k: g.param(k, v) for k, v in self.params.items()}
            lo, f = _forward(g, P, images[s : s + batch])
            logits.append(lo.value)
            feats.append(f.value)
        return np.concatenate(logits), np.concatenate(feats)

    def logits(self, images: np.ndarray) -> np.ndarray:
        return self._run(images)[0]

    def proba(self, images: np.ndarray) -> np.ndarray:
        return ops.softmax_rows(self.logits(images))

    def predict(self, images: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(images), axis=1)

    def features(self, images: np.ndarray) -> np.ndarray:
        return self._run(images)[1]

    def require(self, floor: float = DEFAULT_FLOOR) -> "OracleClassifier":
        if not self.val_accuracy >= floor:
            raise OracleRejected(f"oracle validation accuracy {self.val_accuracy:.4f} below floor {floor}")
        return self

    def save(self, path: str | Path) -> None:
        out = Path(path)
        out.mkdir(parents=True, exist_ok=True)
        for k, v in self.params.items():
            save_tensor(out / f"{k}.stensor", v)
        m = {**self.manifest, "class_names": list(self.class_names), "val_accuracy": self.val_accuracy,
             "val_auc": self.val_auc, "params": sorted(self.params)}
        (out / "manifest.json").write_text(json.dumps(m, indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "OracleClassifier":
        root = Path(path)
        m = json.loads((root / "manifest.json").read_text())
        params = {k: load_tensor(root / f"{k}.stensor") for k in m["params"]}
        return cls(params, tuple(m["class_names"]), float(m["val_accuracy"]), float(m["val_auc"]), m)


@dataclass
class OracleSettings:
    epochs: int = 12
    batch_size: int = 64
    lr: float = 3e-3
    seed: int = 0
    # each training image gets additive pixel noise with std drawn from [0, noise_aug]; generated
    # samples carry sampler speckle that clean renders never show
    noise_aug: float = 0.25
    floor: float = DEFAULT_FLOOR


def fit_classifier(images: np.ndarray, labels: np.ndarray, class_names, settings: OracleSettings) -> dict[str, np.ndarray]:
    """Cross-entropy training; returns trained parameters."""
    if len(images) == 0:
        raise ValidationError("empty classifier training set")
    params = init_oracle(len(class_names), settings.seed)
    opt = Adam(params, AdamSettings(lr=settings.lr))
    root = Rng(settings.seed, "oracle-train")
    labels = np.asarray(labels, dtype=np.int64)
    n = len(images)
    step = 0
    for epoch in range(settings.epochs):
        order = root.substream(f"epoch{epoch}").permutation(n)
        for s in range(0, n, settings.batch_size):
            idx = order[s : s + settings.batch_size]
            x = images[idx]
            if settings.noise_aug > 0:
                r = root.substream(f"aug{step}")
                sd = (np.float32(settings.noise_aug) * r.uniform((len(idx), 1, 1, 1))).astype(np.float32)
                x = np.clip(x + sd * r.randn(x.shape), 0.0, 1.0).astype(np.float32)
            g = Graph()
            P = {k: g.param(k, v) for k, v in params.items()}
            logits, _ = _forward(g, P, x)
            loss = g.cross_entropy(logits, labels[idx])
            opt.step(params, g.backward(loss))
            step += 1
    return params


def lesion_auc(proba: np.ndarray, labels: np.ndarray) -> float:
    """AUC of lesion presence (lesion or dyed) from summed class probabilities."""
    positive = np.isin(labels, (synthgen.LESION, synthgen.DYED))
    if positive.all() or not positive.any():
        return float("nan")
    return roc_auc(proba[:, synthgen.LESION] + proba[:, synthgen.DYED], positive)


def train_oracle(corpus: synthgen.Corpus, settings: OracleSettings | None = None, enforce_floor: bool = True) -> OracleClassifier:
    settings = settings or OracleSettings()
    tr_x, tr_y, _ = synthgen.render_batch(corpus.subset("train"))
    params = fit_classifier(tr_x, tr_y, synthgen.CLASS_NAMES, settings)
    oracle = OracleClassifier(params, synthgen.CLASS_NAMES)
    held = corpus.subset("val") + corpus.subset("test")
    va_x, va_y, _ = synthgen.render_batch(held)
    proba = oracle.proba(va_x)
    oracle.val_accuracy = float(np.mean(np.argmax(proba, axis=1) == va_y))
    oracle.val_auc = lesion_auc(proba, va_y)
    oracle.manifest = {"train_size": len(tr_y), "heldout_size": len(va_y), "settings": settings.__dict__}
    if enforce_floor:
        oracle.require(settings.floor)
    return oracle
