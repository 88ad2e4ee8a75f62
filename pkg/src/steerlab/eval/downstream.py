"""Augmentation experiment: does adding synthetic data help a lesion detector
generalize to unseen backgrounds?

Conditions:
  none            real images only
  reprompt        lesion and normal prompts sampled from the same seed
  counterfactual  unsteered lesion image paired with its steered, lesion-removed twin

Both synthetic conditions add the same number of images, so any difference
comes from how the negatives relate to the positives.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .. import synthgen
from ..errors import ValidationError
from .metrics import f1_score, roc_auc
from .oracle import OracleClassifier, OracleSettings, fit_classifier

CONDITIONS = ("none", "reprompt", "counterfactual")
BINARY_CLASSES = ("normal", "lesion")


@dataclass
class SyntheticSet:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValidationError("synthetic images and labels differ in length")


def paired_set(positives: np.ndarray, negatives: np.ndarray) -> SyntheticSet:
    if len(positives) != len(negatives):
        raise ValidationError("paired augmentation needs equal positive/negative counts")
    images = np.concatenate([positives, negatives])
    labels = np.r_[np.ones(len(positives), np.int64), np.zeros(len(negatives), np.int64)]
    return SyntheticSet(images, labels)


def binary_labels(specs: Sequence[synthgen.SceneSpec]) -> np.ndarray:
    return np.array([int(s.has_lesion) for s in specs], np.int64)


@dataclass
class ConditionResult:
    condition: str
    auc: list[float]
    f1: list[float]
    n_train: int

    @property
    def auc_mean(self) -> float:
        return float(np.mean(self.auc))

    @property
    def auc_sd(self) -> float:
        return float(np.std(self.auc, ddof=1)) if len(self.auc) > 1 else 0.0

    @property
    def f1_mean(self) -> float:
        return float(np.mean(self.f1))

    @property
    def f1_sd(self) -> float:
        return float(np.std(self.f1, ddof=1)) if len(self.f1) > 1 else 0.0

    def to_dict(self) -> dict:
        return {"condition": self.condition, "n_train": self.n_train, "auc": self.auc, "f1": self.f1,
                "auc_mean": self.auc_mean, "auc_sd": self.auc_sd, "f1_mean": self.f1_mean, "f1_sd": self.f1_sd}


@dataclass
class DownstreamSettings:
    detector_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    epochs: int = 12
    batch_size: int = 64
    lr: float = 3e-3
    noise_aug: float = 0.03


def detector_scores(params, images: np.ndarray) -> np.ndarray:
    return OracleClassifier(params, BINARY_CLASSES).proba(images)[:, 1]


def downstream_experiment(
    real_images: np.ndarray,
    real_labels: np.ndarray,
    test_images: np.ndarray,
    test_labels: np.ndarray,
    synthetic: dict[str, SyntheticSet],
    settings: DownstreamSettings | None = None,
    conditions: Sequence[str] = CONDITIONS,
) -> dict[str, ConditionResult]:
    settings = settings or DownstreamSettings()
    sizes = {c: len(synthetic[c].labels) for c in conditions if c != "none" and c in synthetic}
    for c in conditions:
        if c not in CONDITIONS:
            raise ValidationError(f"unknown condition {c!r}")
        if c != "none" and c not in synthetic:
            raise ValidationError(f"condition {c!r} needs synthetic data")
    if len(set(sizes.values())) > 1:
        raise ValidationError(f"synthetic additions are not quantity-matched: {sizes}")
    out = {}
    for c in conditions:
        x, y = real_images, np.asarray(real_labels, np.int64)
        if c != "none":
            x = np.concatenate([x, synthetic[c].images])
            y = np.concatenate([y, synthetic[c].labels])
        aucs, f1s = [], []
        for seed in settings.detector_seeds:
            st = OracleSettings(settings.epochs, settings.batch_size, settings.lr, seed, settings.noise_aug)
            params = fit_classifier(x, y, BINARY_CLASSES, st)
            s = detector_scores(params, test_images)
            aucs.append(roc_auc(s, test_labels))
            f1s.append(f1_score(s > 0.5, test_labels))
        out[c] = ConditionResult(c, aucs, f1s, len(y))
    return out
