"""Counterfactual and fidelity metrics.

SSIM uses a 7x7 uniform window over valid (unpadded) positions with
C1 = 0.01**2, C2 = 0.03**2 on a [0, 1] range; channels are scored separately
and averaged, and only windows whose center pixel lies in the mask count.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .. import synthgen
from ..errors import ShapeError, ValidationError

SSIM_WIN = 7
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
PSNR_CAP = 99.0
PSNR_MSE_FLOOR = 1e-10


def _predictions(oracle, images) -> np.ndarray:
    return np.asarray(oracle.predict(images))


def flip_rate_from_predictions(pred: np.ndarray, source: int) -> float:
    pred = np.asarray(pred)
    if pred.size == 0:
        raise ValidationError("flip rate of an empty set")
    return float(np.sum(pred != source)) / pred.size


def flip_rate(oracle, images: np.ndarray, source: int) -> float:
    """Fraction of images not classified as ``source``."""
    return flip_rate_from_predictions(_predictions(oracle, images), source)


def confidence_shift_from_proba(p_steered: np.ndarray, p_unsteered: np.ndarray, source: int) -> float:
    if p_steered.shape != p_unsteered.shape:
        raise ShapeError("steered and unsteered sets differ in length")
    # signed: steering that raises the source probability counts negatively
    return float(np.mean(p_unsteered[:, source].astype(np.float64) - p_steered[:, source].astype(np.float64)))


def confidence_shift(oracle, steered: np.ndarray, unsteered: np.ndarray, source: int) -> float:
    """Mean drop in source-class probability from unsteered to steered."""
    if len(steered) != len(unsteered):
        raise ShapeError("steered and unsteered sets differ in length")
    return confidence_shift_from_proba(oracle.proba(steered), oracle.proba(unsteered), source)


def ddr(oracle, images: np.ndarray, dyed_class: int = synthgen.DYED) -> float:
    """Dye detection rate: fraction of images the oracle calls dyed."""
    if oracle.n_classes <= dyed_class:
        raise ValidationError("oracle has no dyed class")
    pred = _predictions(oracle, images)
    return float(np.mean(pred == dyed_class)) if pred.size else 0.0


def lesion_presence_rate(oracle, images: np.ndarray) -> float:
    pred = _predictions(oracle, images)
    return float(np.mean(np.isin(pred, (synthgen.LESION, synthgen.DYED))))


# -- background fidelity -----------------------------------------------------------

def _check_pair(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if mask.shape != a.shape[-2:]:
        raise ShapeError(f"mask shape {mask.shape} does not match image {a.shape}")
    if not np.any(mask > 0):
        raise ValidationError("empty mask")


def ssim_map(a: np.ndarray, b: np.ndarray, win: int = SSIM_WIN) -> np.ndarray:
    """Per-window SSIM for one channel; output is (H - win + 1) x (W - win + 1)."""
    a = a.astype(np.float32)
    b = b.astype(np.float32)
    wa = sliding_window_view(a, (win, win))
    wb = sliding_window_view(b, (win, win))
    mu_a = wa.mean(axis=(-1, -2))
    mu_b = wb.mean(axis=(-1, -2))
    var_a = ((wa - mu_a[..., None, None]) ** 2).mean(axis=(-1, -2))
    var_b = ((wb - mu_b[..., None, None]) ** 2).mean(axis=(-1, -2))
    cov = ((wa - mu_a[..., None, None]) * (wb - mu_b[..., None, None])).mean(axis=(-1, -2))
    c1, c2 = np.float32(SSIM_C1), np.float32(SSIM_C2)
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))


def masked_ssim(a: np.ndarray, b: np.ndarray, mask: np.ndarray, win: int = SSIM_WIN) -> float:
    """Mean SSIM over windows centered inside ``mask``; ``a``/``b`` are [C,H,W] or [H,W]."""
    _check_pair(a, b, mask)
    r = win // 2
    centers = mask[r : mask.shape[0] - r, r : mask.shape[1] - r] > 0
    if not centers.any():
        raise ValidationError("no SSIM window is centered inside the mask")
    a3 = a.reshape((-1,) + a.shape[-2:])
    b3 = b.reshape((-1,) + b.shape[-2:])
    per_channel = [float(ssim_map(a3[c], b3[c], win)[centers].mean()) for c in range(a3.shape[0])]
    return float(np.mean(per_channel))


def masked_psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    _check_pair(a, b, mask)
    sel = np.broadcast_to(mask > 0, a.shape)
    diff = a.astype(np.float32)[sel] - b.astype(np.float32)[sel]
    mse = float(np.mean(diff * diff))
    if mse < PSNR_MSE_FLOOR:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def feature_mask(mask: np.ndarray, grid: int) -> np.ndarray:
    """Feature cells whose receptive field overlaps the mask."""
    from .oracle import receptive_field

    out = np.zeros((grid, grid), bool)
    for i in range(grid):
        r0, r1 = receptive_field(i, mask.shape[0])
        for j in range(grid):
            c0, c1 = receptive_field(j, mask.shape[1])
            out[i, j] = bool(np.any(mask[r0 : r1 + 1, c0 : c1 + 1] > 0))
    return out


def feature_distance_from_features(fa: np.ndarray, fb: np.ndarray, mask: np.ndarray) -> float:
    cells = feature_mask(mask, fa.shape[-1])
    if not cells.any():
        raise ValidationError("empty mask")
    d = (fa - fb)[:, cells].astype(np.float32)
    return float(np.sum(d * d) / d.size)


def feature_distance(oracle, a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """LPIPS-proxy: mean squared difference of the oracle's penultimate feature maps,
    restricted to cells whose receptive field overlaps ``mask``."""
    _check_pair(a, b, mask)
    f = oracle.features(np.stack([a, b]))
    return feature_distance_from_features(f[0], f[1], mask)


# -- dye effective metrics ---------------------------------------------------------

@dataclass(frozen=True)
class EffectiveMetrics:
    eff_lpips: float | None  # None when ddr == 1 (undefined)
    eff_ssim: float
    eff_psnr: float


def effective_metrics(raw_lpips: float, raw_ssim: float, raw_psnr: float, ddr_value: float) -> EffectiveMetrics:
    """Fidelity penalized by dye left behind: LPIPS/(1-DDR), (1-DDR)*SSIM, (1-DDR)*PSNR."""
    if not 0.0 <= ddr_value <= 1.0:
        raise ValidationError(f"ddr must be in [0, 1], got {ddr_value}")
    keep = 1.0 - ddr_value
    eff_lpips = None if keep == 0.0 else raw_lpips / keep
    return EffectiveMetrics(eff_lpips, keep * raw_ssim, keep * raw_psnr)


# -- detection ---------------------------------------------------------------------

def roc_auc(scores, labels) -> float:
    """Area under the ROC curve by the trapezoidal rule; tied scores form one ROC step."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUC needs both classes")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    distinct = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(y)[distinct]
    fps = (distinct + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def f1_score(pred, labels) -> float:
    pred = np.asarray(pred).astype(bool)
    labels = np.asarray(labels).astype(bool)
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    fn = int(np.sum(~pred & labels))
    return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)


# -- reports -----------------------------------------------------------------------

def fingerprint(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class MetricsReport:
    name: str
    n: int
    flip_rate: float | None = None
    delta_p: float | None = None
    bg_ssim: float | None = None
    bg_psnr: float | None = None
    bg_featdist: float | None = None
    ddr: float | None = None
    eff_lpips_proxy: float | None = None
    eff_ssim: float | None = None
    eff_psnr: float | None = None
    auc: float | None = None
    config_fingerprint: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for key in ("flip_rate", "ddr"):
            v = getattr(self, key)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValidationError(f"{key}={v} outside [0, 1]")
        if self.bg_ssim is not None and not -1.0 <= self.bg_ssim <= 1.0:
            raise ValidationError(f"bg_ssim={self.bg_ssim} outside [-1, 1]")

    def to_dict(self) -> dict:
        return asdict(self)
