from __future__ import annotations

from .downstream import (
    CONDITIONS,
    ConditionResult,
    DownstreamSettings,
    SyntheticSet,
    downstream_experiment,
    paired_set,
)
from .metrics import (
    EffectiveMetrics,
    MetricsReport,
    confidence_shift,
    ddr,
    effective_metrics,
    f1_score,
    feature_distance,
    fingerprint,
    flip_rate,
    lesion_presence_rate,
    masked_psnr,
    masked_ssim,
    roc_auc,
)
from .oracle import OracleClassifier, OracleSettings, fit_classifier, train_oracle
from .segment import DEFAULT_RULE, SegmentRule, union_background

__all__ = [
    "CONDITIONS", "ConditionResult", "DownstreamSettings", "SyntheticSet", "downstream_experiment", "paired_set",
    "EffectiveMetrics", "MetricsReport", "confidence_shift", "ddr", "effective_metrics", "f1_score",
    "feature_distance", "fingerprint", "flip_rate", "lesion_presence_rate", "masked_psnr", "masked_ssim", "roc_auc",
    "OracleClassifier", "OracleSettings", "fit_classifier", "train_oracle",
    "DEFAULT_RULE", "SegmentRule", "union_background",
]
