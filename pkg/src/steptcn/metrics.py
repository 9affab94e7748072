"""Frame accuracy and class-averaged precision / recall / F1 per video,
aggregated as mean and sample standard deviation across videos.

Undefined cases: a class absent from both ground truth and prediction is
not applicable and is left out of the video's class average. With |P| = 0
precision is 0, with |GT| = 0 recall is 0, and F1 is 0 when PR + RE = 0.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import DataError, DimensionError, LabelError

METRIC_NAMES = ("acc", "pr", "re", "f1")
UNDEFINED_POLICY = "absent-class-excluded;PR=0 if |P|=0;RE=0 if |GT|=0;F1=0 if PR+RE=0"


def _pair(gt, pred):
    gt = np.asarray(gt, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if gt.shape != pred.shape or gt.ndim != 1:
        raise DimensionError(f"ground truth {gt.shape} and prediction {pred.shape} differ")
    if gt.size == 0:
        raise DimensionError("empty label sequence")
    return gt, pred


def frame_accuracy(gt, pred) -> float:
    gt, pred = _pair(gt, pred)
    return float(np.mean(gt == pred))


def per_class_prf(gt, pred, num_classes: int) -> np.ndarray:
    """(C, 3) array of PR, RE, F1; rows of non-applicable classes are NaN."""
    gt, pred = _pair(gt, pred)
    if min(gt.min(), pred.min()) < 0 or max(gt.max(), pred.max()) >= num_classes:
        raise LabelError(f"labels must lie in [0, {num_classes})")
    inter = np.bincount(gt[gt == pred], minlength=num_classes).astype(np.float64)
    n_gt = np.bincount(gt, minlength=num_classes).astype(np.float64)
    n_pred = np.bincount(pred, minlength=num_classes).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        pr = np.where(n_pred > 0, inter / n_pred, 0.0)
        re = np.where(n_gt > 0, inter / n_gt, 0.0)
        f1 = np.where(pr + re > 0, 2 * pr * re / (pr + re), 0.0)
    out = np.stack([pr, re, f1], axis=1)
    out[(n_gt == 0) & (n_pred == 0)] = np.nan
    return out


@dataclass
class VideoMetrics:
    acc: float
    pr: float
    re: float
    f1: float
    per_class: Optional[np.ndarray] = None

    def as_dict(self) -> Dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_NAMES}


def video_metrics(gt, pred, num_classes: int) -> VideoMetrics:
    table = per_class_prf(gt, pred, num_classes)
    applicable = ~np.isnan(table[:, 0])
    pr, re, f1 = table[applicable].mean(axis=0)
    return VideoMetrics(frame_accuracy(gt, pred), float(pr), float(re), float(f1), table)


@dataclass
class DatasetMetrics:
    mean: Dict[str, float]
    std: Dict[str, float]
    n_videos: int

    def to_json(self) -> dict:
        return {"mean": self.mean, "std": self.std, "n_videos": self.n_videos,
                "undefined_policy": UNDEFINED_POLICY}


def dataset_metrics(videos: Sequence[VideoMetrics]) -> DatasetMetrics:
    if not videos:
        raise DataError("no videos to aggregate")
    mean, std = {}, {}
    for k in METRIC_NAMES:
        vals = np.array([getattr(v, k) for v in videos])
        # sort for a summation order independent of video order
        vals = np.sort(vals)
        mean[k] = float(vals.mean())
        std[k] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    return DatasetMetrics(mean, std, len(videos))


def metrics_csv(rows: List[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def metrics_json(d: DatasetMetrics, per_video: Optional[Dict[str, VideoMetrics]] = None) -> str:
    doc = d.to_json()
    if per_video is not None:
        doc["videos"] = {vid: m.as_dict() for vid, m in per_video.items()}
    return json.dumps(doc, indent=1, sort_keys=True)
