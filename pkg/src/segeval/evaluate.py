"""COCO-style instance segmentation evaluation.

Predictions are matched to ground truth greedily in descending score order,
detections are pooled over frames into precision/recall curves, and AP is the
101-point interpolated average precision. Binary mode collapses every
category onto a single ``instrument`` class before matching; multiclass mode
only matches within a category and averages over categories that have at
least one ground-truth instance.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .masks import bbox_iou_matrix, mask_iou
from .model import (
    OTHER_CATEGORY_NAME,
    CategoryId,
    Dataset,
    InstanceMask,
    binary_dataset,
    collapse_to_binary,
)

COCO_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
THRESHOLDS_50_90 = tuple(round(0.50 + 0.05 * i, 2) for i in range(9))

Predictions = Mapping[str, Sequence[InstanceMask]]


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    iou_kind: str = "mask"
    thresholds: tuple[float, ...] = COCO_THRESHOLDS
    mode: str = "multiclass"
    max_detections: tuple[int, ...] = (1, 10, 100)
    interpolation_points: int = 101
    exclude_other: bool = False

    def __post_init__(self):
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        object.__setattr__(self, "max_detections", tuple(int(m) for m in self.max_detections))
        if self.iou_kind not in ("mask", "bbox"):
            raise ValueError(f"iou_kind must be 'mask' or 'bbox', got {self.iou_kind!r}")
        if self.mode not in ("binary", "multiclass"):
            raise ValueError(f"mode must be 'binary' or 'multiclass', got {self.mode!r}")
        t = self.thresholds
        if not t or any(not 0 < x <= 1 for x in t) or any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError(f"thresholds must be strictly increasing in (0, 1], got {t}")
        m = self.max_detections
        if not m or m[0] < 1 or any(b <= a for a, b in zip(m, m[1:])):
            raise ValueError(f"max_detections must be positive and increasing, got {m}")
        if self.interpolation_points < 2:
            raise ValueError("interpolation_points must be at least 2")

    @property
    def recall_thresholds(self) -> np.ndarray:
        n = self.interpolation_points - 1
        return np.arange(n + 1) / n

    def to_json(self) -> dict:
        return {
            "iou_kind": self.iou_kind,
            "thresholds": list(self.thresholds),
            "mode": self.mode,
            "max_detections": list(self.max_detections),
            "interpolation_points": self.interpolation_points,
            "exclude_other": self.exclude_other,
        }


@dataclass(frozen=True)
class Matching:
    """Greedy assignment for one frame (and one category in multiclass mode).

    ``pred_to_gt[i]`` is the ground-truth index matched by prediction ``i`` or
    -1 for a false positive; ``gt_to_pred`` is the inverse, -1 for a miss.
    """

    pred_to_gt: tuple[int, ...]
    gt_to_pred: tuple[int, ...]

    @property
    def true_positives(self) -> int:
        return sum(1 for g in self.pred_to_gt if g >= 0)

    @property
    def false_positives(self) -> int:
        return sum(1 for g in self.pred_to_gt if g < 0)

    @property
    def false_negatives(self) -> int:
        return sum(1 for p in self.gt_to_pred if p < 0)


def score_order(scores: Sequence[float]) -> np.ndarray:
    """Indices by descending score; equal scores keep input order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def iou_matrix(gt: Sequence[InstanceMask], preds: Sequence[InstanceMask], iou_kind: str = "mask") -> np.ndarray:
    if not gt or not preds:
        return np.zeros((len(gt), len(preds)))
    if iou_kind == "bbox":
        return bbox_iou_matrix(
            np.array([g.bbox.as_tuple() for g in gt]), np.array([p.bbox.as_tuple() for p in preds])
        )
    out = np.empty((len(gt), len(preds)))
    for i, g in enumerate(gt):
        for j, p in enumerate(preds):
            out[i, j] = mask_iou(g.mask, p.mask)
    return out


def _greedy(ious: np.ndarray, threshold: float) -> np.ndarray:
    """Match columns (already in processing order) to rows; -1 when unmatched."""
    n_gt, n_dt = ious.shape
    taken = np.zeros(n_gt, dtype=bool)
    out = np.full(n_dt, -1, dtype=np.int64)
    for j in range(n_dt):
        if n_gt == 0:
            break
        col = np.where(taken, -1.0, ious[:, j])
        # argmax returns the lowest index among equal maxima
        best = int(np.argmax(col))
        if col[best] >= threshold:
            taken[best] = True
            out[j] = best
    return out


def match_instances(
    gt: Sequence[InstanceMask],
    preds: Sequence[InstanceMask],
    iou_thresh: float,
    iou_kind: str = "mask",
) -> Matching:
    """Greedy score-ordered matching of one frame's predictions to its ground truth.

    Each prediction, highest score first, takes the still-unmatched ground
    truth with the highest IoU provided that IoU reaches ``iou_thresh``.
    """
    order = score_order([p.score if p.score is not None else 0.0 for p in preds])
    ious = iou_matrix(gt, [preds[i] for i in order], iou_kind)
    sorted_match = _greedy(ious, iou_thresh)
    pred_to_gt = [-1] * len(preds)
    gt_to_pred = [-1] * len(gt)
    for rank, g in enumerate(sorted_match):
        if g >= 0:
            pred_to_gt[order[rank]] = int(g)
            gt_to_pred[g] = int(order[rank])
    return Matching(tuple(pred_to_gt), tuple(gt_to_pred))


@dataclass(frozen=True)
class FrameMatches:
    """Matching outcome of one frame and category at every IoU threshold.

    ``scores`` are sorted descending (ties in input order) and truncated at
    the largest detection cap; ``matched[t, i]`` tells whether detection ``i``
    is a true positive at threshold index ``t``.
    """

    frame_id: str
    category: int
    scores: np.ndarray
    matched: np.ndarray
    num_gt: int


def match_frame(
    frame_id: str,
    category: int,
    gt: Sequence[InstanceMask],
    preds: Sequence[InstanceMask],
    thresholds: Sequence[float],
    iou_kind: str,
    max_det: int,
) -> FrameMatches:
    order = score_order([p.score for p in preds])[:max_det]
    dts = [preds[i] for i in order]
    ious = iou_matrix(gt, dts, iou_kind)
    matched = np.zeros((len(thresholds), len(dts)), dtype=bool)
    for t, thr in enumerate(thresholds):
        matched[t] = _greedy(ious, thr) >= 0
    scores = np.array([d.score for d in dts], dtype=np.float64)
    return FrameMatches(frame_id, category, scores, matched, len(gt))


@dataclass(frozen=True)
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    num_gt: int

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.recall.tolist(), self.precision.tolist()))


def _pooled(matches: Sequence[FrameMatches], threshold_index: int, max_det: int):
    scores = [m.scores[:max_det] for m in matches]
    flags = [m.matched[threshold_index, :max_det] for m in matches]
    if scores:
        scores_all = np.concatenate(scores)
        flags_all = np.concatenate(flags)
    else:
        scores_all = np.zeros(0)
        flags_all = np.zeros(0, dtype=bool)
    order = np.argsort(-scores_all, kind="stable")
    return scores_all[order], flags_all[order]


def pr_curve(matches: Sequence[FrameMatches], threshold_index: int = 0, max_det: int = 100) -> PRCurve:
    """Cumulative precision/recall over detections pooled across frames.

    At most ``max_det`` highest-scoring detections per frame take part. The
    recall denominator is the total ground-truth count of ``matches``.
    """
    num_gt = sum(m.num_gt for m in matches)
    if num_gt == 0:
        raise EvaluationError("precision/recall is undefined without ground truth")
    _, tp = _pooled(matches, threshold_index, max_det)
    tp_cum = np.cumsum(tp, dtype=np.float64)
    fp_cum = np.cumsum(~tp, dtype=np.float64)
    recall = tp_cum / num_gt
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = tp_cum / (tp_cum + fp_cum)
    return PRCurve(recall, precision, num_gt)


def interpolated_precision(pr: PRCurve, points: int = 101) -> np.ndarray:
    """Precision envelope sampled at ``points`` evenly spaced recall levels."""
    rec_thrs = np.arange(points) / (points - 1)
    envelope = np.maximum.accumulate(pr.precision[::-1])[::-1] if pr.precision.size else pr.precision
    idx = np.searchsorted(pr.recall, rec_thrs, side="left")
    out = np.zeros(points)
    ok = idx < envelope.size
    out[ok] = envelope[idx[ok]]
    return out


def average_precision(pr: PRCurve, points: int = 101) -> float:
    return float(np.mean(interpolated_precision(pr, points)))


def average_recall(matches: Sequence[FrameMatches], max_det: int) -> float:
    """Matched fraction of ground truth, averaged over every IoU threshold."""
    num_gt = sum(m.num_gt for m in matches)
    if num_gt == 0:
        raise EvaluationError("recall is undefined without ground truth")
    n_thr = matches[0].matched.shape[0]
    hits = np.zeros(n_thr)
    for m in matches:
        hits += m.matched[:, :max_det].sum(axis=1)
    return float(np.mean(hits / num_gt))


@dataclass
class EvalReport:
    """Evaluation results.

    ``precision`` has shape (thresholds, recall points, classes, max_dets) and
    holds the interpolated precision curve; ``recall`` has shape
    (thresholds, classes, max_dets). Only classes with ground truth appear.
    """

    config: EvalConfig
    classes: tuple[CategoryId, ...]
    num_gt: tuple[int, ...]
    precision: np.ndarray
    recall: np.ndarray
    label: str = ""
    meta: dict = field(default_factory=dict)

    def _thr_index(self, thr: float) -> int:
        for i, t in enumerate(self.config.thresholds):
            if math.isclose(t, thr, abs_tol=1e-9):
                return i
        raise KeyError(f"IoU threshold {thr} not evaluated")

    def _det_index(self, max_det: Optional[int]) -> int:
        if max_det is None:
            return len(self.config.max_detections) - 1
        return self.config.max_detections.index(max_det)

    def class_ap(self, max_det: Optional[int] = None) -> np.ndarray:
        """AP per (threshold, class)."""
        return self.precision[:, :, :, self._det_index(max_det)].mean(axis=1)

    def class_ar(self, max_det: Optional[int] = None) -> np.ndarray:
        """AR per class (mean over thresholds)."""
        return self.recall[:, :, self._det_index(max_det)].mean(axis=0)

    def ap_at(self, thr: float, max_det: Optional[int] = None) -> float:
        return float(self.class_ap(max_det)[self._thr_index(thr)].mean())

    def ap_per_threshold(self, max_det: Optional[int] = None) -> list[float]:
        return self.class_ap(max_det).mean(axis=1).tolist()

    @property
    def ap50(self) -> float:
        return self.ap_at(0.5)

    @property
    def ap(self) -> float:
        """AP averaged over all thresholds (AP50:95 under the default set)."""
        return float(np.mean(self.ap_per_threshold()))

    def ar(self, max_det: int) -> float:
        return float(self.class_ar(max_det).mean())

    def summary(self) -> dict[str, float]:
        out = {"AP": self.ap}
        if any(math.isclose(t, 0.5) for t in self.config.thresholds):
            out["AP50"] = self.ap50
        if any(math.isclose(t, 0.75) for t in self.config.thresholds):
            out["AP75"] = self.ap_at(0.75)
        for m in self.config.max_detections:
            out[f"AR{m}"] = self.ar(m)
        return out

    def to_json(self) -> dict:
        ap = self.class_ap()
        per_class = []
        for k, cat in enumerate(self.classes):
            per_class.append(
                {
                    "id": cat.id,
                    "name": cat.name,
                    "num_gt": self.num_gt[k],
                    "AP": float(ap[:, k].mean()),
                    "AP_per_threshold": ap[:, k].tolist(),
                    "AR": {str(m): float(self.class_ar(m)[k]) for m in self.config.max_detections},
                }
            )
        return {
            "label": self.label,
            "config": self.config.to_json(),
            "summary": self.summary(),
            "AP_per_threshold": self.ap_per_threshold(),
            "per_class": per_class,
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "EvalReport":
        c = d["config"]
        cfg = EvalConfig(
            iou_kind=c["iou_kind"],
            thresholds=tuple(c["thresholds"]),
            mode=c["mode"],
            max_detections=tuple(c["max_detections"]),
            interpolation_points=c["interpolation_points"],
            exclude_other=c.get("exclude_other", False),
        )
        classes = tuple(CategoryId(p["id"], p["name"]) for p in d["per_class"])
        num_gt = tuple(p["num_gt"] for p in d["per_class"])
        T, R, K, M = len(cfg.thresholds), cfg.interpolation_points, len(classes), len(cfg.max_detections)
        precision = np.asarray(d["precision"], dtype=np.float64).reshape(T, R, K, M)
        recall = np.asarray(d["recall"], dtype=np.float64).reshape(T, K, M)
        return cls(cfg, classes, num_gt, precision, recall, d.get("label", ""), dict(d.get("meta", {})))


def _eval_classes(gt: Dataset, cfg: EvalConfig) -> tuple[CategoryId, ...]:
    present = {inst.category for f in gt.frames for inst in f.instances}
    classes = [c for c in gt.taxonomy if c.id in present]
    if cfg.exclude_other and cfg.mode == "multiclass":
        classes = [c for c in classes if c.name != OTHER_CATEGORY_NAME]
    return tuple(classes)


def evaluate(
    gt: Dataset,
    preds: Predictions,
    cfg: EvalConfig = EvalConfig(),
    threads: int = 1,
    label: str = "",
) -> EvalReport:
    """Evaluate ``preds`` against the ground truth of ``gt``.

    Args:
        gt: Frames with ground-truth instances. Frames absent from ``preds``
            count as frames without detections.
        preds: Scored predicted instances keyed by frame id.
        cfg: Evaluation settings.
        threads: Worker threads for per-frame matching. Results do not
            depend on it.
        label: Free-form run label carried into the report.
    """
    if not gt.frames:
        raise EvaluationError("ground-truth dataset has no frames")
    frame_ids = {f.frame_id for f in gt.frames}
    unknown = sorted(set(preds) - frame_ids)
    if unknown:
        raise EvaluationError(f"predictions reference unknown frames: {unknown[:5]}")
    for fid, plist in preds.items():
        for p in plist:
            if p.score is None or not 0.0 <= p.score <= 1.0:
                raise EvaluationError(f"prediction in frame {fid} has invalid score {p.score!r}")

    binary = cfg.mode == "binary"
    if binary:
        gt = binary_dataset(gt)
    classes = _eval_classes(gt, cfg)
    if not classes:
        raise EvaluationError("ground truth has no instances in the evaluated classes")
    class_ids = [c.id for c in classes]
    max_det = cfg.max_detections[-1]

    def frame_job(frame):
        plist = list(preds.get(frame.frame_id, ()))
        if binary:
            plist = collapse_to_binary(plist)
        out = []
        for cid in class_ids:
            g = [inst for inst in frame.instances if inst.category == cid]
            d = [p for p in plist if p.category == cid]
            out.append(match_frame(frame.frame_id, cid, g, d, cfg.thresholds, cfg.iou_kind, max_det))
        return out

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_frame = list(pool.map(frame_job, gt.frames))
    else:
        per_frame = [frame_job(f) for f in gt.frames]

    T, R, K, M = len(cfg.thresholds), cfg.interpolation_points, len(classes), len(cfg.max_detections)
    precision = np.zeros((T, R, K, M))
    recall = np.zeros((T, K, M))
    num_gt = []
    for k in range(K):
        matches = [fm[k] for fm in per_frame]
        num_gt.append(sum(m.num_gt for m in matches))
        for mi, md in enumerate(cfg.max_detections):
            for t in range(T):
                curve = pr_curve(matches, t, md)
                precision[t, :, k, mi] = interpolated_precision(curve, R)
                recall[t, k, mi] = curve.recall[-1] if curve.recall.size else 0.0
    return EvalReport(cfg, classes, tuple(num_gt), precision, recall, label)
