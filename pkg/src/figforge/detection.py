"""Subfigure detection metrics: IoU, greedy matching, AP/mAP and F1.

Single-class, COCO-style: AP uses 101-point interpolation over the
dataset-wide score-ranked detection list; mAP averages AP over IoU
thresholds 0.50:0.05:0.95.  Score ties are broken by input order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple

from .errors import EvaluationError
from .formats import DetectionSet, FigureManifest
from .layout import BBox

COCO_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = 101


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.w * a.h + b.w * b.h - inter)


@dataclass(frozen=True)
class EvalSettings:
    iou_thresholds: tuple = COCO_IOU_THRESHOLDS
    f1_iou: float = 0.5
    score_threshold: float = 0.0

    def __post_init__(self):
        thr = tuple(float(t) for t in self.iou_thresholds)
        if not thr:
            raise ValueError("at least one IoU threshold is required")
        if any(not 0.0 < t <= 1.0 for t in thr):
            raise ValueError(f"IoU thresholds must lie in (0, 1]: {thr}")
        if any(b <= a for a, b in zip(thr, thr[1:])):
            raise ValueError(f"IoU thresholds must be strictly increasing: {thr}")
        object.__setattr__(self, "iou_thresholds", thr)
        if not 0.0 < self.f1_iou <= 1.0:
            raise ValueError(f"f1_iou must lie in (0, 1], got {self.f1_iou}")


@dataclass
class DetectionReport:
    map: float
    ap_per_threshold: Dict[str, float]
    ap50: float
    f1: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    settings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "map": self.map,
            "ap_per_threshold": dict(self.ap_per_threshold),
            "ap50": self.ap50,
            "f1": self.f1,
            "precision": self.precision,
            "recall": self.recall,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "settings": dict(self.settings),
        }


def _ranked(dets: DetectionSet) -> List[int]:
    # sorted() is stable, so equal scores keep input order
    return sorted(range(len(dets.boxes)), key=lambda i: -dets.boxes[i].score)


def match_greedy(dets: DetectionSet, gt: Sequence[BBox], iou_thr: float) -> Dict[int, int]:
    """Greedy one-to-one matching, highest score first.

    Each detection takes the still-unmatched ground-truth box with the
    largest IoU, provided it reaches ``iou_thr`` (lowest gt index on ties).
    Returns ``{det_index: gt_index}``; absent detections are false positives.
    """
    taken = [False] * len(gt)
    matches = {}
    for di in _ranked(dets):
        box = dets.boxes[di].bbox
        best, best_iou = -1, -1.0
        for gi, g in enumerate(gt):
            if taken[gi]:
                continue
            v = iou(box, g)
            if v >= iou_thr and v > best_iou:
                best, best_iou = gi, v
        if best >= 0:
            taken[best] = True
            matches[di] = best
    return matches


def _pair_up(dets: Iterable[DetectionSet], gts: Mapping[str, Sequence[BBox]]):
    dets = list(dets)
    unknown = sorted({d.image_id for d in dets} - set(gts))
    if unknown:
        raise EvaluationError(f"detections reference unknown image ids: {unknown}")
    by_image: Dict[str, List[DetectionSet]] = {}
    for d in dets:
        by_image.setdefault(d.image_id, []).append(d)
    # several rows for one image are concatenated in file order
    merged = []
    for image_id, rows in by_image.items():
        boxes = tuple(b for r in rows for b in r.boxes)
        merged.append(DetectionSet(image_id, boxes))
    return merged


def average_precision(
    dets: Iterable[DetectionSet], gts: Mapping[str, Sequence[BBox]], iou_thr: float
) -> float:
    """101-point interpolated AP of all detections against ``gts``."""
    merged = _pair_up(dets, gts)
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        raise EvaluationError("average precision is undefined without ground-truth boxes")

    scored = []  # (score, input_position, is_tp)
    pos = 0
    for ds in merged:
        matches = match_greedy(ds, gts[ds.image_id], iou_thr)
        for di, det in enumerate(ds.boxes):
            scored.append((det.score, pos + di, di in matches))
        pos += len(ds.boxes)
    scored.sort(key=lambda t: (-t[0], t[1]))

    tps = []
    fps = []
    tp = fp = 0
    for _, _, hit in scored:
        tp += hit
        fp += not hit
        tps.append(tp)
        fps.append(fp)

    # precision envelope, non-increasing from the right
    prec = [t / (t + f) for t, f in zip(tps, fps)]
    for i in range(len(prec) - 2, -1, -1):
        prec[i] = max(prec[i], prec[i + 1])

    total = 0.0
    j = 0
    for k in range(RECALL_POINTS):
        # recall >= k/100  <=>  100 * tp >= k * n_gt (exact)
        while j < len(tps) and 100 * tps[j] < k * n_gt:
            j += 1
        if j == len(tps):
            break
        total += prec[j]
    return total / RECALL_POINTS


def ground_truth(manifests: Iterable[FigureManifest]) -> Dict[str, List[BBox]]:
    gts = {}
    for m in manifests:
        if m.figure_id in gts:
            raise EvaluationError(f"duplicate figure_id {m.figure_id!r}")
        gts[m.figure_id] = [p.bbox for p in m.panels]
    return gts


def count_matches(dets, gts, iou_thr, score_threshold=0.0) -> Tuple[int, int, int]:
    """Dataset-micro ``(tp, fp, fn)`` after dropping low-scoring boxes."""
    merged = {d.image_id: d for d in _pair_up(dets, gts)}
    tp = fp = fn = 0
    for image_id, gt in gts.items():
        ds = merged.get(image_id)
        kept = DetectionSet(image_id, tuple(b for b in ds.boxes if b.score >= score_threshold)) if ds else DetectionSet(image_id)
        n_match = len(match_greedy(kept, gt, iou_thr))
        tp += n_match
        fp += len(kept.boxes) - n_match
        fn += len(gt) - n_match
    return tp, fp, fn


def f1_from_counts(tp: int, fp: int, fn: int) -> Tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def evaluate_detections(dets, manifests, settings: EvalSettings = EvalSettings()) -> DetectionReport:
    """mAP over ``settings.iou_thresholds`` plus micro F1 at ``settings.f1_iou``."""
    dets = list(dets)
    gts = manifests if isinstance(manifests, Mapping) else ground_truth(manifests)
    aps = {f"{t:.2f}": average_precision(dets, gts, t) for t in settings.iou_thresholds}
    mean_ap = sum(aps.values()) / len(aps)
    ap50 = aps["0.50"] if "0.50" in aps else average_precision(dets, gts, 0.5)
    tp, fp, fn = count_matches(dets, gts, settings.f1_iou, settings.score_threshold)
    precision, recall, f1 = f1_from_counts(tp, fp, fn)
    return DetectionReport(
        map=mean_ap,
        ap_per_threshold=aps,
        ap50=ap50,
        f1=f1,
        precision=precision,
        recall=recall,
        tp=tp,
        fp=fp,
        fn=fn,
        settings={
            "iou_thresholds": list(settings.iou_thresholds),
            "f1_iou": settings.f1_iou,
            "score_threshold": settings.score_threshold,
        },
    )
