"""Turn detections on real compound figures into subfigure-caption pairs."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

from PIL import Image, UnidentifiedImageError

from .detection import iou
from .errors import FigforgeError, FormatError
from .formats import DetectionSet, _is_num, check_keys, iter_jsonl, parse_bbox, write_jsonl
from .layout import BBox

DEFAULT_MIN_SCORE = 0.5
DEFAULT_NMS_IOU = 0.45
LONG_CAPTION_TOKENS = 256
KEEP_LABELS = frozenset({"clinical imaging", "clinical image", "microscopy"})


class RecordError(FigforgeError):
    def __init__(self, figure_id, reason):
        super().__init__(f"record {figure_id!r}: {reason}")
        self.figure_id = figure_id


def normalize_label(label: str) -> str:
    return " ".join(label.split()).casefold()


@dataclass(frozen=True)
class CompoundRecord:
    figure_id: str
    image: str
    caption: str = ""
    modality_labels: tuple = ()
    classifier_score: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "modality_labels", tuple(normalize_label(l) for l in self.modality_labels))

    def to_dict(self):
        return {
            "figure_id": self.figure_id,
            "image": self.image,
            "caption": self.caption,
            "modality_labels": list(self.modality_labels),
            "classifier_score": self.classifier_score,
        }


@dataclass(frozen=True)
class SubfigurePair:
    subfigure_id: str
    parent_id: str
    file: str
    bbox: BBox
    caption: str
    score: Optional[float]

    def to_dict(self):
        return {
            "subfigure_id": self.subfigure_id,
            "parent_id": self.parent_id,
            "file": self.file,
            "bbox": self.bbox.as_dict(),
            "caption": self.caption,
            "score": self.score,
        }


def read_records(path) -> List[CompoundRecord]:
    out = []
    for lineno, obj in iter_jsonl(path):
        try:
            check_keys(obj, ("figure_id", "image", "caption", "modality_labels"), ("classifier_score",))
            labels = obj["modality_labels"]
            if not isinstance(labels, list) or not all(isinstance(l, str) for l in labels):
                raise ValueError("modality_labels must be a list of strings")
            score = obj.get("classifier_score")
            if score is not None and (not _is_num(score) or not 0 <= score <= 1):
                raise ValueError("classifier_score must be null or lie in [0, 1]")
            for key in ("figure_id", "image", "caption"):
                if not isinstance(obj[key], str):
                    raise ValueError(f"{key} must be a string")
        except ValueError as exc:
            raise FormatError(str(exc), path=path, line=lineno) from exc
        out.append(CompoundRecord(obj["figure_id"], obj["image"], obj["caption"], tuple(labels), score))
    return out


def write_records(path, records: Iterable[CompoundRecord]) -> int:
    return write_jsonl(path, (r.to_dict() for r in records))


def read_pairs(path) -> List[SubfigurePair]:
    out = []
    for lineno, obj in iter_jsonl(path):
        try:
            check_keys(obj, ("subfigure_id", "parent_id", "file", "bbox", "caption", "score"))
            for key in ("subfigure_id", "parent_id", "file", "caption"):
                if not isinstance(obj[key], str):
                    raise ValueError(f"{key} must be a string")
            score = obj["score"]
            if score is not None and not _is_num(score):
                raise ValueError("score must be a number or null")
            bbox = parse_bbox(obj["bbox"])
        except ValueError as exc:
            raise FormatError(str(exc), path=path, line=lineno) from exc
        out.append(SubfigurePair(obj["subfigure_id"], obj["parent_id"], obj["file"], bbox, obj["caption"], score))
    return out


def write_pairs(path, pairs: Iterable[SubfigurePair]) -> int:
    return write_jsonl(path, (p.to_dict() for p in pairs))


# ---------------------------------------------------------------- decompose


def nms(boxes: Sequence, iou_thr: float) -> List[int]:
    """Greedy NMS over ``(bbox, score)`` items; returns kept indices by rank."""
    order = sorted(range(len(boxes)), key=lambda i: -boxes[i].score)
    kept: List[int] = []
    for i in order:
        if all(iou(boxes[i].bbox, boxes[k].bbox) <= iou_thr for k in kept):
            kept.append(i)
    return kept


def clamp_box(b: BBox, width: int, height: int) -> Optional[BBox]:
    """Snap outward to whole pixels and clip to the image; None if empty."""
    x0 = max(0, math.floor(b.x))
    y0 = max(0, math.floor(b.y))
    x1 = min(width, math.ceil(b.x + b.w))
    y1 = min(height, math.ceil(b.y + b.h))
    if x1 <= x0 or y1 <= y0:
        return None
    return BBox(x0, y0, x1 - x0, y1 - y0)


def decompose(
    record: CompoundRecord,
    dets: DetectionSet,
    min_score: float = DEFAULT_MIN_SCORE,
    nms_iou: float = DEFAULT_NMS_IOU,
    *,
    image=None,
    image_root=None,
    out_dir=None,
):
    """Crop the detected panels of one compound figure.

    Boxes scoring below ``min_score`` are dropped, the rest go through greedy
    NMS and are clipped to the image.  If nothing survives, the whole image
    becomes a single pair.  Every pair carries the parent caption verbatim.

    Returns ``(pairs, crops)``.  Crops are written to
    ``out_dir/<subfigure_id>.png`` when ``out_dir`` is given.
    """
    if dets.image_id != record.figure_id:
        raise RecordError(record.figure_id, f"detections belong to {dets.image_id!r}")
    if image is None:
        path = Path(record.image)
        if image_root is not None and not path.is_absolute():
            path = Path(image_root) / path
        try:
            with Image.open(path) as im:
                im.load()
                image = im.convert("RGB")
        except (OSError, UnidentifiedImageError) as exc:
            raise RecordError(record.figure_id, f"cannot read image {str(path)!r}: {exc}") from exc
    width, height = image.size

    candidates = [d for d in dets.boxes if d.score >= min_score]
    boxes = []
    for i in nms(candidates, nms_iou):
        clamped = clamp_box(candidates[i].bbox, width, height)
        if clamped is not None:
            boxes.append((clamped, candidates[i].score))
    if not boxes:
        boxes = [(BBox(0, 0, width, height), None)]

    pairs, crops = [], []
    for k, (bbox, score) in enumerate(boxes):
        sub_id = f"{record.figure_id}_{k:02d}"
        crop = image.crop((int(bbox.x), int(bbox.y), int(bbox.x2), int(bbox.y2)))
        rel = f"{sub_id}.png"
        if out_dir is not None:
            crop.save(Path(out_dir) / rel, format="PNG", compress_level=6)
        pairs.append(SubfigurePair(sub_id, record.figure_id, rel, bbox, record.caption, score))
        crops.append(crop)
    return pairs, crops


# ---------------------------------------------------------------- filters


def filter_metadata(records: Iterable[CompoundRecord]) -> List[CompoundRecord]:
    """Keep records labeled clinical imaging (or clinical image) or microscopy."""
    return [r for r in records if KEEP_LABELS.intersection(normalize_label(l) for l in r.modality_labels)]


def filter_pairs_by_parent(pairs: Iterable[SubfigurePair], records: Iterable[CompoundRecord]) -> List[SubfigurePair]:
    keep = {r.figure_id for r in records}
    return [p for p in pairs if p.parent_id in keep]


@dataclass
class ScoreFilterResult:
    kept: list
    dropped_below: int
    dropped_missing: int

    def report(self):
        return {
            "kept": len(self.kept),
            "dropped_below_threshold": self.dropped_below,
            "dropped_missing_score": self.dropped_missing,
        }


def filter_score(
    pairs: Iterable[SubfigurePair], threshold: float, scores: Optional[Mapping[str, float]] = None
) -> ScoreFilterResult:
    """Keep pairs whose relevance score is >= ``threshold``.

    Scores come from ``scores[subfigure_id]`` when a mapping is given,
    otherwise from ``pair.score``.  Pairs without a score are dropped and
    counted separately.
    """
    kept, below, missing = [], 0, 0
    for p in pairs:
        s = scores.get(p.subfigure_id) if scores is not None else p.score
        if s is None:
            missing += 1
        elif s >= threshold:
            kept.append(p)
        else:
            below += 1
    return ScoreFilterResult(kept, below, missing)


def read_scores(path) -> Dict[str, float]:
    """Classifier scores as JSONL rows ``{subfigure_id, score}``."""
    out = {}
    for lineno, obj in iter_jsonl(path):
        try:
            check_keys(obj, ("subfigure_id", "score"))
            if not isinstance(obj["subfigure_id"], str):
                raise ValueError("subfigure_id must be a string")
            if obj["score"] is not None and not _is_num(obj["score"]):
                raise ValueError("score must be a number or null")
        except ValueError as exc:
            raise FormatError(str(exc), path=path, line=lineno) from exc
        out[obj["subfigure_id"]] = obj["score"]
    return out


# ---------------------------------------------------------------- statistics


def whitespace_tokens(text: str) -> int:
    return len(text.split())


def corpus_stats(
    pairs: Sequence[SubfigurePair],
    tokenizer: str = "whitespace",
    token_counts: Optional[Mapping[str, int]] = None,
    modalities: Optional[Mapping[str, str]] = None,
) -> dict:
    """Caption-length, modality and panels-per-figure statistics.

    With ``tokenizer="external_token_counts"``, ``token_counts`` maps each
    subfigure_id to a precomputed count.  ``modalities`` maps parent ids to
    a modality name; pairs without one are left out of the shares.
    """
    if tokenizer == "whitespace":
        counts = [whitespace_tokens(p.caption) for p in pairs]
    elif tokenizer == "external_token_counts":
        if token_counts is None:
            raise ValueError("external_token_counts needs a token count mapping")
        missing = [p.subfigure_id for p in pairs if p.subfigure_id not in token_counts]
        if missing:
            raise ValueError(f"no token count for {len(missing)} pairs, e.g. {missing[:3]}")
        counts = [int(token_counts[p.subfigure_id]) for p in pairs]
    else:
        raise ValueError(f"unknown tokenizer {tokenizer!r}")

    n = len(counts)
    per_figure = Counter(p.parent_id for p in pairs)
    histogram = Counter(per_figure.values())

    shares = None
    if modalities is not None:
        mods = Counter(modalities[p.parent_id] for p in pairs if p.parent_id in modalities)
        total = sum(mods.values())
        if total:
            shares = {m: c / total for m, c in sorted(mods.items())}

    return {
        "n_pairs": n,
        "n_figures": len(per_figure),
        "tokenizer": tokenizer,
        "mean_tokens": math.fsum(counts) / n if n else None,
        "max_tokens": max(counts) if n else 0,
        "n_over_256": sum(c > LONG_CAPTION_TOKENS for c in counts),
        "frac_over_256": sum(c > LONG_CAPTION_TOKENS for c in counts) / n if n else None,
        "modality_shares": shares,
        "subfigures_per_figure": {str(k): histogram[k] for k in sorted(histogram)},
    }


def primary_modality(records: Iterable[CompoundRecord]) -> Dict[str, str]:
    """First metadata label of each record, used as its modality."""
    return {r.figure_id: r.modality_labels[0] for r in records if r.modality_labels}
