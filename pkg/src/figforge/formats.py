"""Readers and writers for every on-disk format figforge consumes or emits.

Text formats are UTF-8 JSONL without a BOM, one compact JSON object per
line.  Readers are strict: unknown or missing keys are errors and every
error carries the 1-based line number.

Embeddings use a small binary container (``EMBF``)::

    offset  size   content
    0       8      ASCII magic b"EMBF0001"
    8       4      n, uint32 little-endian
    12      4      d, uint32 little-endian
    16      4*n*d  float32 little-endian, row-major

with row ids in a sidecar ``<path>.ids.jsonl`` holding one JSON string per
line.
"""

from __future__ import annotations

import json
import math
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, List, Optional

import numpy as np

from .errors import (
    FormatError,
    MagicMismatchError,
    NonFiniteError,
    SidecarMismatchError,
    SizeMismatchError,
)
from .layout import BBox

EMBF_MAGIC = b"EMBF0001"
EMBF_HEADER = struct.Struct("<8sII")

MODALITIES = ("radiology", "histopathology", "dermatology", "retina", "plot")


# ---------------------------------------------------------------- records


@dataclass(frozen=True)
class PanelRecord:
    bbox: BBox
    label_text: str
    source_id: str
    modality: str


@dataclass(frozen=True)
class FigureManifest:
    figure_id: str
    file: str
    width: int
    height: int
    seed: int
    panels: tuple
    caption: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "figure_id": self.figure_id,
            "file": self.file,
            "width": self.width,
            "height": self.height,
            "seed": self.seed,
            "panels": [
                {
                    "bbox": p.bbox.as_dict(),
                    "label_text": p.label_text,
                    "source_id": p.source_id,
                    "modality": p.modality,
                }
                for p in self.panels
            ],
            "caption": self.caption,
        }


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    score: float


@dataclass(frozen=True)
class DetectionSet:
    image_id: str
    boxes: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        for det in self.boxes:
            if not (0.0 <= det.score <= 1.0):
                raise ValueError(f"detection score outside [0, 1]: {det.score!r}")

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "boxes": [{**d.bbox.as_dict(), "score": d.score} for d in self.boxes],
        }


@dataclass
class EmbeddingMatrix:
    """``n x d`` embeddings with one id per row."""

    data: np.ndarray
    ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValueError(f"embedding data must be 2-D, got shape {data.shape}")
        if len(self.ids) != data.shape[0]:
            raise ValueError(f"{len(self.ids)} ids for {data.shape[0]} rows")
        if not np.all(np.isfinite(data)):
            raise ValueError("embedding data contains non-finite values")
        self.data = data

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    @classmethod
    def from_array(cls, data, ids=None) -> "EmbeddingMatrix":
        data = np.asarray(data)
        if ids is None:
            ids = [str(i) for i in range(data.shape[0])]
        return cls(data, list(ids))


# ---------------------------------------------------------------- JSONL core


def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"), allow_nan=False)


def write_jsonl(path, rows: Iterable[dict]) -> int:
    """Write dicts one per line; returns the row count."""
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(_dumps(row))
            fh.write("\n")
            n += 1
    return n


def _reject_constant(name):
    raise ValueError(f"non-standard JSON constant {name}")


def iter_jsonl(path) -> Iterator[tuple]:
    """Yield ``(line_number, object)`` for each line of a JSONL file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw.startswith(b"\xef\xbb\xbf"):
        raise FormatError("file starts with a byte-order mark", path=path, line=1, offset=0)
    lines = raw.split(b"\n")
    if lines and lines[-1] == b"":
        lines.pop()
    for lineno, line in enumerate(lines, start=1):
        try:
            text = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"invalid UTF-8 at column {exc.start + 1}", path=path, line=lineno) from exc
        if not text.strip():
            raise FormatError("blank line", path=path, line=lineno)
        try:
            obj = json.loads(text, parse_constant=_reject_constant)
        except (json.JSONDecodeError, ValueError) as exc:
            col = getattr(exc, "colno", None)
            msg = f"malformed JSON ({exc.msg if hasattr(exc, 'msg') else exc})"
            if col is not None:
                msg += f" at column {col}"
            raise FormatError(msg, path=path, line=lineno) from exc
        if not isinstance(obj, dict):
            raise FormatError("expected a JSON object", path=path, line=lineno)
        yield lineno, obj


def check_keys(obj: dict, required, optional=(), where="") -> None:
    keys = set(obj)
    missing = set(required) - keys
    unknown = keys - set(required) - set(optional)
    if missing:
        raise ValueError(f"{where}missing keys {sorted(missing)}")
    if unknown:
        raise ValueError(f"{where}unknown keys {sorted(unknown)}")


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v):
    return (isinstance(v, (int, float)) and not isinstance(v, bool)) and math.isfinite(v)


def _str(obj, key):
    v = obj[key]
    if not isinstance(v, str):
        raise ValueError(f"{key} must be a string")
    return v


def parse_bbox(d, where="bbox") -> BBox:
    if not isinstance(d, dict):
        raise ValueError(f"{where} must be an object")
    check_keys(d, ("x", "y", "w", "h"), where=f"{where}: ")
    for k in ("x", "y", "w", "h"):
        if not _is_num(d[k]):
            raise ValueError(f"{where}.{k} must be a finite number")
    return BBox(d["x"], d["y"], d["w"], d["h"])


# ---------------------------------------------------------------- manifests

_MANIFEST_KEYS = ("figure_id", "file", "width", "height", "seed", "panels", "caption")
_PANEL_KEYS = ("bbox", "label_text", "source_id", "modality")


def manifest_from_dict(obj: dict) -> FigureManifest:
    check_keys(obj, _MANIFEST_KEYS)
    figure_id = _str(obj, "figure_id")
    file = _str(obj, "file")
    width, height, seed = obj["width"], obj["height"], obj["seed"]
    if not (_is_int(width) and width > 0 and _is_int(height) and height > 0):
        raise ValueError("width and height must be positive integers")
    if not (_is_int(seed) and 0 <= seed < 2**64):
        raise ValueError("seed must be a 64-bit unsigned integer")
    caption = obj["caption"]
    if caption is not None and not isinstance(caption, str):
        raise ValueError("caption must be a string or null")
    if not isinstance(obj["panels"], list) or not obj["panels"]:
        raise ValueError("panels must be a non-empty list")
    panels = []
    for i, p in enumerate(obj["panels"]):
        if not isinstance(p, dict):
            raise ValueError(f"panels[{i}] must be an object")
        check_keys(p, _PANEL_KEYS, where=f"panels[{i}]: ")
        bbox = parse_bbox(p["bbox"], where=f"panels[{i}].bbox")
        if bbox.x < 0 or bbox.y < 0 or bbox.x2 > width or bbox.y2 > height:
            raise ValueError(f"panels[{i}].bbox lies outside the {width}x{height} canvas")
        modality = p["modality"]
        if modality is not None and modality not in MODALITIES:
            raise ValueError(f"panels[{i}].modality {modality!r} is not one of {MODALITIES}")
        panels.append(PanelRecord(bbox, _str(p, "label_text"), _str(p, "source_id"), modality))
    for i in range(len(panels)):
        for j in range(i + 1, len(panels)):
            if panels[i].bbox.intersects(panels[j].bbox):
                raise ValueError(f"panels[{i}] and panels[{j}] overlap")
    return FigureManifest(figure_id, file, width, height, seed, tuple(panels), caption)


def read_manifest(path) -> Iterator[FigureManifest]:
    seen = set()
    for lineno, obj in iter_jsonl(path):
        try:
            m = manifest_from_dict(obj)
        except ValueError as exc:
            raise FormatError(str(exc), path=path, line=lineno) from exc
        if m.figure_id in seen:
            raise FormatError(f"duplicate figure_id {m.figure_id!r}", path=path, line=lineno)
        seen.add(m.figure_id)
        yield m


def write_manifest(path, manifests: Iterable[FigureManifest]) -> int:
    return write_jsonl(path, (m.to_dict() for m in manifests))


# ---------------------------------------------------------------- detections


def detections_from_dict(obj: dict) -> DetectionSet:
    check_keys(obj, ("image_id", "boxes"))
    image_id = _str(obj, "image_id")
    if not isinstance(obj["boxes"], list):
        raise ValueError("boxes must be a list")
    boxes = []
    for i, b in enumerate(obj["boxes"]):
        if not isinstance(b, dict):
            raise ValueError(f"boxes[{i}] must be an object")
        check_keys(b, ("x", "y", "w", "h", "score"), where=f"boxes[{i}]: ")
        score = b["score"]
        if not _is_num(score) or not 0.0 <= score <= 1.0:
            raise ValueError(f"boxes[{i}].score must lie in [0, 1], got {score!r}")
        bbox = parse_bbox({k: b[k] for k in ("x", "y", "w", "h")}, where=f"boxes[{i}]")
        boxes.append(Detection(bbox, score))
    return DetectionSet(image_id, tuple(boxes))


def read_detections(path) -> Iterator[DetectionSet]:
    for lineno, obj in iter_jsonl(path):
        try:
            yield detections_from_dict(obj)
        except ValueError as exc:
            raise FormatError(str(exc), path=path, line=lineno) from exc


def write_detections(path, dets: Iterable[DetectionSet]) -> int:
    return write_jsonl(path, (d.to_dict() for d in dets))


# ---------------------------------------------------------------- COCO

COCO_CATEGORY = {"id": 1, "name": "subfigure"}


def export_coco(manifests: Iterable[FigureManifest]) -> dict:
    """Single-category COCO detection document; ids are dense from 1."""
    images, annotations = [], []
    seen = set()
    for m in manifests:
        if m.figure_id in seen:
            raise ValueError(f"duplicate figure_id {m.figure_id!r}")
        seen.add(m.figure_id)
        image_id = len(images) + 1
        images.append(
            {"id": image_id, "file_name": m.file, "width": m.width, "height": m.height, "figure_id": m.figure_id}
        )
        for p in m.panels:
            annotations.append(
                {
                    "id": len(annotations) + 1,
                    "image_id": image_id,
                    "category_id": 1,
                    "bbox": p.bbox.as_list(),
                    "area": p.bbox.area,
                    "iscrowd": 0,
                }
            )
    return {"images": images, "annotations": annotations, "categories": [dict(COCO_CATEGORY)]}


def write_coco(path, doc: dict) -> None:
    validate_coco(doc)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps(doc))
        fh.write("\n")


def validate_coco(doc, path=None) -> dict:
    """Check the structure of a single-class COCO document.

    Errors carry ``pointer``, the key path of the offending JSON value.
    """
    def fail(msg, *pointer):
        exc = FormatError(msg, path=path)
        exc.pointer = pointer
        raise exc

    if not isinstance(doc, dict):
        fail("COCO document must be a JSON object")
    try:
        check_keys(doc, ("images", "annotations", "categories"))
    except ValueError as exc:
        fail(str(exc))
    for key in ("images", "annotations"):
        if not isinstance(doc[key], list):
            fail(f"{key} must be a list", key)
    if doc["categories"] != [COCO_CATEGORY]:
        fail("categories must be exactly [{id: 1, name: 'subfigure'}]", "categories")
    image_ids = set()
    for i, im in enumerate(doc["images"]):
        try:
            check_keys(im, ("id", "file_name", "width", "height", "figure_id"), where=f"images[{i}]: ")
        except (ValueError, TypeError) as exc:
            fail(str(exc), "images", i)
        if im["id"] != i + 1:
            fail(f"images[{i}].id must be {i + 1}", "images", i, "id")
        image_ids.add(im["id"])
    for i, ann in enumerate(doc["annotations"]):
        try:
            check_keys(ann, ("id", "image_id", "category_id", "bbox", "area", "iscrowd"), where=f"annotations[{i}]: ")
        except (ValueError, TypeError) as exc:
            fail(str(exc), "annotations", i)
        if ann["id"] != i + 1:
            fail(f"annotations[{i}].id must be {i + 1}", "annotations", i, "id")
        if ann["image_id"] not in image_ids:
            fail(f"annotations[{i}] references unknown image {ann['image_id']!r}", "annotations", i, "image_id")
        if ann["category_id"] != 1:
            fail(f"annotations[{i}].category_id must be 1", "annotations", i, "category_id")
        bbox = ann["bbox"]
        if not (isinstance(bbox, list) and len(bbox) == 4 and all(_is_num(v) for v in bbox)):
            fail(f"annotations[{i}].bbox must be [x, y, w, h]", "annotations", i, "bbox")
    return doc


_WS = re.compile(r"[ \t\n\r]*")


def json_position(text: str, pointer) -> Optional[int]:
    """Character index where the value at ``pointer`` starts in ``text``."""
    dec = json.JSONDecoder()
    skip = lambda i: _WS.match(text, i).end()
    pos = skip(0)
    for step in pointer:
        if pos >= len(text) or text[pos] not in "{[":
            return None
        is_obj = text[pos] == "{"
        pos = skip(pos + 1)
        k = 0
        while pos < len(text) and text[pos] not in "}]":
            if is_obj:
                key, pos = dec.raw_decode(text, pos)
                pos = skip(skip(pos) + 1)  # past the colon
                hit = key == step
            else:
                hit = k == step
            if hit:
                break
            _, pos = dec.raw_decode(text, pos)
            pos = skip(pos)
            if text[pos] == ",":
                pos = skip(pos + 1)
            k += 1
        else:
            return None
    return pos


def read_coco(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        text = raw.decode("utf-8")
        doc = json.loads(text, parse_constant=_reject_constant)
    except UnicodeDecodeError as exc:
        raise FormatError("invalid UTF-8", path=path, offset=exc.start) from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed JSON ({exc.msg}) at column {exc.colno}", path=path, line=exc.lineno, offset=exc.pos) from exc
    except ValueError as exc:
        raise FormatError(str(exc), path=path) from exc
    try:
        return validate_coco(doc, path=path)
    except FormatError as exc:
        pos = json_position(text, exc.pointer)
        if pos is None:
            raise
        line = text.count("\n", 0, pos) + 1
        raise FormatError(exc.reason, path=path, line=line, offset=len(text[:pos].encode("utf-8"))) from exc


# ---------------------------------------------------------------- EMBF


def sidecar_path(path) -> Path:
    return Path(str(path) + ".ids.jsonl")


def write_embeddings(path, emb: EmbeddingMatrix) -> None:
    data = np.ascontiguousarray(emb.data, dtype="<f4")
    if not np.all(np.isfinite(data)):
        raise ValueError("embedding values overflow float32")
    n, d = data.shape
    with open(path, "wb") as fh:
        fh.write(EMBF_HEADER.pack(EMBF_MAGIC, n, d))
        fh.write(data.tobytes(order="C"))
    with open(sidecar_path(path), "w", encoding="utf-8", newline="\n") as fh:
        for i in emb.ids:
            fh.write(_dumps(str(i)))
            fh.write("\n")


def read_embeddings(path) -> EmbeddingMatrix:
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        header = fh.read(EMBF_HEADER.size)
        if len(header) < EMBF_HEADER.size:
            raise SizeMismatchError(
                f"file is {size} bytes, shorter than the {EMBF_HEADER.size}-byte header",
                path=path, offset=len(header),
            )
        magic, n, d = EMBF_HEADER.unpack(header)
        if magic != EMBF_MAGIC:
            bad = next(i for i in range(8) if magic[i] != EMBF_MAGIC[i])
            raise MagicMismatchError(f"bad magic {magic!r}, expected {EMBF_MAGIC!r}", path=path, offset=bad)
        expected = EMBF_HEADER.size + 4 * n * d
        if size != expected:
            raise SizeMismatchError(
                f"header declares n={n}, d={d} ({expected} bytes) but file has {size} bytes",
                path=path, offset=8,
            )
        data = np.frombuffer(fh.read(4 * n * d), dtype="<f4").reshape(n, d)
    finite = np.isfinite(data)
    if not finite.all():
        flat = int(np.flatnonzero(~finite.ravel())[0])
        raise NonFiniteError(
            f"non-finite value at row {flat // d}, column {flat % d}",
            path=path, offset=EMBF_HEADER.size + 4 * flat,
        )
    side = sidecar_path(path)
    if not side.exists():
        raise SidecarMismatchError("missing id sidecar", path=side)
    ids = _read_id_lines(side)
    if len(ids) != n:
        raise SidecarMismatchError(
            f"sidecar has {len(ids)} ids but the matrix has {n} rows",
            path=side, line=min(len(ids), n) + 1,
        )
    return EmbeddingMatrix(data.astype(np.float32), ids)


def _read_id_lines(path) -> list:
    with open(path, "rb") as fh:
        raw = fh.read()
    lines = raw.split(b"\n")
    if lines and lines[-1] == b"":
        lines.pop()
    ids = []
    for lineno, line in enumerate(lines, start=1):
        try:
            v = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError("malformed id line", path=path, line=lineno) from exc
        if not isinstance(v, str):
            raise FormatError("id must be a JSON string", path=path, line=lineno)
        ids.append(v)
    return ids
