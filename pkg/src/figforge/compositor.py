"""Render compound figures from single-panel source images.

Corpus generation is deterministic per figure index: figure ``i`` draws
everything from ``numpy.random.default_rng(split_seed(master_seed, i))``, so
the output does not depend on how figures are spread over worker processes.
"""

from __future__ import annotations

import functools
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFont, UnidentifiedImageError

from .errors import ConfigError, FormatError, GenerationError, PanelImageError
from .formats import (
    MODALITIES,
    FigureManifest,
    PanelRecord,
    check_keys,
    iter_jsonl,
    manifest_from_dict,
    write_jsonl,
)
from .layout import LayoutConfig, LayoutSpec, resolve_layout

log = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
SPLITS = ("train", "validation")
MIX_KINDS = MODALITIES + ("mixed",)
WHITE = (255, 255, 255)


def split_seed(master_seed: int, index: int) -> int:
    """Derive the seed of figure ``index`` (SplitMix64 finalizer).

    ``z = master_seed + (index + 1) * 0x9E3779B97F4A7C15 (mod 2**64)``, then
    ``z ^= z >> 30; z *= 0xBF58476D1CE4E5B9; z ^= z >> 27;
    z *= 0x94D049BB133111EB; z ^= z >> 31``, all modulo 2**64.
    """
    z = (int(master_seed) + (int(index) + 1) * 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


# ---------------------------------------------------------------- pool


@dataclass(frozen=True)
class PoolEntry:
    source_id: str
    path: str
    modality: str
    split: str = "train"

    def to_dict(self):
        return {"source_id": self.source_id, "path": self.path, "modality": self.modality, "split": self.split}


class PanelPool:
    """Single-panel source images grouped by modality.

    Relative entry paths are resolved against ``root``.
    """

    def __init__(self, entries: Sequence[PoolEntry], root=None):
        self.entries = tuple(entries)
        self.root = Path(root) if root is not None else None
        seen = set()
        for e in self.entries:
            if e.source_id in seen:
                raise ConfigError(f"duplicate source_id {e.source_id!r} in panel pool")
            seen.add(e.source_id)
            if e.modality not in MODALITIES:
                raise ConfigError(f"unknown modality {e.modality!r} for {e.source_id!r}")
            if e.split not in SPLITS:
                raise ConfigError(f"unknown split {e.split!r} for {e.source_id!r}")

    def __len__(self):
        return len(self.entries)

    def resolve(self, entry: PoolEntry) -> Path:
        p = Path(entry.path)
        if self.root is not None and not p.is_absolute():
            p = self.root / p
        return p

    def check_paths(self):
        missing = [e.source_id for e in self.entries if not self.resolve(e).is_file()]
        if missing:
            raise ConfigError(f"{len(missing)} pool paths do not exist, e.g. {missing[:3]}")

    def by_modality(self, split: Optional[str] = None) -> dict:
        groups = {m: [] for m in MODALITIES}
        for e in self.entries:
            if split is None or e.split == split:
                groups[e.modality].append(e)
        return {m: tuple(v) for m, v in groups.items() if v}


def load_pool(path, check=True) -> PanelPool:
    entries = []
    for lineno, obj in iter_jsonl(path):
        try:
            check_keys(obj, ("source_id", "path", "modality", "split"))
            if not all(isinstance(obj[k], str) for k in obj):
                raise ValueError("all pool fields must be strings")
        except ValueError as exc:
            raise FormatError(str(exc), path=path, line=lineno) from exc
        entries.append(PoolEntry(**obj))
    pool = PanelPool(entries, root=Path(path).parent)
    if check:
        pool.check_paths()
    return pool


def write_pool(path, pool: PanelPool) -> None:
    write_jsonl(path, (e.to_dict() for e in pool.entries))


# ---------------------------------------------------------------- policy


@dataclass(frozen=True)
class MixPolicy:
    """Probability of each figure kind: a pure modality or ``mixed``."""

    weights: dict

    def __post_init__(self):
        w = dict(self.weights)
        unknown = set(w) - set(MIX_KINDS)
        if unknown:
            raise ConfigError(f"unknown mix kinds {sorted(unknown)}")
        for k, v in w.items():
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v) or v < 0:
                raise ConfigError(f"mix weight for {k!r} must be a finite number >= 0")
        total = math.fsum(w.values())
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"mix weights sum to {total!r}, expected 1")
        object.__setattr__(self, "weights", {k: float(w.get(k, 0.0)) for k in MIX_KINDS})

    @classmethod
    def uniform(cls):
        return cls({k: 1.0 / len(MIX_KINDS) for k in MIX_KINDS})

    def draw(self, rng) -> str:
        u = rng.random()
        acc = 0.0
        kinds = [k for k in MIX_KINDS if self.weights[k] > 0]
        for k in kinds:
            acc += self.weights[k]
            if u < acc:
                return k
        return kinds[-1]


@dataclass(frozen=True)
class LabelStyle:
    font_px: Optional[int] = None  # default: label box height - 4
    color: tuple = (0, 0, 0)
    background: Optional[tuple] = WHITE

    @classmethod
    def from_dict(cls, d):
        check_keys(d, (), ("font_px", "color", "background"))
        kw = dict(d)
        for key in ("color", "background"):
            if kw.get(key) is not None:
                kw[key] = tuple(int(c) for c in kw[key])
        return cls(**kw)

    def to_dict(self):
        return {
            "font_px": self.font_px,
            "color": list(self.color),
            "background": list(self.background) if self.background is not None else None,
        }


@dataclass(frozen=True)
class GenerationConfig:
    layouts: tuple
    mix: MixPolicy = field(default_factory=MixPolicy.uniform)
    label_style: LabelStyle = field(default_factory=LabelStyle)
    split: Optional[str] = None  # restrict the pool to one split

    def __post_init__(self):
        layouts = self.layouts
        if isinstance(layouts, LayoutConfig):
            layouts = (layouts,)
        layouts = tuple(layouts)
        if not layouts:
            raise ConfigError("at least one layout template is required")
        object.__setattr__(self, "layouts", layouts)
        if self.split is not None and self.split not in SPLITS:
            raise ConfigError(f"unknown split {self.split!r}")


# ---------------------------------------------------------------- rendering


def to_rgb_image(img) -> Image.Image:
    if isinstance(img, Image.Image):
        return img if img.mode == "RGB" else img.convert("RGB")
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {arr.dtype}")
    if arr.ndim == 2:
        return Image.fromarray(arr, "L").convert("RGB")
    if arr.ndim == 3 and arr.shape[2] == 3:
        return Image.fromarray(arr, "RGB")
    if arr.ndim == 3 and arr.shape[2] == 4:
        return Image.fromarray(arr, "RGBA").convert("RGB")
    raise ValueError(f"unsupported image shape {arr.shape}")


def fit_panel(img, width: int, height: int) -> Image.Image:
    """Center-crop ``img`` to ``width/height`` aspect, then resize to fit."""
    img = to_rgb_image(img)
    sw, sh = img.size
    # compare sw/sh with width/height without floating point
    if sw * height > sh * width:
        cw, ch = (sh * width + height // 2) // height, sh
    else:
        cw, ch = sw, (sw * height + width // 2) // width
    if cw < 1 or ch < 1:
        raise GenerationError(f"panel of size {sw}x{sh} is empty after cropping to {width}:{height}")
    left, top = (sw - cw) // 2, (sh - ch) // 2
    if (cw, ch) != (sw, sh):
        img = img.crop((left, top, left + cw, top + ch))
    if img.size != (width, height):
        img = img.resize((width, height), Image.Resampling.BILINEAR)
    return img


@functools.lru_cache(maxsize=64)
def _font(size: int):
    return ImageFont.load_default(size=size)


def draw_label(canvas: Image.Image, slot, style: LabelStyle) -> None:
    """Draw ``slot.label_text`` clipped to ``slot.label_box``."""
    box = slot.label_box
    if box is None or not slot.label_text:
        return
    x, y, w, h = int(box.x), int(box.y), int(box.w), int(box.h)
    if style.background is not None:
        tile = Image.new("RGB", (w, h), tuple(style.background))
    else:
        tile = canvas.crop((x, y, x + w, y + h))
    size = style.font_px or max(6, h - 4)
    draw = ImageDraw.Draw(tile)
    ax, ay = slot.label_anchor
    draw.text((ax - x, ay - y), slot.label_text, fill=tuple(style.color), font=_font(size))
    canvas.paste(tile, (x, y))


def compose_figure(
    spec: LayoutSpec,
    panel_images: Sequence,
    label_style: Optional[LabelStyle] = None,
    *,
    sources: Optional[Sequence[PoolEntry]] = None,
    figure_id: str = "",
    file: str = "",
    seed: Optional[int] = None,
    caption: Optional[str] = None,
):
    """Paste fitted panels onto a white canvas and draw their labels.

    ``panel_images`` items may be PIL images, uint8 arrays, or paths.
    Returns ``(image, manifest)``; manifest bboxes are the layout rectangles.
    """
    if len(panel_images) != len(spec.panels):
        raise GenerationError(f"{len(panel_images)} images for {len(spec.panels)} panel slots")
    if sources is not None and len(sources) != len(spec.panels):
        raise GenerationError(f"{len(sources)} sources for {len(spec.panels)} panel slots")
    style = label_style or LabelStyle()
    canvas = Image.new("RGB", (spec.canvas_w, spec.canvas_h), WHITE)
    records = []
    for k, (slot, img) in enumerate(zip(spec.panels, panel_images)):
        sid = sources[k].source_id if sources is not None else str(k)
        modality = sources[k].modality if sources is not None else None
        if isinstance(img, (str, os.PathLike)):
            img = _decode(str(img), sid)
        try:
            fitted = fit_panel(img, int(slot.rect.w), int(slot.rect.h))
        except GenerationError:
            raise
        except (ValueError, OSError) as exc:
            raise PanelImageError(sid, exc) from exc
        canvas.paste(fitted, (int(slot.rect.x), int(slot.rect.y)))
        records.append(PanelRecord(slot.rect, slot.label_text, sid, modality))
    for slot in spec.panels:
        draw_label(canvas, slot, style)
    manifest = FigureManifest(
        figure_id=figure_id,
        file=file,
        width=spec.canvas_w,
        height=spec.canvas_h,
        seed=spec.seed if seed is None else int(seed),
        panels=tuple(records),
        caption=caption,
    )
    return canvas, manifest


@functools.lru_cache(maxsize=2048)
def _decode(path: str, source_id: str) -> Image.Image:
    try:
        with Image.open(path) as im:
            im.load()
            return im.convert("RGB")
    except (OSError, UnidentifiedImageError) as exc:
        raise PanelImageError(source_id, exc) from exc


# ---------------------------------------------------------------- corpus


@dataclass(frozen=True)
class FigurePlan:
    index: int
    seed: int
    kind: str
    layout: LayoutSpec
    sources: tuple

    @property
    def figure_id(self):
        return figure_id(self.index)


def figure_id(index: int) -> str:
    return f"fig_{index:08d}"


def plan_figure(pool: PanelPool, config: GenerationConfig, master_seed: int, index: int) -> FigurePlan:
    """Every random decision for figure ``index``, without rendering.

    Draw order: layout template, figure kind, layout seed, then per panel
    (modality if mixed, pool entry).
    """
    seed = split_seed(master_seed, index)
    rng = np.random.default_rng(seed)
    template = config.layouts[int(rng.integers(len(config.layouts)))]
    kind = config.mix.draw(rng)
    layout_seed = int(rng.integers(0, 2**64, dtype=np.uint64))
    spec = resolve_layout(template, layout_seed)
    groups = pool.by_modality(config.split)
    available = tuple(m for m in MODALITIES if m in groups)
    if not available:
        raise ConfigError("panel pool is empty for the selected split")
    sources = []
    for _ in spec.panels:
        if kind == "mixed":
            modality = available[int(rng.integers(len(available)))]
        else:
            modality = kind
            if modality not in groups:
                raise ConfigError(f"mix policy needs modality {modality!r} but the pool has none")
        group = groups[modality]
        sources.append(group[int(rng.integers(len(group)))])
    return FigurePlan(index, seed, kind, spec, tuple(sources))


def render_plan(plan: FigurePlan, pool: PanelPool, style: LabelStyle, out_dir) -> dict:
    images = [_decode(str(pool.resolve(e)), e.source_id) for e in plan.sources]
    rel = f"images/{plan.figure_id}.png"
    img, manifest = compose_figure(
        plan.layout, images, style, sources=plan.sources,
        figure_id=plan.figure_id, file=rel, seed=plan.seed,
    )
    img.save(Path(out_dir) / rel, format="PNG", compress_level=6)
    return manifest.to_dict()


_WORKER_STATE = {}


def _init_worker(pool, config, master_seed, out_dir):
    _WORKER_STATE.update(pool=pool, config=config, master_seed=master_seed, out_dir=out_dir)


def _render_index(index: int) -> dict:
    s = _WORKER_STATE
    plan = plan_figure(s["pool"], s["config"], s["master_seed"], index)
    return render_plan(plan, s["pool"], s["config"].label_style, s["out_dir"])


def check_policy(pool, config):
    groups = pool.by_modality(config.split)
    for kind, w in config.mix.weights.items():
        if w <= 0:
            continue
        if kind == "mixed":
            if not groups:
                raise ConfigError("mixed figures need a non-empty pool")
        elif kind not in groups:
            raise ConfigError(f"mix policy needs modality {kind!r} but the pool has none")


def generate_corpus(
    pool: PanelPool,
    config: GenerationConfig,
    count: int,
    master_seed: int,
    workers: int = 1,
    out_dir=".",
    manifest_name: str = "manifest.jsonl",
) -> list:
    """Render ``count`` figures into ``out_dir`` and write their manifest.

    Images go to ``out_dir/images/fig_XXXXXXXX.png``; the manifest rows are
    written in index order by this process alone.  Returns the manifests.
    """
    if count < 0:
        raise ConfigError("count must be >= 0")
    if not 0 <= int(master_seed) < 2**64:
        raise ConfigError("master_seed must be a 64-bit unsigned integer")
    workers = max(1, int(workers))
    check_policy(pool, config)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"output directory {out_dir} is not writable")
    if count:
        (out_dir / "images").mkdir(exist_ok=True)

    manifests = []
    state = (pool, config, int(master_seed), out_dir)
    if workers == 1 or count < 2:
        _init_worker(*state)
        rows = map(_render_index, range(count))
        manifests = _write_rows(out_dir / manifest_name, rows)
    else:
        chunk = max(1, min(64, count // (4 * workers)))
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=state) as ex:
            rows = ex.map(_render_index, range(count), chunksize=chunk)
            manifests = _write_rows(out_dir / manifest_name, rows)
    log.info("generated %d figures in %s", count, out_dir)
    return manifests


def _write_rows(path, rows):
    out = []

    def tee():
        for row in rows:
            out.append(manifest_from_dict(row))
            yield row

    write_jsonl(path, tee())
    return out
