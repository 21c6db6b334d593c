"""Compound-figure layout sampling.

A :class:`LayoutConfig` describes a family of layouts (grid shape, margin
ranges, label scheme).  :func:`resolve_layout` turns one config plus a seed
into a concrete :class:`LayoutSpec` with integer pixel rectangles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError

LABEL_SCHEMES = (
    "none",
    "numeric",
    "lower_alpha",
    "upper_alpha",
    "alpha_numeric",
    "numeric_alpha",
    "hyphenated",
)
LABEL_POSITIONS = ("inside_top_left", "outside_above")

# label band height at panel_base_size == 100; scaled linearly otherwise
BASE_LABEL_BAND = 16
LABEL_PAD = 2


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, top-left corner plus size, in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"bbox {name} is not finite: {v!r}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"bbox must have positive size, got w={self.w}, h={self.h}")

    @property
    def x2(self):
        return self.x + self.w

    @property
    def y2(self):
        return self.y + self.h

    @property
    def area(self):
        return self.w * self.h

    def as_list(self):
        return [self.x, self.y, self.w, self.h]

    def as_dict(self):
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h}

    def intersects(self, other: "BBox") -> bool:
        return (
            min(self.x2, other.x2) > max(self.x, other.x)
            and min(self.y2, other.y2) > max(self.y, other.y)
        )


def _parse_aspect(value) -> Fraction:
    if isinstance(value, str):
        value = value.strip()
        if ":" in value:
            num, den = value.split(":", 1)
            value = Fraction(int(num), int(den))
    try:
        frac = Fraction(value).limit_denominator(10_000)
    except (TypeError, ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"panel_aspect is not a positive rational: {value!r}") from exc
    if frac <= 0:
        raise ConfigError(f"panel_aspect must be > 0, got {value!r}")
    return frac


def _parse_range(name, value):
    try:
        lo, hi = (int(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be a [min, max] pair of integers") from exc
    if lo < 0:
        raise ConfigError(f"{name} minimum must be >= 0, got {lo}")
    if lo > hi:
        raise ConfigError(f"{name} has min > max: [{lo}, {hi}]")
    return (lo, hi)


@dataclass(frozen=True)
class LayoutConfig:
    """Parameters of one layout family.

    ``label_scheme`` and ``label_position`` may be left as ``None``, in which
    case :func:`resolve_layout` draws them uniformly per figure.
    ``panel_aspect`` is width / height and accepts numbers, ``"4/3"`` or
    ``"4:3"``.
    """

    grid_rows: int = 1
    grid_cols: int = 1
    custom_rows: Optional[tuple] = None
    h_margin_range: tuple = (0, 0)
    v_margin_range: tuple = (0, 0)
    border: int = 0
    label_scheme: Optional[str] = None
    label_position: Optional[str] = "inside_top_left"
    panel_aspect: Fraction = Fraction(1)
    panel_base_size: int = 100

    def __post_init__(self):
        def put(name, value):
            object.__setattr__(self, name, value)

        for name in ("grid_rows", "grid_cols"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
            put(name, int(v))
        if self.custom_rows is not None:
            rows = tuple(self.custom_rows)
            if not rows:
                raise ConfigError("custom_rows must not be empty")
            for c in rows:
                if isinstance(c, bool) or not isinstance(c, (int, np.integer)) or c < 1:
                    raise ConfigError(f"custom_rows entries must be >= 1, got {c!r}")
            put("custom_rows", tuple(int(c) for c in rows))
        put("h_margin_range", _parse_range("h_margin_range", self.h_margin_range))
        put("v_margin_range", _parse_range("v_margin_range", self.v_margin_range))
        if isinstance(self.border, bool) or not isinstance(self.border, (int, np.integer)) or self.border < 0:
            raise ConfigError(f"border must be a non-negative integer, got {self.border!r}")
        put("border", int(self.border))
        if self.label_scheme is not None and self.label_scheme not in LABEL_SCHEMES:
            raise ConfigError(f"unknown label_scheme {self.label_scheme!r}")
        if self.label_position is not None and self.label_position not in LABEL_POSITIONS:
            raise ConfigError(f"unknown label_position {self.label_position!r}")
        put("panel_aspect", _parse_aspect(self.panel_aspect))
        b = self.panel_base_size
        if isinstance(b, bool) or not isinstance(b, (int, np.integer)) or b < 1:
            raise ConfigError(f"panel_base_size must be a positive integer, got {b!r}")
        put("panel_base_size", int(b))

    @property
    def row_counts(self) -> tuple:
        if self.custom_rows is not None:
            return self.custom_rows
        return (self.grid_cols,) * self.grid_rows

    @property
    def panel_size(self) -> tuple:
        w = self.panel_base_size
        h = math.floor(Fraction(w) / self.panel_aspect + Fraction(1, 2))
        if h < 1:
            raise ConfigError(f"panel height rounds to zero for aspect {self.panel_aspect}")
        return w, h

    @property
    def label_band(self) -> int:
        return max(1, round(BASE_LABEL_BAND * self.panel_base_size / 100))

    @classmethod
    def from_dict(cls, d: dict) -> "LayoutConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown layout keys: {sorted(unknown)}")
        kw = dict(d)
        if kw.get("custom_rows") is not None:
            kw["custom_rows"] = tuple(kw["custom_rows"])
        for key in ("h_margin_range", "v_margin_range"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["custom_rows"] = list(self.custom_rows) if self.custom_rows is not None else None
        d["h_margin_range"] = list(self.h_margin_range)
        d["v_margin_range"] = list(self.v_margin_range)
        a = self.panel_aspect
        d["panel_aspect"] = str(a.numerator) if a.denominator == 1 else f"{a.numerator}/{a.denominator}"
        return d


@dataclass(frozen=True)
class PanelSlot:
    rect: BBox
    label_text: str
    label_anchor: tuple
    # region reserved for the label glyphs; None when unlabeled
    label_box: Optional[BBox] = None


@dataclass(frozen=True)
class LayoutSpec:
    canvas_w: int
    canvas_h: int
    panels: tuple = field(default_factory=tuple)
    seed: int = 0
    label_scheme: str = "none"
    label_position: str = "inside_top_left"


def alpha_label(index: int, upper: bool = False) -> str:
    """0 -> 'a', 25 -> 'z', 26 -> 'aa', 27 -> 'ab', ..."""
    if index < 0:
        raise ValueError("label index must be non-negative")
    chars = []
    n = index + 1
    while n > 0:
        n, rem = divmod(n - 1, 26)
        chars.append(chr(ord("a") + rem))
    s = "".join(reversed(chars))
    return s.upper() if upper else s


def make_labels(scheme: str, row_counts: Sequence[int]) -> list:
    """Label texts for every panel, row-major.

    Compound schemes combine the row and the column index ("a1" is row 0,
    column 0), which keeps them unique for any arrangement.
    """
    labels = []
    flat = 0
    for r, ncols in enumerate(row_counts):
        for c in range(ncols):
            if scheme == "none":
                labels.append("")
            elif scheme == "numeric":
                labels.append(str(flat + 1))
            elif scheme == "lower_alpha":
                labels.append(alpha_label(flat))
            elif scheme == "upper_alpha":
                labels.append(alpha_label(flat, upper=True))
            elif scheme == "alpha_numeric":
                labels.append(f"{alpha_label(r)}{c + 1}")
            elif scheme == "numeric_alpha":
                labels.append(f"{r + 1}{alpha_label(c)}")
            elif scheme == "hyphenated":
                labels.append(f"{alpha_label(r)}-{c + 1}")
            else:
                raise ConfigError(f"unknown label_scheme {scheme!r}")
            flat += 1
    return labels


def _label_box(text, position, rect: BBox, band: int):
    if not text:
        return None, (int(rect.x), int(rect.y))
    char_w = max(1, band * 5 // 8)
    w = min(int(rect.w), 2 * LABEL_PAD + char_w * len(text))
    if position == "outside_above":
        box = BBox(int(rect.x), int(rect.y) - band, w, band)
    else:
        box = BBox(int(rect.x), int(rect.y), w, min(band, int(rect.h)))
    anchor = (int(box.x) + LABEL_PAD, int(box.y) + 1)
    return box, anchor


def resolve_layout(config: LayoutConfig, rng_seed: int) -> LayoutSpec:
    """Resolve ``config`` into concrete panel rectangles.

    Draw order from ``numpy.random.default_rng(rng_seed)`` is fixed: label
    scheme (if unpinned), label position (if unpinned), horizontal margin,
    vertical margin.
    """
    if not isinstance(config, LayoutConfig):
        raise ConfigError("resolve_layout expects a LayoutConfig")
    rng_seed = int(rng_seed)
    if not 0 <= rng_seed < 2**64:
        raise ConfigError(f"seed must be a 64-bit unsigned integer, got {rng_seed}")
    rng = np.random.default_rng(rng_seed)

    scheme = config.label_scheme
    if scheme is None:
        scheme = LABEL_SCHEMES[int(rng.integers(len(LABEL_SCHEMES)))]
    position = config.label_position
    if position is None:
        position = LABEL_POSITIONS[int(rng.integers(len(LABEL_POSITIONS)))]
    h_margin = int(rng.integers(config.h_margin_range[0], config.h_margin_range[1] + 1))
    v_margin = int(rng.integers(config.v_margin_range[0], config.v_margin_range[1] + 1))

    pw, ph = config.panel_size
    rows = config.row_counts
    band = config.label_band if (position == "outside_above" and scheme != "none") else 0
    border = config.border

    max_cols = max(rows)
    canvas_w = max_cols * pw + (max_cols - 1) * h_margin + 2 * border
    canvas_h = len(rows) * (ph + band) + (len(rows) - 1) * v_margin + 2 * border

    labels = make_labels(scheme, rows)
    panels = []
    k = 0
    for r, ncols in enumerate(rows):
        y = border + r * (ph + band + v_margin) + band
        for c in range(ncols):
            x = border + c * (pw + h_margin)
            rect = BBox(x, y, pw, ph)
            box, anchor = _label_box(labels[k], position, rect, config.label_band)
            panels.append(PanelSlot(rect, labels[k], anchor, box))
            k += 1
    return LayoutSpec(canvas_w, canvas_h, tuple(panels), rng_seed, scheme, position)


def check_layout(spec: LayoutSpec) -> None:
    """Raise ``AssertionError`` if ``spec`` breaks a layout invariant."""
    rects = [p.rect for p in spec.panels]
    assert rects, "layout has no panels"
    for r in rects:
        assert r.x >= 0 and r.y >= 0, r
        assert r.x2 <= spec.canvas_w and r.y2 <= spec.canvas_h, r
    assert len({(r.w, r.h) for r in rects}) == 1, "panels differ in size"
    for i in range(len(rects)):
        for j in range(i + 1, len(rects)):
            assert not rects[i].intersects(rects[j]), (i, j)
    texts = [p.label_text for p in spec.panels if p.label_text]
    assert len(texts) == len(set(texts)), "duplicate labels"
    for p in spec.panels:
        if p.label_box is None:
            continue
        b = p.label_box
        assert b.x >= 0 and b.y >= 0 and b.x2 <= spec.canvas_w and b.y2 <= spec.canvas_h
        if spec.label_position == "outside_above":
            assert not any(b.intersects(r) for r in rects), "label band overlaps a panel"
