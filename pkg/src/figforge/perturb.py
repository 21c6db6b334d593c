"""Low-level visual perturbations for retrieval robustness tests.

All kinds keep the image size.  Pixels uncovered by a shift or rotation are
filled by edge replication.  Images are ``uint8`` arrays, ``H x W`` or
``H x W x C``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError

KINDS = ("brightness", "shift", "rotation", "hflip", "zoom")

# sampling ranges used when a spec carries a seed instead of a magnitude
DEFAULT_RANGES = {
    "brightness": (-0.2, 0.2),
    "shift": (-0.1, 0.1),
    "rotation": (-15.0, 15.0),
    "hflip": (0.0, 0.0),
    "zoom": (1.1, 1.3),
}
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    magnitude: Optional[float] = None
    seed: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown perturbation kind {self.kind!r}")
        if self.magnitude is None:
            if self.kind == "hflip":
                object.__setattr__(self, "magnitude", 0.0)
            elif self.seed is None:
                raise ConfigError(f"{self.kind} needs a magnitude or a seed")
            else:
                lo, hi = DEFAULT_RANGES[self.kind]
                rng = np.random.default_rng(int(self.seed))
                object.__setattr__(self, "magnitude", float(rng.uniform(lo, hi)))
        m = self.magnitude
        if not math.isfinite(m):
            raise ConfigError("magnitude must be finite")
        if self.kind == "brightness" and not -1.0 <= m <= 1.0:
            raise ConfigError(f"brightness must lie in [-1, 1], got {m}")
        if self.kind == "shift" and not -0.5 <= m <= 0.5:
            raise ConfigError(f"shift must lie in [-0.5, 0.5], got {m}")
        if self.kind == "rotation" and not -45.0 <= m <= 45.0:
            raise ConfigError(f"rotation must lie in [-45, 45] degrees, got {m}")
        if self.kind == "zoom" and m < 1.0:
            raise ConfigError(f"zoom must be >= 1, got {m}")

    @property
    def name(self):
        if self.kind == "hflip":
            return "hflip"
        return f"{self.kind}_{self.magnitude:g}"

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"kind", "magnitude", "seed"}
        if unknown:
            raise ConfigError(f"unknown perturbation keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return {"kind": self.kind, "magnitude": self.magnitude, "seed": self.seed}


def _as_uint8(image) -> np.ndarray:
    a = np.asarray(image)
    if a.dtype != np.uint8:
        raise ValueError(f"expected a uint8 image, got {a.dtype}")
    if a.ndim not in (2, 3):
        raise ValueError(f"expected an H x W or H x W x C image, got shape {a.shape}")
    return a


def _resample(a: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Bilinear sampling at float source coordinates, edge-replicated."""
    out = np.empty(a.shape, dtype=np.uint8)
    planes = a[..., None] if a.ndim == 2 else a
    res = out[..., None] if a.ndim == 2 else out
    for c in range(planes.shape[2]):
        v = ndimage.map_coordinates(planes[..., c].astype(np.float64), [rows, cols], order=1, mode="nearest")
        res[..., c] = np.clip(np.rint(v), 0, 255).astype(np.uint8)
    return out


def brightness(a, amount):
    delta = int(round(amount * 255))
    return np.clip(a.astype(np.int16) + delta, 0, 255).astype(np.uint8)


def shift(a, fraction):
    """Translate right by ``fraction * width`` (left when negative)."""
    w = a.shape[1]
    offset = int(round(fraction * w))
    src = np.clip(np.arange(w) - offset, 0, w - 1)
    return a[:, src].copy()


def rotate(a, degrees):
    """Rotate counter-clockwise about the image center."""
    h, w = a.shape[:2]
    theta = math.radians(degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    # inverse map: output pixel -> source pixel
    src_x = cos * dx - sin * dy + cx
    src_y = sin * dx + cos * dy + cy
    return _resample(a, src_y, src_x)


def hflip(a):
    return a[:, ::-1].copy()


def zoom(a, factor):
    """Center-crop ``1/factor`` of each side and scale back up."""
    h, w = a.shape[:2]
    ch, cw = max(1, int(round(h / factor))), max(1, int(round(w / factor)))
    top, left = (h - ch) // 2, (w - cw) // 2
    # pixel-center aligned mapping of the crop onto the full frame
    rows = top + (np.arange(h) + 0.5) * (ch / h) - 0.5
    cols = left + (np.arange(w) + 0.5) * (cw / w) - 0.5
    yy, xx = np.meshgrid(rows, cols, indexing="ij")
    return _resample(a, yy, xx)


def perturb(image, spec: PerturbationSpec) -> np.ndarray:
    a = _as_uint8(image)
    if spec.kind == "brightness":
        return brightness(a, spec.magnitude)
    if spec.kind == "shift":
        return shift(a, spec.magnitude)
    if spec.kind == "rotation":
        return rotate(a, spec.magnitude)
    if spec.kind == "hflip":
        return hflip(a)
    return zoom(a, spec.magnitude)


def perturb_directory(src_dir, specs: Sequence[PerturbationSpec], out_dir) -> dict:
    """Write ``out_dir/<spec.name>/<relative path>`` for every image.

    Returns ``{spec name: number of images written}``.
    """
    src_dir, out_dir = Path(src_dir), Path(out_dir)
    files = sorted(p for p in src_dir.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ConfigError(f"perturbation names collide: {names}")
    counts = {}
    for spec in specs:
        for f in files:
            rel = f.relative_to(src_dir)
            with Image.open(f) as im:
                im.load()
                mode = im.mode if im.mode in ("L", "RGB", "RGBA") else "RGB"
                arr = np.asarray(im.convert(mode))
            dest = out_dir / spec.name / rel.with_suffix(".png")
            dest.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(perturb(arr, spec), mode).save(dest, format="PNG")
        counts[spec.name] = len(files)
    return counts
