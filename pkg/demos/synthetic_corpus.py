"""
Rendering a synthetic compound-figure corpus
============================================

Builds a small panel pool of procedurally drawn images, renders compound
figures from two layout templates, and exports the ground truth as COCO.
"""

import json
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from figforge.compositor import GenerationConfig, MixPolicy, PanelPool, PoolEntry, generate_corpus, write_pool
from figforge.formats import MODALITIES, export_coco
from figforge.layout import LayoutConfig

work = Path(tempfile.mkdtemp(prefix="figforge_demo_"))
rng = np.random.default_rng(0)

# a handful of textured panels per modality
(work / "pool").mkdir()
entries = []
for m, modality in enumerate(MODALITIES):
    for k in range(4):
        h, w = rng.integers(60, 140, size=2)
        yy, xx = np.mgrid[0:h, 0:w]
        base = (np.sin(xx / (3 + k)) + np.cos(yy / (2 + m))) * 60 + 128
        rgb = np.stack([base, base[::-1], np.full_like(base, 40 * m)], axis=-1)
        rel = f"{modality}_{k}.png"
        Image.fromarray(np.clip(rgb, 0, 255).astype(np.uint8)).save(work / "pool" / rel)
        entries.append(PoolEntry(f"{modality}-{k}", rel, modality))
pool = PanelPool(entries, root=work / "pool")
write_pool(work / "pool" / "pool.jsonl", pool)

# two templates: a 2x2 grid and an uneven 3-over-1 arrangement with labels above
layouts = (
    LayoutConfig(2, 2, h_margin_range=(4, 12), v_margin_range=(4, 12), label_scheme="upper_alpha"),
    LayoutConfig(custom_rows=(3, 1), h_margin_range=(6, 6), v_margin_range=(6, 6),
                 label_scheme="lower_alpha", label_position="outside_above"),
)
config = GenerationConfig(layouts=layouts, mix=MixPolicy.uniform())
manifests = generate_corpus(pool, config, count=12, master_seed=7, out_dir=work / "corpus")

first = manifests[0]
print(f"{len(manifests)} figures in {work / 'corpus'}")
print(f"{first.figure_id}: {first.width}x{first.height}, labels {[p.label_text for p in first.panels]}")
for p in first.panels:
    print(f"  {p.label_text or '-'} {p.bbox.as_list()} from {p.source_id}")

# the manifest converts directly to COCO detection annotations
coco = export_coco(manifests)
print(json.dumps(coco["annotations"][0]))
print(f"{len(coco['images'])} images, {len(coco['annotations'])} subfigure boxes")
