"""
From compound figures to filtered subfigure-caption pairs
=========================================================

Decomposes two compound figures using detector output, filters by
metadata and score, and summarizes caption lengths.
"""

import numpy as np
from PIL import Image

from figforge.curation import CompoundRecord, corpus_stats, decompose, filter_metadata, filter_pairs_by_parent, filter_score
from figforge.formats import Detection, DetectionSet
from figforge.layout import BBox

rng = np.random.default_rng(0)
figure = Image.fromarray(rng.integers(0, 256, (120, 200, 3), dtype=np.uint8))

records = [
    CompoundRecord("pmc1_f2", "f2.png", "Axial CT (left) and MRI (right) of the same lesion.", ("Clinical Imaging",)),
    CompoundRecord("pmc7_f1", "f1.png", "Bar chart of cohort sizes.", ("Plot",)),
]
detections = {
    "pmc1_f2": DetectionSet("pmc1_f2", (
        Detection(BBox(2, 5, 95, 110), 0.93),
        Detection(BBox(4, 6, 92, 108), 0.71),    # duplicate, removed by NMS
        Detection(BBox(103, 5, 110, 110), 0.88),  # runs off the right edge, clipped
        Detection(BBox(60, 60, 20, 20), 0.20),   # below min_score
    )),
    "pmc7_f1": DetectionSet("pmc7_f1", ()),        # nothing found: whole figure kept
}

pairs = []
for rec in records:
    got, crops = decompose(rec, detections[rec.figure_id], image=figure)
    for p, c in zip(got, crops):
        print(f"{p.subfigure_id}: bbox {p.bbox.as_list()} crop {c.size} score {p.score}")
    pairs.extend(got)

# keep clinical imaging and microscopy parents, then apply a score cut
kept = filter_pairs_by_parent(pairs, filter_metadata(records))
result = filter_score(kept, threshold=0.5)
print("filter:", result.report())

stats = corpus_stats(result.kept)
print({k: stats[k] for k in ("n_pairs", "mean_tokens", "max_tokens", "frac_over_256", "subfigures_per_figure")})
