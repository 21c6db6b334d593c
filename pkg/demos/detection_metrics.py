"""
Scoring subfigure detections
============================

IoU, greedy matching, COCO-style mAP and micro F1 on a toy set of two
figures.
"""

from figforge.detection import EvalSettings, evaluate_detections, iou, match_greedy
from figforge.formats import Detection, DetectionSet
from figforge.layout import BBox

# two overlapping 10x10 squares share a third of their union
print("IoU:", iou(BBox(0, 0, 10, 10), BBox(5, 0, 10, 10)))

truth = {
    "fig_a": [BBox(0, 0, 50, 50), BBox(60, 0, 50, 50)],
    "fig_b": [BBox(10, 10, 80, 40)],
}
detections = [
    DetectionSet("fig_a", (
        Detection(BBox(2, 1, 48, 50), 0.95),   # good hit
        Detection(BBox(70, 5, 50, 50), 0.80),  # loose hit
        Detection(BBox(0, 60, 30, 30), 0.40),  # spurious
    )),
    DetectionSet("fig_b", (Detection(BBox(12, 8, 78, 44), 0.90),)),
]

# matching is greedy by score; the loose box only counts at low IoU thresholds
print("matches @0.5:", match_greedy(detections[0], truth["fig_a"], 0.5))
print("matches @0.75:", match_greedy(detections[0], truth["fig_a"], 0.75))

report = evaluate_detections(detections, truth)
print(f"mAP@[.50:.95] = {report.map:.4f}  AP50 = {report.ap50:.4f}")
print(f"F1 = {report.f1:.4f} (tp={report.tp}, fp={report.fp}, fn={report.fn})")
for thr, ap in report.ap_per_threshold.items():
    print(f"  AP@{thr} = {ap:.4f}")

# dropping low-confidence boxes changes F1 but not AP
strict = evaluate_detections(detections, truth, EvalSettings(score_threshold=0.5))
print(f"F1 with score >= 0.5: {strict.f1:.4f}")
