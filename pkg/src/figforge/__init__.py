"""Synthetic compound-figure generation, subfigure curation and the
evaluation metrics used to study biomedical vision-language data."""

from .compositor import (
    GenerationConfig,
    LabelStyle,
    MixPolicy,
    PanelPool,
    PoolEntry,
    compose_figure,
    generate_corpus,
    split_seed,
)
from .curation import CompoundRecord, SubfigurePair, corpus_stats, decompose, filter_metadata, filter_score
from .detection import EvalSettings, average_precision, evaluate_detections, iou, match_greedy
from .embed import (
    infonce_grad,
    infonce_loss,
    mmd_permutation_test,
    recall_at_k,
    robustness_ratio,
    wilcoxon_signed_rank,
    zero_shot_f1,
)
from .formats import DetectionSet, Detection, EmbeddingMatrix, FigureManifest, PanelRecord
from .layout import BBox, LayoutConfig, LayoutSpec, resolve_layout
from .perturb import PerturbationSpec, perturb_directory
from .perturb import perturb as perturb_image

__version__ = "0.1.0"
