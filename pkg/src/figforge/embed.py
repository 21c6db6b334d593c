"""Embedding-space evaluation: contrastive loss, retrieval, zero-shot
classification, robustness ratios, and the two statistical tests.

Everything is computed in float64 regardless of the storage dtype, and
similarity is cosine similarity throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import stats
from scipy.spatial.distance import cdist, pdist
from scipy.special import logsumexp

from .formats import EmbeddingMatrix

EXACT_WILCOXON_MAX_N = 25


@dataclass
class StatTestResult:
    statistic: float
    p_value: float
    method: str
    n_effective: int
    details: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "statistic": self.statistic,
            "p_value": self.p_value,
            "method": self.method,
            "n_effective": self.n_effective,
            "details": dict(self.details),
        }


def _matrix(x, name="embeddings") -> np.ndarray:
    if isinstance(x, EmbeddingMatrix):
        x = x.data
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains NaN or infinite values")
    return a


def _unit_rows(a: np.ndarray, name="embeddings"):
    norms = np.linalg.norm(a, axis=1)
    if np.any(norms == 0):
        raise ValueError(f"{name} has zero rows; cosine similarity is undefined")
    return a / norms[:, None], norms


def cosine_similarity(a, b) -> np.ndarray:
    an, _ = _unit_rows(_matrix(a, "a"), "a")
    bn, _ = _unit_rows(_matrix(b, "b"), "b")
    return an @ bn.T


# ---------------------------------------------------------------- InfoNCE


def _check_batch(image_embeds, text_embeds, tau):
    x = _matrix(image_embeds, "image_embeds")
    t = _matrix(text_embeds, "text_embeds")
    if x.shape != t.shape:
        raise ValueError(f"image and text batches differ in shape: {x.shape} vs {t.shape}")
    if x.shape[0] < 1:
        raise ValueError("an empty batch has no loss")
    if not (isinstance(tau, (int, float)) and math.isfinite(tau) and tau > 0):
        raise ValueError(f"temperature must be a finite positive number, got {tau!r}")
    return x, t


def infonce_loss(image_embeds, text_embeds, tau: float = 1.0) -> float:
    """Symmetric InfoNCE averaged over the batch.

    Per pair: ``-log softmax_row(S)[i, i] - log softmax_col(S)[i, i]`` with
    ``S = cos(x, t) / tau``; the image-to-text term normalizes over texts,
    the text-to-image term over images.
    """
    x, t = _check_batch(image_embeds, text_embeds, tau)
    xn, _ = _unit_rows(x, "image_embeds")
    tn, _ = _unit_rows(t, "text_embeds")
    s = (xn @ tn.T) / tau
    diag = np.diag(s)
    # logsumexp subtracts the max internally
    i2t = logsumexp(s, axis=1) - diag
    t2i = logsumexp(s, axis=0) - diag
    return float(np.mean(i2t + t2i))


def infonce_grad(image_embeds, text_embeds, tau: float = 1.0):
    """Analytic gradient of :func:`infonce_loss`.

    Returns ``(d_loss/d_image_embeds, d_loss/d_text_embeds)`` with respect to
    the raw (unnormalized) rows.
    """
    x, t = _check_batch(image_embeds, text_embeds, tau)
    n = x.shape[0]
    xn, xnorm = _unit_rows(x, "image_embeds")
    tn, tnorm = _unit_rows(t, "text_embeds")
    s = (xn @ tn.T) / tau
    p_row = np.exp(s - logsumexp(s, axis=1, keepdims=True))
    p_col = np.exp(s - logsumexp(s, axis=0, keepdims=True))
    # d loss / d cos
    g = (p_row + p_col - 2.0 * np.eye(n)) / (n * tau)
    g_xn = g @ tn
    g_tn = g.T @ xn
    # back through row normalization: (I - u u^T) g / |v|
    g_x = (g_xn - xn * np.sum(xn * g_xn, axis=1, keepdims=True)) / xnorm[:, None]
    g_t = (g_tn - tn * np.sum(tn * g_tn, axis=1, keepdims=True)) / tnorm[:, None]
    return g_x, g_t


# ---------------------------------------------------------------- retrieval


def correct_ranks(similarity: np.ndarray) -> np.ndarray:
    """1-based rank of the diagonal entry in each row.

    Ties are broken toward the lower column index, so a competitor with the
    same similarity outranks the correct target only if it comes first.
    """
    s = np.asarray(similarity, dtype=np.float64)
    diag = np.diag(s)[:, None]
    cols = np.arange(s.shape[1])[None, :]
    rows = np.arange(s.shape[0])[:, None]
    better = (s > diag) | ((s == diag) & (cols < rows))
    return 1 + better.sum(axis=1)


def recall_from_similarity(similarity, k: int) -> float:
    s = np.asarray(similarity, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"similarity must be square, got shape {s.shape}")
    n = s.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    return float(np.mean(correct_ranks(s) <= k))


def recall_at_k(query, target, k: int, chunk: int = 2048) -> float:
    """Fraction of queries whose own target (same row) ranks within top ``k``."""
    q = _matrix(query, "query")
    t = _matrix(target, "target")
    if q.shape[0] != t.shape[0]:
        raise ValueError(f"query and target counts differ: {q.shape[0]} vs {t.shape[0]}")
    n = q.shape[0]
    if n == 0:
        raise ValueError("recall is undefined for empty inputs")
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    qn, _ = _unit_rows(q, "query")
    tn, _ = _unit_rows(t, "target")
    hits = 0
    cols = np.arange(n)[None, :]
    for start in range(0, n, chunk):
        s = qn[start:start + chunk] @ tn.T
        rows = np.arange(start, start + s.shape[0])
        diag = s[np.arange(s.shape[0]), rows][:, None]
        better = (s > diag) | ((s == diag) & (cols < rows[:, None]))
        hits += int(np.sum(1 + better.sum(axis=1) <= k))
    return hits / n


def retrieval_report(image_embeds, text_embeds, ks: Sequence[int] = (10, 50, 200)) -> dict:
    """Image-to-text and text-to-image Recall@k."""
    out = {"n": int(_matrix(image_embeds).shape[0]), "image_to_text": {}, "text_to_image": {}}
    for k in ks:
        out["image_to_text"][str(k)] = recall_at_k(image_embeds, text_embeds, k)
        out["text_to_image"][str(k)] = recall_at_k(text_embeds, image_embeds, k)
    return out


# ---------------------------------------------------------------- zero-shot


def zero_shot_predict(image_embeds, class_embeds) -> np.ndarray:
    # argmax returns the first maximum, i.e. the lower class index on ties
    return np.argmax(cosine_similarity(image_embeds, class_embeds), axis=1)


def macro_f1(labels, predictions, n_classes: int) -> float:
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    scores = []
    for c in range(n_classes):
        tp = int(np.sum((predictions == c) & (labels == c)))
        fp = int(np.sum((predictions == c) & (labels != c)))
        fn = int(np.sum((predictions != c) & (labels == c)))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def zero_shot_f1(image_embeds, class_embeds, labels) -> float:
    """Macro-F1 of nearest-class-embedding predictions."""
    x = _matrix(image_embeds, "image_embeds")
    c = _matrix(class_embeds, "class_embeds")
    labels = np.asarray(labels)
    if x.shape[0] == 0:
        raise ValueError("zero-shot F1 is undefined for an empty image set")
    if labels.shape != (x.shape[0],):
        raise ValueError(f"expected {x.shape[0]} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("labels must be integer class indices")
    if labels.min() < 0 or labels.max() >= c.shape[0]:
        raise ValueError(f"label indices must lie in [0, {c.shape[0]})")
    if x.shape[1] != c.shape[1]:
        raise ValueError("image and class embeddings differ in dimension")
    return macro_f1(labels, zero_shot_predict(x, c), c.shape[0])


# ---------------------------------------------------------------- robustness


def robustness_ratio(clean_metric: float, perturbed_metrics: Mapping[str, float]):
    """Per-perturbation ``perturbed / clean`` and their mean."""
    if not (math.isfinite(clean_metric) and clean_metric > 0):
        raise ValueError(f"clean metric must be > 0, got {clean_metric!r}")
    if not perturbed_metrics:
        raise ValueError("no perturbed metrics given")
    ratios = {k: v / clean_metric for k, v in perturbed_metrics.items()}
    return ratios, math.fsum(ratios.values()) / len(ratios)


# ---------------------------------------------------------------- Wilcoxon


def _signed_ranks(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    d = a - b
    if not np.all(np.isfinite(d)):
        raise ValueError("paired samples contain non-finite values")
    d = d[d != 0]
    if d.size == 0:
        raise ValueError("all paired differences are zero")
    ranks = stats.rankdata(np.abs(d))  # midranks for ties
    return d, ranks


def exact_null_counts(doubled_ranks: Sequence[int]) -> np.ndarray:
    """Number of sign patterns giving each value of 2*W+.

    Ranks are doubled so midranks become integers.
    """
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled_ranks:
        if r <= 0:
            raise ValueError("ranks must be positive")
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(paired_a, paired_b) -> StatTestResult:
    """Two-sided Wilcoxon signed-rank test; zero differences are dropped.

    The statistic is ``min(W+, W-)``.  For up to 25 nonzero differences the
    p-value is exact (all ``2**n`` sign patterns, midranks included);
    otherwise a normal approximation with tie and continuity corrections.
    """
    d, ranks = _signed_ranks(paired_a, paired_b)
    n = d.size
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if n <= EXACT_WILCOXON_MAX_N:
        doubled = [int(round(2 * r)) for r in ranks]
        counts = exact_null_counts(doubled)
        tail = int(counts[: int(round(2 * w)) + 1].sum())
        p = min(1.0, 2 * tail / 2**n)
        method = "exact"
    else:
        mean = n * (n + 1) / 4
        _, tie_sizes = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24 - float(np.sum(tie_sizes**3 - tie_sizes)) / 48
        z = (w - mean + 0.5) / math.sqrt(var)
        p = min(1.0, 2 * stats.norm.cdf(z))
        method = "normal"
    return StatTestResult(w, p, method, n, {"w_plus": w_plus, "w_minus": w_minus})


# ---------------------------------------------------------------- MMD


def median_heuristic(pooled: np.ndarray) -> float:
    """Median pairwise Euclidean distance; 1.0 if that median is zero."""
    if pooled.shape[0] < 2:
        return 1.0
    med = float(np.median(pdist(pooled)))
    return med if med > 0 else 1.0


def _mmd2_from_kernel(k: np.ndarray, ix: np.ndarray, iy: np.ndarray) -> float:
    kxx = k[np.ix_(ix, ix)].mean()
    kyy = k[np.ix_(iy, iy)].mean()
    kxy = k[np.ix_(ix, iy)].mean()
    return max(0.0, float(kxx + kyy - 2.0 * kxy))


def rbf_kernel(a: np.ndarray, b: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-cdist(a, b, "sqeuclidean") / (2.0 * sigma * sigma))


def mmd2(x, y, kernel_sigma: Optional[float] = None) -> float:
    """Biased (V-statistic) squared MMD with an RBF kernel."""
    x = _matrix(x, "x")
    y = _matrix(y, "y")
    if x.shape[1] != y.shape[1]:
        raise ValueError("x and y differ in dimension")
    pooled = np.vstack([x, y])
    sigma = kernel_sigma if kernel_sigma is not None else median_heuristic(pooled)
    k = rbf_kernel(pooled, pooled, sigma)
    n = x.shape[0]
    return _mmd2_from_kernel(k, np.arange(n), np.arange(n, pooled.shape[0]))


def mmd_permutation_test(
    x, y, permutations: int = 100, kernel_sigma: Optional[float] = None, seed: int = 0
) -> StatTestResult:
    """MMD two-sample test against a permutation null.

    ``p = (1 + #{null >= observed}) / (1 + permutations)``.  Permutation
    ``j`` shuffles the pooled rows with its own generator spawned from
    ``seed``, so results do not depend on evaluation order.
    """
    x = _matrix(x, "x")
    y = _matrix(y, "y")
    n, m = x.shape[0], y.shape[0]
    if n < 2 or m < 2:
        raise ValueError(f"each sample needs at least 2 rows, got {n} and {m}")
    if x.shape[1] != y.shape[1]:
        raise ValueError("x and y differ in dimension")
    if permutations < 1:
        raise ValueError("permutations must be >= 1")
    if kernel_sigma is not None and not (math.isfinite(kernel_sigma) and kernel_sigma > 0):
        raise ValueError("kernel_sigma must be a positive number")
    pooled = np.vstack([x, y])
    sigma = kernel_sigma if kernel_sigma is not None else median_heuristic(pooled)
    k = rbf_kernel(pooled, pooled, sigma)
    observed = _mmd2_from_kernel(k, np.arange(n), np.arange(n, n + m))

    null = np.empty(permutations)
    for j, child in enumerate(np.random.SeedSequence(seed).spawn(permutations)):
        perm = np.random.default_rng(child).permutation(n + m)
        null[j] = _mmd2_from_kernel(k, perm[:n], perm[n:])
    p = (1 + int(np.sum(null >= observed))) / (1 + permutations)
    return StatTestResult(
        observed,
        p,
        "mmd2_rbf_permutation",
        n + m,
        {"sigma": sigma, "permutations": permutations, "null_min": float(null.min()), "null_max": float(null.max()), "seed": seed},
    )
