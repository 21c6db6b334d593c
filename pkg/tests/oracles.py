"""Brute-force reference computations, written independently of figforge."""

import itertools
from fractions import Fraction

import numpy as np


def iou_exact(a, b):
    ax, ay, aw, ah = (Fraction(v) for v in a)
    bx, by, bw, bh = (Fraction(v) for v in b)
    iw = max(Fraction(0), min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(Fraction(0), min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def greedy_flags(dets, gts, thr):
    """dets: [(box, score)], gts: [box]. Returns is-TP flag per det index."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], i))
    used = set()
    flags = [False] * len(dets)
    for i in order:
        cands = []
        for g in range(len(gts)):
            if g in used:
                continue
            v = float(iou_exact(dets[i][0], gts[g]))
            if v >= thr:
                cands.append((-v, g))
        if cands:
            g = min(cands)[1]
            used.add(g)
            flags[i] = True
    return flags


def brute_ap(images, thr):
    """images: [(dets, gts)] in input order. 101-point AP via exact fractions."""
    ranked = []
    pos = 0
    n_gt = 0
    for dets, gts in images:
        n_gt += len(gts)
        for i, f in enumerate(greedy_flags(dets, gts, thr)):
            ranked.append((-dets[i][1], pos + i, f))
        pos += len(dets)
    ranked.sort()
    curve = []
    tp = 0
    for cut, r in enumerate(ranked, start=1):
        tp += r[2]
        curve.append((Fraction(tp, n_gt), Fraction(tp, cut)))
    total = Fraction(0)
    for k in range(101):
        r = Fraction(k, 100)
        ps = [p for rec, p in curve if rec >= r]
        total += max(ps) if ps else 0
    return total / 101


def brute_counts(images, thr):
    tp = fp = fn = 0
    for dets, gts in images:
        hits = sum(greedy_flags(dets, gts, thr))
        tp += hits
        fp += len(dets) - hits
        fn += len(gts) - hits
    return tp, fp, fn


def midranks(values):
    values = list(values)
    out = []
    for v in values:
        less = sum(1 for u in values if u < v)
        equal = sum(1 for u in values if u == v)
        out.append(Fraction(2 * less + equal + 1, 2))
    return out


def wilcoxon_enumerate(a, b):
    """(W, exact two-sided p) by listing every sign pattern."""
    d = [x - y for x, y in zip(a, b) if x - y != 0]
    n = len(d)
    ranks = midranks([abs(v) for v in d])
    w_plus = sum(r for r, v in zip(ranks, d) if v > 0)
    w_obs = min(w_plus, sum(ranks) - w_plus)
    twice = np.array([int(2 * r) for r in ranks])
    total = int(twice.sum())
    signs = np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.int64)
    wp = signs @ twice
    extreme = np.minimum(wp, total - wp) <= int(2 * w_obs)
    return float(w_obs), int(extreme.sum()) / 2**n


def central_difference(f, arrays, h=1e-5):
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + h
            up = f()
            a[idx] = orig - h
            down = f()
            a[idx] = orig
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads
