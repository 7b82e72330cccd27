"""Independent brute-force reference implementations used by several test modules."""

import itertools

import numpy as np

from scfcrc.graph import UNKNOWN


def brute_force_groups(graph, v, r, k, x, xf, labels, hard):
    """Enumerate every k-step walk from v explicitly and average by group."""
    nbrs = {u: list(graph.neighbors(u, r)) for u in range(graph.num_nodes)}
    ends = []
    for walk in itertools.product(*([range(graph.num_nodes)] * k)):
        prev, ok = v, True
        for u in walk:
            if u not in nbrs[prev]:
                ok = False
                break
            prev = u
        if ok and walk[-1] != v:
            ends.append(walk[-1])
    groups = [
        [x[u] for u in ends if labels[u] == 0],
        [x[u] for u in ends if labels[u] == 1],
        [xf[u] for u in ends if hard[u] == 0],
        [xf[u] for u in ends if hard[u] == 1],
        [x[u] for u in ends if labels[u] == UNKNOWN],
    ]
    d = x.shape[1]
    return np.array([np.mean(g, axis=0) if g else np.zeros(d) for g in groups])


def auc_pairs(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


def ap_thresholds(scores, labels):
    n_pos = sum(labels)
    prev_recall, out = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        picked = [y for s, y in zip(scores, labels) if s >= t]
        tp = sum(picked)
        recall = tp / n_pos
        out += (recall - prev_recall) * tp / len(picked)
        prev_recall = recall
    return out


def f1_confusion(pred, labels):
    vals = []
    for c in (0, 1):
        tp = sum(1 for p, y in zip(pred, labels) if p == c and y == c)
        fp = sum(1 for p, y in zip(pred, labels) if p == c and y != c)
        fn = sum(1 for p, y in zip(pred, labels) if p != c and y == c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        vals.append(0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec))
    return sum(vals) / 2
