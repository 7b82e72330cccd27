"""Structure-only pseudo-labels via label spreading on the union graph."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .graph import NUM_CLASSES, MultiRelationGraph


@dataclass(frozen=True)
class PseudoLabels:
    """Per-node class distribution ``dist`` (N x 2), ``hard`` argmax and ``reached`` flags.

    Ties in ``dist`` resolve to class 0 (benign).
    """

    dist: np.ndarray
    hard: np.ndarray
    reached: np.ndarray
    iterations: int = 0

    @property
    def num_nodes(self) -> int:
        return self.dist.shape[0]


def normalized_adjacency(adj: sp.spmatrix) -> sp.csr_matrix:
    """D^-1/2 A D^-1/2 with zero rows/columns for isolated nodes."""
    adj = sp.csr_matrix(adj, dtype=np.float64)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    d = sp.diags(inv_sqrt)
    return (d @ adj @ d).tocsr()


def spread(s_hat: sp.spmatrix, y0: np.ndarray, alpha: float, max_iters: int, tol: float):
    """Iterate F <- alpha * S F + (1 - alpha) * Y0 from F = Y0.

    Returns ``(F, iterations)``. Stops once the largest entrywise change drops
    below ``tol`` or after ``max_iters`` synchronous updates.
    """
    f = y0.copy()
    base = (1.0 - alpha) * y0
    it = 0
    for it in range(1, max_iters + 1):
        nxt = alpha * (s_hat @ f) + base
        change = np.abs(nxt - f).max(initial=0.0)
        f = nxt
        if change < tol:
            break
    return f, it


def argmax_benign_ties(dist: np.ndarray) -> np.ndarray:
    return (dist[:, 1] > dist[:, 0]).astype(np.int64)


def propagate_labels(
    graph: MultiRelationGraph,
    train_mask,
    alpha: float = 0.9,
    max_iters: int = 200,
    tol: float = 1e-6,
) -> PseudoLabels:
    """Label spreading over the union of all relations, ignoring node features.

    ``train_mask`` is a boolean mask or an array of node ids whose labels are
    observed. Training rows are clamped to their one-hot label afterwards;
    nodes that received no mass fall back to the empirical train class
    frequencies with ``reached=False``.
    """
    n = graph.num_nodes
    train_ids = _as_ids(train_mask, n)
    if train_ids.size == 0:
        raise ValueError("train_mask is empty")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    y_train = graph.labels[train_ids]
    if (y_train < 0).any():
        raise ValueError("train_mask contains unlabeled nodes")
    if not (np.isin(0, y_train) and np.isin(1, y_train)):
        raise ValueError("train_mask must contain both classes")

    y0 = np.zeros((n, NUM_CLASSES))
    y0[train_ids, y_train] = 1.0
    s_hat = normalized_adjacency(graph.union_adjacency())
    f, iters = spread(s_hat, y0, alpha, max_iters, tol)

    f[train_ids] = y0[train_ids]
    mass = f.sum(axis=1)
    reached = mass > 0
    dist = np.empty_like(f)
    dist[reached] = f[reached] / mass[reached, None]
    prior = np.bincount(y_train, minlength=NUM_CLASSES) / y_train.size
    dist[~reached] = prior
    return PseudoLabels(dist=dist, hard=argmax_benign_ties(dist), reached=reached, iterations=iters)


def _as_ids(mask, n: int) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.dtype == bool:
        if mask.shape != (n,):
            raise ValueError(f"boolean mask must have shape ({n},)")
        return np.flatnonzero(mask)
    return np.unique(mask.astype(np.int64))


def write_pseudo_csv(pseudo: PseudoLabels, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "p0", "p1", "hard", "reached"])
        for v in range(pseudo.num_nodes):
            w.writerow([v, repr(float(pseudo.dist[v, 0])), repr(float(pseudo.dist[v, 1])),
                        int(pseudo.hard[v]), int(bool(pseudo.reached[v]))])
    return path


def read_pseudo_csv(path) -> PseudoLabels:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    n = len(rows)
    dist = np.zeros((n, NUM_CLASSES))
    hard = np.zeros(n, dtype=np.int64)
    reached = np.zeros(n, dtype=bool)
    for row in rows:
        v = int(row["id"])
        dist[v] = float(row["p0"]), float(row["p1"])
        hard[v] = int(row["hard"])
        reached[v] = bool(int(row["reached"]))
    return PseudoLabels(dist=dist, hard=hard, reached=reached)
