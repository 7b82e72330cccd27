"""Label-guided group aggregation: per relation and hop, neighbours are split
into label groups and averaged, producing a fixed-length token sequence per
node.

Per relation the block is ``[h_v, h'_v]`` followed, for each hop k, by
``[h-, h+, h'-, h'+, h*]``; blocks are concatenated over relations, giving
``S = R * ((2C + 1) * K + 2)`` tokens of width d.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .graph import NUM_CLASSES, UNKNOWN, MultiRelationGraph
from .label_prop import PseudoLabels

MAX_HOPS = 4
CACHE_MAGIC = b"SCFCRCSQ"
CACHE_VERSION = 1

FLAG_NODE_IDS = 1
FLAG_SHELLS = 2
FLAG_NO_HYGIENE = 4


class Group(IntEnum):
    TGT_RAW = 0
    TGT_FILT = 1
    NEG = 2
    POS = 3
    PSEUDO_NEG = 4
    PSEUDO_POS = 5
    MASKED = 6


HOP_GROUPS = (Group.NEG, Group.POS, Group.PSEUDO_NEG, Group.PSEUDO_POS, Group.MASKED)
NUM_GROUPS = len(Group)


def block_length(hops: int, num_classes: int = NUM_CLASSES) -> int:
    return (2 * num_classes + 1) * hops + 2


def sequence_length(num_relations: int, hops: int, num_classes: int = NUM_CLASSES) -> int:
    return num_relations * block_length(hops, num_classes)


def token_meta(num_relations: int, hops: int) -> np.ndarray:
    """(S, 3) array of (relation id, hop id, group id) in sequence order."""
    rows = []
    for r in range(num_relations):
        rows.append((r, 0, Group.TGT_RAW))
        rows.append((r, 0, Group.TGT_FILT))
        for k in range(1, hops + 1):
            rows.extend((r, k, g) for g in HOP_GROUPS)
    return np.asarray(rows, dtype=np.uint8)


def target_positions(num_relations: int, hops: int) -> tuple[np.ndarray, np.ndarray]:
    """Sequence indices of the raw and filtered target tokens of every relation block."""
    starts = np.arange(num_relations) * block_length(hops)
    return starts, starts + 1


@dataclass(frozen=True)
class TokenSequence:
    tokens: np.ndarray  # (S, d) float32
    meta: np.ndarray  # (S, 3) uint8

    @property
    def length(self) -> int:
        return self.tokens.shape[0]


def observed_labels(graph: MultiRelationGraph, observed_ids) -> np.ndarray:
    """Label vector with every node outside ``observed_ids`` set to UNKNOWN.

    Building sequences from train ids only keeps validation and test labels
    out of every neighbourhood.
    """
    out = np.full(graph.num_nodes, UNKNOWN, dtype=np.int64)
    ids = np.asarray(observed_ids)
    if ids.dtype == bool:
        ids = np.flatnonzero(ids)
    out[ids] = graph.labels[ids]
    return out


def _check_inputs(graph, x, xf, labels, pseudo):
    n, d = graph.num_nodes, graph.feature_dim
    x = np.asarray(x, dtype=np.float64)
    xf = np.asarray(xf, dtype=np.float64)
    if x.shape != (n, d) or xf.shape != (n, d):
        raise ValueError(f"raw and filtered features must both be ({n}, {d})")
    labels = np.asarray(labels, dtype=np.int64)
    hard = pseudo.hard if isinstance(pseudo, PseudoLabels) else np.asarray(pseudo, dtype=np.int64)
    if labels.shape != (n,) or hard.shape != (n,):
        raise ValueError("label vectors must have one entry per node")
    return x, xf, labels, hard


def _group_masks(labels, hard):
    return (
        (labels == 0, False),
        (labels == 1, False),
        (hard == 0, True),
        (hard == 1, True),
        (labels == UNKNOWN, False),
    )


def hop_walk_counts(graph: MultiRelationGraph, v: int, r: int, k: int) -> np.ndarray:
    """Number of k-step walks from ``v`` ending at each node, with ``v`` itself zeroed."""
    vec = np.zeros(graph.num_nodes)
    vec[v] = 1.0
    a = graph.adjacency[r]
    for _ in range(k):
        vec = a.T @ vec
    vec[v] = 0.0
    return vec


def hop_shell(graph: MultiRelationGraph, v: int, r: int, k: int) -> np.ndarray:
    """Indicator of nodes at shortest-path distance exactly ``k`` from ``v``."""
    a = graph.adjacency[r]
    seen = np.zeros(graph.num_nodes, dtype=bool)
    seen[v] = True
    frontier = seen.copy()
    for _ in range(k):
        nxt = (a.T @ frontier.astype(np.float64)) > 0
        frontier = nxt & ~seen
        seen |= frontier
    return frontier.astype(np.float64)


def group_aggregate_hop(graph, v, r, k, x, xf, train_labels, pseudo, shells: bool = False) -> np.ndarray:
    """The five hop-k group means ``[h-, h+, h'-, h'+, h*]`` of node ``v`` under relation ``r``.

    Returns a (5, d) float64 array; empty groups are zero rows.
    """
    if k < 1:
        raise ValueError("hop must be >= 1")
    x, xf, labels, hard = _check_inputs(graph, x, xf, train_labels, pseudo)
    weights = hop_shell(graph, v, r, k) if shells else hop_walk_counts(graph, v, r, k)
    out = np.zeros((len(HOP_GROUPS), graph.feature_dim))
    for g, (mask, filtered) in enumerate(_group_masks(labels, hard)):
        w = weights * mask
        total = w.sum()
        if total > 0:
            out[g] = (w @ (xf if filtered else x)) / total
    return out


def build_sequence(graph, v, x, xf, train_labels, pseudo, hops: int, shells: bool = False) -> TokenSequence:
    if hops < 1:
        raise ValueError("hops must be >= 1")
    x, xf, labels, hard = _check_inputs(graph, x, xf, train_labels, pseudo)
    rows = []
    for r in range(graph.num_relations):
        rows.append(x[v])
        rows.append(xf[v])
        for k in range(1, hops + 1):
            rows.extend(group_aggregate_hop(graph, v, r, k, x, xf, labels, hard, shells))
    return TokenSequence(np.asarray(rows, dtype=np.float32), token_meta(graph.num_relations, hops))


# ------------------------------------------------------------- batched version

def _walk_diagonal(a: sp.csr_matrix, k: int) -> np.ndarray:
    """diag(A^k) for symmetric loop-free A."""
    if k == 1:
        return np.zeros(a.shape[0])
    if k == 2:
        return np.asarray(a.sum(axis=1)).ravel()
    lo = k // 2
    left = a
    for _ in range(lo - 1):
        left = left @ a
    right = left if k - lo == lo else left @ a
    return np.asarray(left.multiply(right).sum(axis=1)).ravel()


def _shell_operators(a: sp.csr_matrix, hops: int) -> list[sp.csr_matrix]:
    n = a.shape[0]
    within = sp.identity(n, format="csr", dtype=np.float64)
    shells = []
    for _ in range(hops):
        nxt = (within @ a + within).tocsr()
        nxt.data[:] = 1.0
        shell = (nxt - within).tocsr()
        shell.eliminate_zeros()
        shells.append(shell)
        within = nxt
    return shells


def _relation_blocks(a, x, xf, labels, hard, hops, shells):
    """(N, 5K, d) group means for one relation."""
    n, d = x.shape
    masks = _group_masks(labels, hard)
    # columns: [mask_g * feat_g | mask_g] for every group
    stacked = np.concatenate(
        [np.concatenate([m[:, None] * (xf if f else x), m[:, None].astype(np.float64)], axis=1) for m, f in masks],
        axis=1,
    )
    out = np.zeros((n, hops * len(masks), d))
    ops = _shell_operators(a, hops) if shells else None
    walked = stacked
    for k in range(1, hops + 1):
        if shells:
            agg = ops[k - 1] @ stacked
        else:
            walked = a @ walked
            agg = walked - _walk_diagonal(a, k)[:, None] * stacked
        for g in range(len(masks)):
            block = agg[:, g * (d + 1):(g + 1) * (d + 1)]
            sums, counts = block[:, :d], block[:, d]
            nz = counts > 0.5
            means = np.zeros((n, d))
            means[nz] = sums[nz] / counts[nz, None]
            out[:, (k - 1) * len(masks) + g] = means
    return out


@dataclass
class SequenceCache:
    node_ids: np.ndarray  # (M,) int64
    tokens: np.ndarray  # (M, S, d) float32
    meta: np.ndarray  # (M, S, 3) uint8
    flags: int = 0

    def __post_init__(self):
        self._index = {int(v): i for i, v in enumerate(self.node_ids)}

    def __len__(self) -> int:
        return self.node_ids.shape[0]

    def __contains__(self, v) -> bool:
        return int(v) in self._index

    def __getitem__(self, v) -> TokenSequence:
        i = self._index[int(v)]
        return TokenSequence(self.tokens[i], self.meta[i])

    def rows(self, ids) -> np.ndarray:
        return np.fromiter((self._index[int(v)] for v in ids), dtype=np.int64)

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]


def precompute_sequences(graph, x, xf, train_labels, pseudo, hops: int, node_set=None,
                         shells: bool = False, workers: int = 1, hygiene: bool = True) -> SequenceCache:
    """Token sequences for ``node_set`` (all nodes by default).

    Relations are processed independently (optionally on ``workers`` threads);
    the result does not depend on the worker count.
    """
    if not 1 <= hops <= MAX_HOPS:
        raise ValueError(f"hops must lie in [1, {MAX_HOPS}]")
    x, xf, labels, hard = _check_inputs(graph, x, xf, train_labels, pseudo)
    ids = np.arange(graph.num_nodes) if node_set is None else np.asarray(node_set, dtype=np.int64)
    if ids.dtype == bool:
        ids = np.flatnonzero(ids)

    def one(r):
        return _relation_blocks(graph.adjacency[r], x, xf, labels, hard, hops, shells)[ids]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_rel = list(pool.map(one, range(graph.num_relations)))
    else:
        per_rel = [one(r) for r in range(graph.num_relations)]

    m, d = ids.size, graph.feature_dim
    blk = block_length(hops)
    tokens = np.empty((m, graph.num_relations * blk, d), dtype=np.float32)
    for r, groups in enumerate(per_rel):
        base = r * blk
        tokens[:, base] = x[ids]
        tokens[:, base + 1] = xf[ids]
        tokens[:, base + 2:base + blk] = groups
    meta = np.broadcast_to(token_meta(graph.num_relations, hops), (m, tokens.shape[1], 3)).copy()
    flags = (FLAG_NODE_IDS if node_set is not None else 0) | (FLAG_SHELLS if shells else 0)
    flags |= 0 if hygiene else FLAG_NO_HYGIENE
    return SequenceCache(ids.copy(), tokens, meta, flags)


def write_cache(cache: SequenceCache, path) -> Path:
    """32-byte header, M x S x d float32 rows, M x S x 3 uint8 meta, optional M uint32 ids."""
    path = Path(path)
    m, s, d = cache.tokens.shape
    flags = cache.flags
    if not np.array_equal(cache.node_ids, np.arange(m)):
        flags |= FLAG_NODE_IDS
    header = CACHE_MAGIC + struct.pack("<IIIIII", CACHE_VERSION, m, s, d, flags, 0)
    body = [header, np.ascontiguousarray(cache.tokens, dtype="<f4").tobytes(),
            np.ascontiguousarray(cache.meta, dtype=np.uint8).tobytes()]
    if flags & FLAG_NODE_IDS:
        body.append(np.ascontiguousarray(cache.node_ids, dtype="<u4").tobytes())
    try:
        path.write_bytes(b"".join(body))
    except OSError as exc:
        raise OSError(f"cannot write sequence cache {path}: {exc}") from exc
    return path


def read_cache(path) -> SequenceCache:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read sequence cache {path}: {exc}") from exc
    if len(buf) < 32 or buf[:8] != CACHE_MAGIC:
        raise ValueError(f"{path}: not a sequence cache")
    version, m, s, d, flags, _ = struct.unpack_from("<IIIIII", buf, 8)
    if version != CACHE_VERSION:
        raise ValueError(f"{path}: unsupported cache version {version}")
    off = 32
    tokens = np.frombuffer(buf, dtype="<f4", count=m * s * d, offset=off).reshape(m, s, d).astype(np.float32)
    off += 4 * m * s * d
    meta = np.frombuffer(buf, dtype=np.uint8, count=m * s * 3, offset=off).reshape(m, s, 3).copy()
    off += m * s * 3
    if flags & FLAG_NODE_IDS:
        ids = np.frombuffer(buf, dtype="<u4", count=m, offset=off).astype(np.int64)
        off += 4 * m
    else:
        ids = np.arange(m, dtype=np.int64)
    if off != len(buf):
        raise ValueError(f"{path}: size mismatch ({len(buf) - off} trailing bytes)")
    return SequenceCache(ids, tokens, meta, flags)
