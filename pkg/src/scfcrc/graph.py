"""Multi-relation graph container, dataset I/O, stratified splits and a
synthetic camouflage-graph generator.

Dataset directory layout::

    meta.json       {"num_nodes", "num_relations", "feature_dim", "relation_names"}
    nodes.csv       id,label,f0,...,f{d-1}    (label in {0, 1, -1})
    rel_<k>.edges   "src dst" per line, '#' starts a comment
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

UNKNOWN = -1
NUM_CLASSES = 2


class GraphError(ValueError):
    """Base class for dataset and graph construction errors."""


class DatasetLoadError(GraphError):
    def __init__(self, path, message: str = "missing file"):
        self.path = Path(path)
        super().__init__(f"{message}: {self.path}")


class DatasetParseError(GraphError):
    pass


class StructuralError(GraphError):
    pass


class SplitError(GraphError):
    pass


def _build_adjacency(edges: np.ndarray, n: int) -> sp.csr_matrix:
    """Symmetric, deduplicated, loop-free binary CSR matrix from an (E, 2) array."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        bad = edges[(edges < 0).any(axis=1) | (edges >= n).any(axis=1)][0]
        raise StructuralError(f"edge endpoint out of range [0, {n}): {tuple(bad)}")
    edges = edges[edges[:, 0] != edges[:, 1]]
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    adj = sp.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n)).tocsr()
    adj.sum_duplicates()
    adj.data[:] = 1.0
    adj.sort_indices()
    return adj


@dataclass(frozen=True, eq=False)
class MultiRelationGraph:
    """Undirected multi-relation graph with node features and partial labels.

    ``adjacency[r]`` is a symmetric binary CSR matrix; row ``v`` lists the
    neighbours of ``v`` under relation ``r``.
    """

    features: np.ndarray
    labels: np.ndarray
    adjacency: tuple[sp.csr_matrix, ...]
    relation_names: tuple[str, ...] = ()

    def __post_init__(self):
        x = np.ascontiguousarray(self.features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise StructuralError(f"features must be a non-empty N x d matrix, got {x.shape}")
        if not np.isfinite(x).all():
            row = int(np.argwhere(~np.isfinite(x))[0, 0])
            raise DatasetParseError(f"non-finite feature in row {row}")
        n = x.shape[0]
        y = np.asarray(self.labels, dtype=np.int64)
        if y.shape != (n,):
            raise StructuralError(f"labels must have shape ({n},), got {y.shape}")
        if not np.isin(y, (0, 1, UNKNOWN)).all():
            raise StructuralError("labels must be 0, 1 or -1")
        if len(self.adjacency) < 1:
            raise StructuralError("a graph needs at least one relation")
        adj = []
        for a in self.adjacency:
            a = sp.csr_matrix(a)
            if a.shape != (n, n):
                raise StructuralError(f"adjacency shape {a.shape} does not match N={n}")
            adj.append(a)
        names = tuple(self.relation_names) or tuple(f"rel_{k}" for k in range(len(adj)))
        if len(names) != len(adj):
            raise StructuralError("relation_names length does not match number of relations")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "adjacency", tuple(adj))
        object.__setattr__(self, "relation_names", names)

    @classmethod
    def from_edges(cls, features, labels, edge_lists: Sequence, relation_names=()):
        """Build a graph from per-relation ``(E, 2)`` edge arrays (symmetrized, deduplicated)."""
        n = np.asarray(features).shape[0]
        adj = tuple(_build_adjacency(np.asarray(e).reshape(-1, 2), n) for e in edge_lists)
        return cls(features, labels, adj, tuple(relation_names))

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def num_relations(self) -> int:
        return len(self.adjacency)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def neighbors(self, v: int, r: int) -> np.ndarray:
        a = self.adjacency[r]
        return a.indices[a.indptr[v]:a.indptr[v + 1]]

    def degree(self, v: int, r: int) -> int:
        a = self.adjacency[r]
        return int(a.indptr[v + 1] - a.indptr[v])

    def edges(self, r: int) -> np.ndarray:
        """Undirected edge list of relation ``r`` as sorted ``(u, v)`` pairs with ``u < v``."""
        coo = sp.triu(self.adjacency[r], k=1).tocoo()
        out = np.stack([coo.row, coo.col], axis=1).astype(np.int64)
        return out[np.lexsort((out[:, 1], out[:, 0]))]

    def union_adjacency(self, relations: Sequence[int] | None = None) -> sp.csr_matrix:
        """Binary union of the selected relations (all by default)."""
        rels = range(self.num_relations) if relations is None else relations
        total = sp.csr_matrix((self.num_nodes, self.num_nodes))
        for r in rels:
            total = total + self.adjacency[r]
        total = total.tocsr()
        total.data[:] = 1.0
        total.eliminate_zeros()
        total.sort_indices()
        return total

    def labeled_mask(self) -> np.ndarray:
        return self.labels != UNKNOWN

    def permute(self, perm: np.ndarray) -> "MultiRelationGraph":
        """Relabel nodes so that new node ``i`` is old node ``perm[i]``."""
        perm = np.asarray(perm)
        adj = tuple(a[perm][:, perm].tocsr() for a in self.adjacency)
        return MultiRelationGraph(self.features[perm], self.labels[perm], adj, self.relation_names)


@dataclass(frozen=True)
class SplitMasks:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"train": self.train, "val": self.val, "test": self.test}

    def mask(self, name: str, num_nodes: int) -> np.ndarray:
        m = np.zeros(num_nodes, dtype=bool)
        m[getattr(self, name)] = True
        return m


# --------------------------------------------------------------------------- I/O

def _read_text(path: Path) -> str:
    if not path.is_file():
        raise DatasetLoadError(path)
    return path.read_text(encoding="utf-8")


def _parse_edges(path: Path) -> np.ndarray:
    pairs = []
    for lineno, line in enumerate(_read_text(path).splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DatasetParseError(f"{path}:{lineno}: expected two node ids, got {line!r}")
        try:
            pairs.append((int(parts[0]), int(parts[1])))
        except ValueError as exc:
            raise DatasetParseError(f"{path}:{lineno}: {exc}") from None
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def load_dataset(data_dir) -> MultiRelationGraph:
    data_dir = Path(data_dir)
    meta_path = data_dir / "meta.json"
    try:
        meta = json.loads(_read_text(meta_path))
    except json.JSONDecodeError as exc:
        raise DatasetParseError(f"{meta_path}: {exc}") from None
    for key in ("num_nodes", "num_relations", "feature_dim"):
        if key not in meta:
            raise DatasetParseError(f"{meta_path}: missing key {key!r}")
    n, n_rel, d = int(meta["num_nodes"]), int(meta["num_relations"]), int(meta["feature_dim"])
    names = tuple(meta.get("relation_names") or (f"rel_{k}" for k in range(n_rel)))

    nodes_path = data_dir / "nodes.csv"
    lines = [ln for ln in _read_text(nodes_path).splitlines() if ln.strip()]
    if not lines:
        raise DatasetParseError(f"{nodes_path}: empty file")
    header = [h.strip() for h in lines[0].split(",")]
    expected = ["id", "label"] + [f"f{j}" for j in range(d)]
    if header != expected:
        raise DatasetParseError(f"{nodes_path}: header {header[:4]}... does not match feature_dim={d}")
    if len(lines) - 1 != n:
        raise DatasetParseError(f"{nodes_path}: expected {n} rows, found {len(lines) - 1}")

    features = np.empty((n, d), dtype=np.float64)
    labels = np.full(n, UNKNOWN, dtype=np.int64)
    seen = np.zeros(n, dtype=bool)
    for row, line in enumerate(lines[1:]):
        parts = line.split(",")
        if len(parts) != d + 2:
            raise DatasetParseError(f"{nodes_path}: row {row} has {len(parts)} fields, expected {d + 2}")
        try:
            idx, lab = int(parts[0]), int(parts[1])
            vals = [float(p) for p in parts[2:]]
        except ValueError as exc:
            raise DatasetParseError(f"{nodes_path}: row {row}: {exc}") from None
        if not 0 <= idx < n:
            raise StructuralError(f"{nodes_path}: row {row}: node id {idx} out of range [0, {n})")
        if seen[idx]:
            raise DatasetParseError(f"{nodes_path}: row {row}: duplicate node id {idx}")
        if lab not in (0, 1, UNKNOWN):
            raise DatasetParseError(f"{nodes_path}: row {row}: label {lab} not in {{0, 1, -1}}")
        if not all(math.isfinite(v) for v in vals):
            raise DatasetParseError(f"{nodes_path}: non-finite feature in row {row}")
        seen[idx] = True
        features[idx] = vals
        labels[idx] = lab

    adj = []
    for k in range(n_rel):
        edge_path = data_dir / f"rel_{k}.edges"
        edges = _parse_edges(edge_path)
        try:
            adj.append(_build_adjacency(edges, n))
        except StructuralError as exc:
            raise StructuralError(f"{edge_path}: {exc}") from None
    return MultiRelationGraph(features, labels, tuple(adj), names)


def write_dataset(graph: MultiRelationGraph, data_dir) -> Path:
    """Write ``graph`` in the directory layout read by :func:`load_dataset`."""
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "num_nodes": graph.num_nodes,
        "num_relations": graph.num_relations,
        "feature_dim": graph.feature_dim,
        "relation_names": list(graph.relation_names),
    }
    (data_dir / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    header = ",".join(["id", "label"] + [f"f{j}" for j in range(graph.feature_dim)])
    rows = [header]
    for v in range(graph.num_nodes):
        # repr() round-trips float64 exactly
        vals = ",".join(repr(float(x)) for x in graph.features[v])
        rows.append(f"{v},{int(graph.labels[v])},{vals}")
    (data_dir / "nodes.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    for k in range(graph.num_relations):
        body = "".join(f"{u} {w}\n" for u, w in graph.edges(k))
        (data_dir / f"rel_{k}.edges").write_text(
            f"# relation {k}: {graph.relation_names[k]}\n" + body, encoding="utf-8"
        )
    return data_dir


# ------------------------------------------------------------------------ splits

def split_nodes(graph: MultiRelationGraph, ratios=(0.4, 0.1, 0.5), seed: int = 0) -> SplitMasks:
    """Stratified train/val/test split of the labeled nodes."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise SplitError(f"ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"ratios must sum to 1, got {sum(ratios)}")
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[], [], []]
    for c in range(NUM_CLASSES):
        ids = np.flatnonzero(graph.labels == c)
        if ids.size < 3:
            raise SplitError(f"class {c} has {ids.size} labeled nodes; need at least 3 for 3 splits")
        ids = rng.permutation(ids)
        n_c = ids.size
        n_tr = max(1, int(round(ratios[0] * n_c)))
        n_va = max(1, int(round(ratios[1] * n_c)))
        while n_tr + n_va > n_c - 1:
            if n_tr >= n_va:
                n_tr -= 1
            else:
                n_va -= 1
        parts[0].append(ids[:n_tr])
        parts[1].append(ids[n_tr:n_tr + n_va])
        parts[2].append(ids[n_tr + n_va:])
    train, val, test = (np.sort(np.concatenate(p)) for p in parts)
    return SplitMasks(train, val, test)


# --------------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class SyntheticConfig:
    n_nodes: int = 2000
    n_relations: int = 3
    fraud_ratio: float = 1.0 / 7.0
    homophily: tuple[float, ...] = (0.9, 0.3, 0.6)
    camouflage_strength: float = 0.8
    mean_degree: float = 8.0
    feature_dim: int = 16
    class_separation: float = 3.0
    feature_noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "homophily", tuple(float(h) for h in self.homophily))
        if self.n_nodes < 4:
            raise ValueError("n_nodes must be >= 4")
        if self.n_relations < 1 or len(self.homophily) != self.n_relations:
            raise ValueError("need one homophily value per relation")
        probs = (self.fraud_ratio, self.camouflage_strength, *self.homophily)
        if not all(0.0 <= p <= 1.0 for p in probs):
            raise ValueError("fraud_ratio, camouflage_strength and homophily must lie in [0, 1]")
        if self.mean_degree < 1:
            raise ValueError("mean_degree must be >= 1")
        if self.feature_dim < 1 or self.feature_noise <= 0:
            raise ValueError("feature_dim must be >= 1 and feature_noise > 0")

    @classmethod
    def from_imbalance(cls, imbalance_ratio: float, **kwargs) -> "SyntheticConfig":
        """Config whose benign:fraud ratio is ``imbalance_ratio``:1."""
        if imbalance_ratio <= 0:
            raise ValueError("imbalance ratio must be positive")
        return cls(fraud_ratio=1.0 / (1.0 + imbalance_ratio), **kwargs)


def _class_means(config: SyntheticConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    direction = rng.standard_normal(config.feature_dim)
    direction /= np.linalg.norm(direction)
    mu_benign = np.zeros(config.feature_dim)
    mu_fraud = config.class_separation * direction
    return mu_benign, mu_fraud


def generate_synthetic(config: SyntheticConfig) -> MultiRelationGraph:
    """Degree-corrected planted-partition graph with tunable camouflage.

    Every node draws Poisson(mean_degree / 2 * theta_v) edge stubs per relation
    (theta_v is a log-normal degree propensity normalised to mean 1). Each stub
    lands in the node's own class with probability ``homophily[r]`` and the
    partner is picked proportionally to theta within the chosen class.
    Fraud features are centred on the benign mean mixed with the fraud mean
    by ``camouflage_strength``.
    """
    rng = np.random.default_rng(config.seed)
    n = config.n_nodes
    n_fraud = int(round(config.fraud_ratio * n))
    labels = np.zeros(n, dtype=np.int64)
    labels[rng.permutation(n)[:n_fraud]] = 1

    mu_benign, mu_fraud = _class_means(config, rng)
    mu_camo = (1.0 - config.camouflage_strength) * mu_fraud + config.camouflage_strength * mu_benign
    centres = np.where(labels[:, None] == 1, mu_camo[None, :], mu_benign[None, :])
    features = centres + config.feature_noise * rng.standard_normal((n, config.feature_dim))

    theta = rng.lognormal(mean=0.0, sigma=0.5, size=n)
    theta /= theta.mean()
    members = [np.flatnonzero(labels == c) for c in range(NUM_CLASSES)]
    cdfs = []
    for ids in members:
        w = np.cumsum(theta[ids])
        cdfs.append(w / w[-1] if ids.size else w)

    edge_lists = []
    for r in range(config.n_relations):
        stubs = rng.poisson(config.mean_degree / 2.0 * theta)
        src = np.repeat(np.arange(n), stubs)
        same = rng.random(src.size) < config.homophily[r]
        target_class = np.where(same, labels[src], 1 - labels[src])
        dst = np.full(src.size, -1, dtype=np.int64)
        u = rng.random(src.size)
        for c in range(NUM_CLASSES):
            sel = target_class == c
            if members[c].size == 0 or not sel.any():
                continue
            pos = np.searchsorted(cdfs[c], u[sel], side="right")
            dst[sel] = members[c][np.minimum(pos, members[c].size - 1)]
        keep = (dst >= 0) & (dst != src)
        edge_lists.append(np.stack([src[keep], dst[keep]], axis=1))

    names = tuple(f"rel_{r}" for r in range(config.n_relations))
    return MultiRelationGraph.from_edges(features, labels, edge_lists, names)


def measured_homophily(graph: MultiRelationGraph, r: int) -> float:
    """Fraction of relation-``r`` edges joining two nodes of the same (known) class."""
    e = graph.edges(r)
    y = graph.labels
    known = (y[e[:, 0]] != UNKNOWN) & (y[e[:, 1]] != UNKNOWN)
    e = e[known]
    if e.shape[0] == 0:
        return float("nan")
    return float(np.mean(y[e[:, 0]] == y[e[:, 1]]))
