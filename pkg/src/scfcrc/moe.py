"""Relation camouflage refiner: learnable token encodings, a shared
transformer encoder, per-relation experts plus a global expert, a manager
producing expert weights, and the guidance / masking / detection losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .graph import NUM_CLASSES, MultiRelationGraph
from .lga import NUM_GROUPS, TokenSequence, block_length, target_positions

EPS = 1e-12


class Encodings(nn.Module):
    """X_in = input_proj(tokens) + relation[r] + hop[k] + group[g]."""

    def __init__(self, in_dim: int, d_h: int, num_relations: int, hops: int):
        super().__init__()
        self.input_proj = nn.Linear(in_dim, d_h)
        self.relation_table = nn.Embedding(num_relations, d_h)
        self.hop_table = nn.Embedding(hops + 1, d_h)
        self.group_table = nn.Embedding(NUM_GROUPS, d_h)

    def forward(self, tokens: torch.Tensor, meta: torch.Tensor) -> torch.Tensor:
        meta = meta.long()
        limits = (self.relation_table.num_embeddings, self.hop_table.num_embeddings, self.group_table.num_embeddings)
        for col, limit in enumerate(limits):
            ids = meta[..., col]
            if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= limit):
                raise IndexError(f"token meta column {col} out of bounds for table of size {limit}")
        return (self.input_proj(tokens) + self.relation_table(meta[..., 0])
                + self.hop_table(meta[..., 1]) + self.group_table(meta[..., 2]))


class Encoder(nn.Module):
    """Stack of post-norm transformer encoder layers; depth 0 is a pass-through."""

    def __init__(self, d_h: int, depth: int, n_heads: int, dropout: float):
        super().__init__()
        self.layers = nn.ModuleList(
            nn.TransformerEncoderLayer(d_h, n_heads, dim_feedforward=2 * d_h, dropout=dropout, batch_first=True)
            for _ in range(depth)
        )

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            h = layer(h)
        return h


def _classifier(in_dim: int, hidden: int, out_dim: int, dropout: float) -> nn.Module:
    if hidden <= 0:
        return nn.Linear(in_dim, out_dim)
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Dropout(dropout), nn.Linear(hidden, out_dim))


class Branch(nn.Module):
    """An encoder stack plus a classifier over the concatenated target tokens."""

    def __init__(self, d_h, depth, n_heads, dropout, hidden, out_dim):
        super().__init__()
        self.encoder = Encoder(d_h, depth, n_heads, dropout)
        self.classifier = _classifier(2 * d_h, hidden, out_dim, dropout)


def default_relation_sets(num_relations: int, n_experts: int | None = None) -> list[tuple[int, ...]]:
    """One expert per relation followed by one global expert."""
    n_experts = num_relations + 1 if n_experts is None else n_experts
    if n_experts == 1:
        return [tuple(range(num_relations))]
    if n_experts != num_relations + 1:
        raise ValueError(f"default relation sets need n_e = R + 1 = {num_relations + 1}, got {n_experts}")
    return [(r,) for r in range(num_relations)] + [tuple(range(num_relations))]


@dataclass
class HeadOutput:
    a_m: torch.Tensor  # (B, n_e)
    expert_probs: torch.Tensor  # (B, n_e, 2)


class MoeHead(nn.Module):
    def __init__(self, in_dim: int, num_relations: int, hops: int, d_h: int = 32, relation_sets=None,
                 public_depth: int = 2, expert_depth: int = 1, manager_depth: int = 1, n_heads: int = 4,
                 dropout: float = 0.1, classifier_hidden: int | None = None, expert_input: str = "full",
                 use_manager: bool = True):
        super().__init__()
        relation_sets = [tuple(int(r) for r in s) for s in (relation_sets or default_relation_sets(num_relations))]
        for s in relation_sets:
            if not s or min(s) < 0 or max(s) >= num_relations:
                raise ValueError(f"relation set {s} invalid for R={num_relations}")
        if expert_input not in ("full", "sliced"):
            raise ValueError("expert_input must be 'full' or 'sliced'")
        if not use_manager and len(relation_sets) != 1:
            raise ValueError("a head without a manager must have exactly one expert")
        hidden = d_h if classifier_hidden is None else classifier_hidden
        self.arch = {
            "in_dim": in_dim, "num_relations": num_relations, "hops": hops, "d_h": d_h,
            "relation_sets": [list(s) for s in relation_sets], "public_depth": public_depth,
            "expert_depth": expert_depth, "manager_depth": manager_depth, "n_heads": n_heads,
            "dropout": dropout, "classifier_hidden": hidden, "expert_input": expert_input,
            "use_manager": use_manager,
        }
        self.relation_sets = relation_sets
        self.expert_input = expert_input
        self.encodings = Encodings(in_dim, d_h, num_relations, hops)
        self.public = Encoder(d_h, public_depth, n_heads, dropout)
        self.experts = nn.ModuleList(
            Branch(d_h, expert_depth, n_heads, dropout, hidden, NUM_CLASSES) for _ in relation_sets
        )
        self.manager = Branch(d_h, manager_depth, n_heads, dropout, hidden, len(relation_sets)) if use_manager else None
        self._raw_pos, self._filt_pos = target_positions(num_relations, hops)
        self._block = block_length(hops)

    @property
    def n_experts(self) -> int:
        return len(self.relation_sets)

    @classmethod
    def from_arch(cls, arch: dict) -> "MoeHead":
        return cls(**arch)

    def _aggregate(self, encoded: torch.Tensor, relations, sliced: bool) -> torch.Tensor:
        """Concatenate the mean raw-target and mean filtered-target tokens over ``relations``."""
        if sliced:
            raw = torch.arange(len(relations)) * self._block
        else:
            raw = torch.as_tensor(self._raw_pos[list(relations)])
        h_raw = encoded[:, raw].mean(dim=1)
        h_filt = encoded[:, raw + 1].mean(dim=1)
        return torch.cat([h_raw, h_filt], dim=-1)

    def _slice(self, h: torch.Tensor, relations) -> torch.Tensor:
        idx = torch.cat([torch.arange(r * self._block, (r + 1) * self._block) for r in relations])
        return h[:, idx]

    def embed(self, tokens: torch.Tensor, meta: torch.Tensor) -> torch.Tensor:
        return self.public(self.encodings(tokens, meta))

    def expert_logits(self, i: int, h: torch.Tensor) -> torch.Tensor:
        rels = self.relation_sets[i]
        sliced = self.expert_input == "sliced" and len(rels) < self.arch["num_relations"]
        inp = self._slice(h, rels) if sliced else h
        branch = self.experts[i]
        return branch.classifier(self._aggregate(branch.encoder(inp), rels, sliced))

    def manager_logits(self, h: torch.Tensor) -> torch.Tensor:
        all_rels = tuple(range(self.arch["num_relations"]))
        return self.manager.classifier(self._aggregate(self.manager.encoder(h), all_rels, False))

    def forward(self, tokens: torch.Tensor, meta: torch.Tensor) -> HeadOutput:
        h = self.embed(tokens, meta)
        probs = torch.stack([F.softmax(self.expert_logits(i, h), dim=-1) for i in range(self.n_experts)], dim=1)
        if self.manager is None:
            a_m = torch.ones(h.shape[0], 1, dtype=h.dtype)
        else:
            a_m = F.softmax(self.manager_logits(h), dim=-1)
        return HeadOutput(a_m, probs)


# ------------------------------------------------------------------ operations

def _batch(seq) -> tuple[torch.Tensor, torch.Tensor]:
    if isinstance(seq, TokenSequence):
        return torch.as_tensor(seq.tokens)[None], torch.as_tensor(seq.meta.astype(np.int64))[None]
    tokens, meta = seq
    return torch.as_tensor(tokens), torch.as_tensor(np.asarray(meta, dtype=np.int64))


def encode_input(seq, enc: Encodings) -> torch.Tensor:
    """Input embedding of one :class:`TokenSequence` (S, d_H) or a ``(tokens, meta)`` batch."""
    tokens, meta = _batch(seq)
    out = enc(tokens.to(enc.input_proj.weight.dtype), meta)
    return out[0] if isinstance(seq, TokenSequence) else out


def public_encode(head: MoeHead, x_in: torch.Tensor) -> torch.Tensor:
    single = x_in.dim() == 2
    out = head.public(x_in[None] if single else x_in)
    return out[0] if single else out


def expert_forward(head: MoeHead, i: int, h: torch.Tensor) -> torch.Tensor:
    if not 0 <= i < head.n_experts:
        raise IndexError(f"expert index {i} out of range")
    single = h.dim() == 2
    p = F.softmax(head.expert_logits(i, h[None] if single else h), dim=-1)
    return p[0] if single else p


def manager_forward(head: MoeHead, h: torch.Tensor) -> torch.Tensor:
    single = h.dim() == 2
    hb = h[None] if single else h
    if head.manager is None:
        a = torch.ones(hb.shape[0], 1, dtype=hb.dtype)
    else:
        a = F.softmax(head.manager_logits(hb), dim=-1)
    return a[0] if single else a


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def _mean_neighbor_cosine(adj, xn: np.ndarray) -> np.ndarray:
    deg = np.asarray(adj.sum(axis=1)).ravel()
    total = np.einsum("ij,ij->i", adj @ xn, xn)
    return np.divide(total, deg, out=np.zeros_like(total), where=deg > 0)


def structure_raw_scores(graph: MultiRelationGraph, x, xf, relation_sets, beta: float) -> np.ndarray:
    """(N, n_e) mix of mean neighbour cosine similarity on raw and filtered features.

    The neighbour set of expert i is the union of the node's neighbours over
    ``relation_sets[i]``; zero-norm vectors and empty neighbourhoods contribute 0.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    xn = _unit_rows(np.asarray(x, dtype=np.float64))
    xfn = _unit_rows(np.asarray(xf, dtype=np.float64))
    cols = []
    for rels in relation_sets:
        adj = graph.union_adjacency(list(rels))
        cols.append(beta * _mean_neighbor_cosine(adj, xn) + (1.0 - beta) * _mean_neighbor_cosine(adj, xfn))
    return np.stack(cols, axis=1)


def _softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def structure_prior(graph, x, xf, relation_sets, beta: float) -> np.ndarray:
    """Prior expert weights a_G for every node: softmax of the structure scores."""
    return _softmax_np(structure_raw_scores(graph, x, xf, relation_sets, beta))


def structure_scores(graph, v: int, x, xf, relation_sets, beta: float) -> np.ndarray:
    """a_G for a single node ``v``."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    x = np.asarray(x, dtype=np.float64)
    xf = np.asarray(xf, dtype=np.float64)

    def cos(a, b):
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        return 0.0 if na == 0 or nb == 0 else float(a @ b / (na * nb))

    scores = []
    for rels in relation_sets:
        nbrs = np.unique(np.concatenate([graph.neighbors(v, r) for r in rels]))
        if nbrs.size == 0:
            scores.append(0.0)
            continue
        raw = np.mean([cos(x[u], x[v]) for u in nbrs])
        filt = np.mean([cos(xf[u], xf[v]) for u in nbrs])
        scores.append(beta * raw + (1.0 - beta) * filt)
    return _softmax_np(np.asarray(scores))


def kl_divergence(p: torch.Tensor, q: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Row-wise sum p log(p / q) with 0 log 0 = 0 and q clamped below at ``eps``."""
    return (torch.xlogy(p, p) - p * torch.log(q.clamp_min(eps))).sum(dim=-1)


def _rows(t) -> torch.Tensor:
    t = torch.as_tensor(t)
    return t[None] if t.dim() == 1 else t


def loss_guidance(a_g, a_m) -> torch.Tensor:
    """Batch mean of KL(a_G || a_M)."""
    return kl_divergence(_rows(a_g), _rows(a_m)).mean()


@dataclass(frozen=True)
class MaskDraw:
    masked: np.ndarray  # expert indices, 0-based
    a_masked: np.ndarray


def redistribute(a_m: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Zero masked scores and spread their mass evenly over the unmasked experts."""
    mask = mask.to(torch.bool)
    keep = (~mask).to(a_m.dtype)
    freed = (a_m * mask.to(a_m.dtype)).sum(dim=-1, keepdim=True)
    return (a_m + freed / keep.sum(dim=-1, keepdim=True)) * keep


def apply_mask(a_m, ratio: float, rng: np.random.Generator, masked=None) -> MaskDraw:
    """Mask each expert independently with probability ``ratio`` (redrawing an
    all-masked draw) unless an explicit ``masked`` index set is given."""
    a = np.asarray(a_m, dtype=np.float64)
    n = a.size
    if masked is None:
        if not 0.0 <= ratio < 1.0:
            raise ValueError("ratio must lie in [0, 1)")
        draw = np.zeros(n, dtype=bool)
        if n > 1 and ratio > 0:
            draw = rng.random(n) < ratio
            while draw.all():
                draw = rng.random(n) < ratio
    else:
        draw = np.zeros(n, dtype=bool)
        draw[np.asarray(masked, dtype=np.int64)] = True
        if draw.all():
            raise ValueError("cannot mask every expert")
    out = redistribute(torch.as_tensor(a, dtype=torch.float64), torch.as_tensor(draw)).numpy()
    return MaskDraw(np.flatnonzero(draw), out)


def draw_masks(batch: int, n_experts: int, ratio: float, generator: torch.Generator) -> torch.Tensor:
    """(batch, n_e) Bernoulli(ratio) masks; rows that mask every expert are redrawn."""
    mask = torch.zeros(batch, n_experts, dtype=torch.bool)
    if n_experts < 2 or ratio <= 0:
        return mask
    mask = torch.rand(batch, n_experts, generator=generator) < ratio
    full = mask.all(dim=1)
    while bool(full.any()):
        mask[full] = torch.rand(int(full.sum()), n_experts, generator=generator) < ratio
        full = mask.all(dim=1)
    return mask


def loss_regularized_mask(a_m, a_masked, expert_probs) -> torch.Tensor:
    """Batch mean of KL(sum_i a_M[i] p_i || sum_i a_masked[i] p_i).

    ``a_masked`` may be a :class:`MaskDraw` for single-node inputs.
    """
    if isinstance(a_masked, MaskDraw):
        a_masked = torch.as_tensor(a_masked.a_masked)
    a_m, a_masked = _rows(a_m), _rows(a_masked).to(_rows(a_m).dtype)
    probs = torch.as_tensor(expert_probs)
    probs = probs[None] if probs.dim() == 2 else probs
    q = (a_m[..., None] * probs).sum(dim=1)
    q_masked = (a_masked[..., None] * probs).sum(dim=1)
    return kl_divergence(q, q_masked).mean()


def loss_detection(a_m, expert_probs, y) -> torch.Tensor:
    """Batch mean of sum_i a_M[i] * CE(p_i, y)."""
    a_m = _rows(a_m)
    probs = torch.as_tensor(expert_probs)
    probs = probs[None] if probs.dim() == 2 else probs
    y = torch.as_tensor(y, dtype=torch.long).reshape(-1)
    picked = probs[torch.arange(probs.shape[0]), :, y]  # (B, n_e)
    ce = -torch.log(picked.clamp_min(EPS))
    return (a_m * ce).sum(dim=-1).mean()


def predict(a_m, expert_probs) -> torch.Tensor:
    """Mixture sum_i a_M[i] p_i; column 1 is the fraud score."""
    a = torch.as_tensor(a_m)
    probs = torch.as_tensor(expert_probs)
    return (a[..., None] * probs).sum(dim=-2)
