"""Feature camouflage filter: an MLP producing filtered features X', trained
through a mean-aggregating GNN head on pseudo-labels plus instance-wise and
prototype-wise contrastive losses."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .graph import NUM_CLASSES, MultiRelationGraph
from .label_prop import PseudoLabels

log = logging.getLogger(__name__)


@dataclass
class FcfConfig:
    tau: float = 0.5
    lambda1: float = 0.1
    lambda2: float = 0.1
    gnn_layers: int = 2
    hidden_sizes: tuple[int, ...] | None = None  # None -> one hidden layer of width d
    epochs: int = 50
    batch_size: int = 512
    learning_rate: float = 3e-3
    weight_decay: float = 1e-4
    seed: int = 0
    exclude_self: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be non-negative")
        if self.gnn_layers < 1 or self.epochs < 0 or self.batch_size < 2:
            raise ValueError("gnn_layers >= 1, epochs >= 0 and batch_size >= 2 required")
        if self.hidden_sizes is not None:
            self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)


class FcfDivergence(RuntimeError):
    def __init__(self, epoch: int, step: int, components: dict):
        self.epoch, self.step, self.components = epoch, step, components
        super().__init__(f"filter training diverged at epoch {epoch}, step {step}: {components}")


class FilterModel(nn.Module):
    """Feature filter MLP (d -> d), mean-aggregation GNN and a 2-way head."""

    def __init__(self, in_dim: int, hidden_sizes=None, gnn_layers: int = 2, gnn_dim: int | None = None):
        super().__init__()
        hidden = (in_dim,) if hidden_sizes is None else tuple(hidden_sizes)
        gnn_dim = in_dim if gnn_dim is None else gnn_dim
        self.arch = {"in_dim": in_dim, "hidden_sizes": list(hidden), "gnn_layers": gnn_layers, "gnn_dim": gnn_dim}

        widths = (in_dim, *hidden, in_dim)
        layers: list[nn.Module] = []
        for i in range(len(widths) - 1):
            layers.append(nn.Linear(widths[i], widths[i + 1]))
            if i < len(widths) - 2:
                layers.append(nn.ReLU())
        self.mlp = nn.Sequential(*layers)
        dims = [in_dim] + [gnn_dim] * gnn_layers
        self.gnn = nn.ModuleList(nn.Linear(dims[i], dims[i + 1], bias=False) for i in range(gnn_layers))
        self.head = nn.Linear(dims[-1], NUM_CLASSES)

    @property
    def in_dim(self) -> int:
        return self.arch["in_dim"]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.mlp(x)


def mean_aggregator(graph: MultiRelationGraph, dtype=torch.float32) -> torch.Tensor:
    """Row-normalised union adjacency as a sparse tensor; isolated rows are zero."""
    adj = graph.union_adjacency().tocoo()
    deg = np.asarray(graph.union_adjacency().sum(axis=1)).ravel()
    vals = 1.0 / deg[adj.row]
    idx = torch.from_numpy(np.stack([adj.row, adj.col]).astype(np.int64))
    n = graph.num_nodes
    return torch.sparse_coo_tensor(idx, torch.as_tensor(vals, dtype=dtype), (n, n), check_invariants=False).coalesce()


def filter_features(model: FilterModel, x) -> np.ndarray:
    """Apply the trained filter to a raw feature matrix (no grad, eval mode)."""
    x = np.array(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.in_dim:
        raise ValueError(f"expected an (N, {model.in_dim}) matrix, got {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("features must be finite")
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        out = model(torch.as_tensor(x, dtype=dtype))
    return out.double().numpy()


def gnn_forward(agg, xf: torch.Tensor, model: FilterModel) -> torch.Tensor:
    """h^l = relu(W_l (h^{l-1} + mean of neighbour h^{l-1})), h^0 = X'.

    ``agg`` is a graph or the sparse operator from :func:`mean_aggregator`.
    """
    if isinstance(agg, MultiRelationGraph):
        agg = mean_aggregator(agg, dtype=xf.dtype)
    if xf.shape[0] != agg.shape[0]:
        raise ValueError(f"feature rows {xf.shape[0]} != graph nodes {agg.shape[0]}")
    h = xf
    for w in model.gnn:
        h = torch.relu(w(h + torch.sparse.mm(agg, h)))
    return h


def _targets(targets) -> torch.Tensor:
    if isinstance(targets, PseudoLabels):
        targets = targets.hard
    return torch.as_tensor(np.asarray(targets), dtype=torch.long)


def loss_gnn(logits: torch.Tensor, targets, node_set=None) -> torch.Tensor:
    """Mean softmax cross-entropy of head logits against hard pseudo-labels.

    ``logits`` holds head outputs for every node; ``node_set`` selects the rows
    that contribute (all rows if omitted).
    """
    y = _targets(targets)
    if node_set is not None:
        idx = torch.as_tensor(np.asarray(node_set), dtype=torch.long)
        if idx.numel() == 0:
            raise ValueError("node_set is empty")
        logits, y = logits[idx], y[idx]
    if logits.shape[0] == 0:
        raise ValueError("node_set is empty")
    return F.cross_entropy(logits, y)


def loss_instance_contrastive(xf: torch.Tensor, labels, tau: float, exclude_self: bool = False) -> torch.Tensor:
    """Supervised cosine contrastive loss over a batch of filtered features.

    For anchor i the log-ratio is summed over every same-label j != i; the
    softmax denominator runs over the whole batch including i unless
    ``exclude_self``. Anchors without a positive contribute 0 and the total is
    divided by the batch size.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    b = xf.shape[0]
    if b < 2:
        raise ValueError("batch needs at least two rows")
    xn = F.normalize(xf, dim=1, eps=1e-12)
    sim = xn @ xn.T / tau
    eye = torch.eye(b, dtype=torch.bool)
    denom_logits = sim.masked_fill(eye, float("-inf")) if exclude_self else sim
    log_prob = sim - torch.logsumexp(denom_logits, dim=1, keepdim=True)
    positive = (y[:, None] == y[None, :]) & ~eye
    per_anchor = -(log_prob * positive).sum(dim=1)
    return per_anchor.sum() / b


def class_prototypes(x: torch.Tensor, labels) -> torch.Tensor | None:
    """Per-class means of ``x``; ``None`` if some class is absent."""
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    protos = []
    for c in range(NUM_CLASSES):
        sel = y == c
        if not bool(sel.any()):
            return None
        protos.append(x[sel].mean(dim=0))
    return torch.stack(protos)


def loss_prototype_contrastive(xf: torch.Tensor, x: torch.Tensor, labels, tau: float) -> torch.Tensor:
    """Cross-entropy of cosine similarities between filtered rows and the
    original-feature class prototypes of the batch. Returns 0 when a class is
    missing from the batch."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    protos = class_prototypes(x, labels)
    if protos is None:
        return xf.sum() * 0.0
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    sim = F.normalize(xf, dim=1, eps=1e-12) @ F.normalize(protos, dim=1, eps=1e-12).T / tau
    return F.cross_entropy(sim, y)


@dataclass
class FcfResult:
    model: FilterModel
    filtered: np.ndarray
    history: list[dict] = field(default_factory=list)
    pc_skipped: int = 0


def train_fcf(graph: MultiRelationGraph, pseudo: PseudoLabels, config: FcfConfig) -> FcfResult:
    """Minimise L_GNN + lambda1 * L_IC + lambda2 * L_PC with Adam over node mini-batches."""
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    model = FilterModel(graph.feature_dim, config.hidden_sizes, config.gnn_layers)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    x = torch.tensor(graph.features, dtype=torch.float32)
    agg = mean_aggregator(graph)
    hard = torch.as_tensor(pseudo.hard, dtype=torch.long)
    n = graph.num_nodes

    history: list[dict] = []
    pc_skipped = 0
    for epoch in range(config.epochs):
        sums = {"l_gnn": 0.0, "l_ic": 0.0, "l_pc": 0.0, "l1": 0.0}
        order = torch.randperm(n, generator=gen)
        batches = [order[i:i + config.batch_size] for i in range(0, n, config.batch_size)]
        for step, idx in enumerate(batches):
            model.train()
            xf = model(x)
            z = gnn_forward(agg, xf, model)
            y_b = hard[idx]
            l_gnn = F.cross_entropy(model.head(z[idx]), y_b)
            l_ic = l_pc = torch.zeros(())
            if config.lambda1 > 0 and idx.numel() >= 2:
                l_ic = loss_instance_contrastive(xf[idx], y_b, config.tau, config.exclude_self)
            if config.lambda2 > 0:
                if class_prototypes(x[idx], y_b) is None:
                    pc_skipped += 1
                else:
                    l_pc = loss_prototype_contrastive(xf[idx], x[idx], y_b, config.tau)
            total = l_gnn + config.lambda1 * l_ic + config.lambda2 * l_pc
            parts = {"l_gnn": l_gnn.item(), "l_ic": l_ic.item(), "l_pc": l_pc.item(), "l1": total.item()}
            if not all(math.isfinite(v) for v in parts.values()):
                raise FcfDivergence(epoch, step, parts)
            opt.zero_grad()
            total.backward()
            opt.step()
            for k, v in parts.items():
                sums[k] += v
        record = {k: v / len(batches) for k, v in sums.items()}
        record["epoch"] = epoch
        history.append(record)
        log.debug("fcf epoch %d: %s", epoch, record)

    model.eval()
    return FcfResult(model, filter_features(model, graph.features), history, pc_skipped)


def config_dict(config: FcfConfig) -> dict:
    d = asdict(config)
    if d["hidden_sizes"] is not None:
        d["hidden_sizes"] = list(d["hidden_sizes"])
    return d
