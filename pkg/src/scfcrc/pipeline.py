"""Two-stage training: label propagation + filter (stage 1), then the MoE head
on cached token sequences (stage 2), with validation-AUC model selection."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import moe
from .config import TrainConfig
from .fcf import FilterModel, FcfResult, filter_features, train_fcf
from .graph import MultiRelationGraph, SplitMasks, split_nodes
from .label_prop import PseudoLabels, propagate_labels
from .lga import SequenceCache, observed_labels, precompute_sequences
from .metrics import MetricError, score_report
from .serialize import load_checkpoint, load_module_tensors, module_tensors, save_checkpoint

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss; carries the last finite head state."""

    def __init__(self, message: str, result: "TrainResult"):
        super().__init__(message)
        self.result = result


@dataclass
class RunReport:
    seed: int
    config: dict
    fcf_epochs: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    val: dict = field(default_factory=dict)
    test: dict = field(default_factory=dict)
    experts: list[dict] = field(default_factory=list)
    pc_skipped: int = 0
    lp_iterations: int = 0
    wall_clock_s: float = 0.0

    def loss_traces(self) -> dict:
        keys_fcf = ("l_gnn", "l_ic", "l_pc", "l1")
        keys = ("l_d", "l_g", "l_rm", "l2")
        return {
            "fcf": [{k: e[k] for k in keys_fcf} for e in self.fcf_epochs],
            "rcr": [{k: e[k] for k in keys} for e in self.epochs],
        }

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        return path


@dataclass
class Detector:
    """Everything needed to score nodes of one graph."""

    filter_model: FilterModel
    head: moe.MoeHead
    config: TrainConfig
    split: SplitMasks
    pseudo: PseudoLabels
    filtered: np.ndarray
    cache: SequenceCache
    prior: np.ndarray  # (N, n_e) a_G

    def batch(self, ids):
        rows = self.cache.rows(ids)
        return torch.from_numpy(self.cache.tokens[rows]), torch.from_numpy(self.cache.meta[rows].astype(np.int64))

    @torch.no_grad()
    def forward(self, ids, batch_size: int = 1024) -> tuple[np.ndarray, np.ndarray]:
        """Manager weights (M, n_e) and expert probabilities (M, n_e, 2) in eval mode."""
        self.head.eval()
        a_parts, p_parts = [], []
        ids = np.asarray(ids)
        for i in range(0, ids.size, batch_size):
            tokens, meta = self.batch(ids[i:i + batch_size])
            out = self.head(tokens, meta)
            a_parts.append(out.a_m.double().numpy())
            p_parts.append(out.expert_probs.double().numpy())
        n_e = self.head.n_experts
        if not a_parts:
            return np.zeros((0, n_e)), np.zeros((0, n_e, 2))
        return np.concatenate(a_parts), np.concatenate(p_parts)

    def fraud_scores(self, ids) -> np.ndarray:
        a_m, probs = self.forward(ids)
        return moe.predict(torch.from_numpy(a_m), torch.from_numpy(probs)).numpy()[:, 1]


@dataclass
class TrainResult:
    detector: Detector
    report: RunReport


def evaluate(detector: Detector, graph: MultiRelationGraph, split) -> dict:
    """AUC / AP / F1-macro of the weighted prediction plus every expert on its own.

    ``split`` is a split name ("train", "val", "test") or an array of node ids.
    """
    ids = getattr(detector.split, split) if isinstance(split, str) else np.asarray(split)
    y = graph.labels[ids]
    if ids.size == 0 or not (np.any(y == 0) and np.any(y == 1)):
        raise MetricError("evaluation split must be non-empty and contain both classes")
    a_m, probs = detector.forward(ids)
    mixed = moe.predict(torch.from_numpy(a_m), torch.from_numpy(probs)).numpy()
    record = score_report(mixed[:, 1], y)
    record["n"] = int(ids.size)
    record["experts"] = [{"index": i, **score_report(probs[:, i, 1], y)} for i in range(probs.shape[1])]
    record["mean_manager_weight"] = a_m.mean(axis=0).tolist()
    return record


def parameter_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def zero_filter(in_dim: int, config: TrainConfig) -> FilterModel:
    """A filter whose output is identically zero (used when the filter is ablated)."""
    model = FilterModel(in_dim, config.fcf.hidden_sizes, config.fcf.gnn_layers)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    return model.eval()


def prepare_stage_one(graph: MultiRelationGraph, config: TrainConfig, split: SplitMasks):
    """Label propagation and filter training; returns (pseudo, FcfResult)."""
    if config.no_fcf:
        model = zero_filter(graph.feature_dim, config)
        n = graph.num_nodes
        pseudo = PseudoLabels(np.tile([1.0, 0.0], (n, 1)), np.zeros(n, dtype=np.int64), np.zeros(n, dtype=bool))
        return pseudo, FcfResult(model, np.zeros_like(graph.features))
    pseudo = propagate_labels(graph, split.train, config.alpha, config.lp_max_iters, config.lp_tol)
    return pseudo, train_fcf(graph, pseudo, config.effective_fcf)


def build_head(graph: MultiRelationGraph, config: TrainConfig) -> moe.MoeHead:
    n_e = config.num_experts(graph.num_relations)
    return moe.MoeHead(
        in_dim=graph.feature_dim,
        num_relations=graph.num_relations,
        hops=config.hops,
        d_h=config.d_h,
        relation_sets=moe.default_relation_sets(graph.num_relations, n_e),
        public_depth=config.public_depth,
        expert_depth=config.expert_depth,
        manager_depth=config.manager_depth,
        n_heads=config.n_heads,
        dropout=config.dropout,
        classifier_hidden=config.classifier_hidden,
        expert_input=config.expert_input,
        use_manager=not config.no_rcr,
    )


def build_detector_inputs(graph, config, split, pseudo, filtered, relation_sets, workers: int = 1):
    """Sequence cache and structure prior for every node."""
    observed = observed_labels(graph, split.train) if config.hygiene else graph.labels.copy()
    cache = precompute_sequences(graph, graph.features, filtered, observed, pseudo.hard, config.hops,
                                 shells=config.shells, workers=workers, hygiene=config.hygiene)
    n_e = len(relation_sets)
    if config.fixed_ag is not None and not config.no_rcr:
        if len(config.fixed_ag) != n_e:
            raise ValueError(f"fixed_ag has {len(config.fixed_ag)} entries for {n_e} experts")
        prior = np.tile(np.asarray(config.fixed_ag), (graph.num_nodes, 1))
    else:
        prior = moe.structure_prior(graph, graph.features, filtered, relation_sets, config.effective_beta)
    return cache, prior


def train(graph: MultiRelationGraph, config: TrainConfig, split: SplitMasks | None = None,
          workers: int = 1) -> TrainResult:
    """Run both stages and return the best-on-validation detector and its report."""
    started = time.perf_counter()
    n_e = config.num_experts(graph.num_relations)
    if config.fixed_ag is not None and not config.no_rcr and len(config.fixed_ag) != n_e:
        raise ValueError(f"fixed_ag has {len(config.fixed_ag)} entries but the graph needs {n_e} experts")
    if not config.no_rcr and n_e != graph.num_relations + 1:
        raise ValueError(f"n_e={n_e} does not match R + 1 = {graph.num_relations + 1} relation sets")
    split = split_nodes(graph, config.split, config.seed) if split is None else split

    pseudo, stage_one = prepare_stage_one(graph, config, split)
    filter_model = stage_one.model.eval()
    filter_model.requires_grad_(False)
    filter_hash = parameter_hash(filter_model)

    torch.manual_seed(config.seed)
    head = build_head(graph, config)
    cache, prior = build_detector_inputs(graph, config, split, pseudo, stage_one.filtered, head.relation_sets, workers)
    detector = Detector(filter_model, head, config, split, pseudo, stage_one.filtered, cache, prior)
    report = RunReport(seed=config.seed, config=config.to_dict(), fcf_epochs=stage_one.history,
                       pc_skipped=stage_one.pc_skipped, lp_iterations=pseudo.iterations)

    _train_head(graph, detector, report)

    if parameter_hash(filter_model) != filter_hash:
        raise RuntimeError("stage 2 modified the filter parameters")
    test = evaluate(detector, graph, "test")
    report.experts = test.pop("experts")
    report.test = test
    report.wall_clock_s = time.perf_counter() - started
    return TrainResult(detector, report)


def _train_head(graph: MultiRelationGraph, det: Detector, report: RunReport) -> None:
    config, head = det.config, det.head
    lambda3, lambda4 = config.effective_lambda3, config.lambda4
    use_manager = head.manager is not None
    opt = torch.optim.Adam(head.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    order_gen = torch.Generator().manual_seed(config.seed)
    mask_gen = torch.Generator().manual_seed(config.seed + 1)
    train_ids = det.split.train
    labels = torch.tensor(graph.labels)
    prior = torch.as_tensor(det.prior, dtype=torch.float32)

    best_auc, best_state = -math.inf, copy.deepcopy(head.state_dict())
    last_good = copy.deepcopy(head.state_dict())
    for epoch in range(config.epochs):
        progress = epoch / config.epochs
        rm_active = use_manager and not config.no_lrm and progress >= config.delta
        head.train()
        perm = torch.randperm(train_ids.size, generator=order_gen).numpy()
        sums = {"l_d": 0.0, "l_g": 0.0, "l_rm": 0.0, "l2": 0.0}
        n_batches = 0
        for start in range(0, train_ids.size, config.batch_size):
            ids = train_ids[perm[start:start + config.batch_size]]
            tokens, meta = det.batch(ids)
            out = head(tokens, meta)
            y = labels[ids]
            l_d = moe.loss_detection(out.a_m, out.expert_probs, y)
            l_g = moe.loss_guidance(prior[ids], out.a_m) if use_manager else torch.zeros(())
            l_rm = torch.zeros(())
            if rm_active:
                mask = moe.draw_masks(len(ids), head.n_experts, config.masking_ratio, mask_gen)
                a_masked = moe.redistribute(out.a_m, mask)
                l_rm = moe.loss_regularized_mask(out.a_m, a_masked, out.expert_probs)
            total = l_d
            if lambda3 > 0:
                total = total + lambda3 * l_g
            if rm_active and lambda4 > 0:
                total = total + lambda4 * l_rm
            parts = {"l_d": l_d.item(), "l_g": l_g.item(), "l_rm": l_rm.item(), "l2": total.item()}
            if not all(math.isfinite(v) for v in parts.values()):
                head.load_state_dict(last_good)
                report.epochs.append({"epoch": epoch, "aborted": True, **parts})
                raise TrainingAborted(f"non-finite loss at epoch {epoch}: {parts}", TrainResult(det, report))
            opt.zero_grad()
            total.backward()
            opt.step()
            for k, v in parts.items():
                sums[k] += v
            n_batches += 1
        last_good = copy.deepcopy(head.state_dict())
        record = {k: v / max(n_batches, 1) for k, v in sums.items()}
        val = evaluate(det, graph, "val")
        record.update(epoch=epoch, rm_active=rm_active, lambda3=lambda3, lambda4=lambda4 if rm_active else 0.0,
                      val_auc=val["auc"], val_ap=val["ap"], val_f1=val["f1_macro"])
        report.epochs.append(record)
        if val["auc"] > best_auc:
            best_auc, best_state = val["auc"], copy.deepcopy(head.state_dict())
            report.best_epoch = epoch
            report.val = {k: val[k] for k in ("auc", "ap", "f1_macro")}
        log.info("epoch %d l2=%.4f val_auc=%.4f", epoch, record["l2"], val["auc"])
    head.load_state_dict(best_state)
    head.eval()


# --------------------------------------------------------------- checkpoints

def save_detector(result: TrainResult, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    det = result.detector
    cfg = det.config.to_dict()
    save_checkpoint(out_dir / "fcf.ckpt", {"kind": "fcf", "arch": det.filter_model.arch, "train": cfg},
                    module_tensors(det.filter_model))
    save_checkpoint(out_dir / "rcr.ckpt", {"kind": "rcr", "arch": det.head.arch, "train": cfg},
                    module_tensors(det.head))
    result.report.write(out_dir / "report.json")
    return out_dir


def load_filter(path) -> tuple[FilterModel, dict]:
    config, tensors = load_checkpoint(path)
    arch = config["arch"]
    model = FilterModel(arch["in_dim"], arch["hidden_sizes"], arch["gnn_layers"], arch["gnn_dim"])
    load_module_tensors(model, tensors)
    return model.eval(), config


def load_detector(model_dir, graph: MultiRelationGraph, workers: int = 1) -> Detector:
    """Rebuild a detector for ``graph`` from ``fcf.ckpt`` and ``rcr.ckpt``.

    The split and pseudo-labels are recomputed deterministically from the
    stored training config.
    """
    model_dir = Path(model_dir)
    filter_model, fcf_cfg = load_filter(model_dir / "fcf.ckpt")
    head_cfg, tensors = load_checkpoint(model_dir / "rcr.ckpt")
    config = TrainConfig.from_dict(head_cfg["train"])
    head = moe.MoeHead.from_arch(head_cfg["arch"])
    load_module_tensors(head, tensors)
    head.eval()
    if filter_model.in_dim != graph.feature_dim or head.arch["num_relations"] != graph.num_relations:
        raise ValueError("checkpoint does not match the graph's feature dimension or relation count")
    split = split_nodes(graph, config.split, config.seed)
    if config.no_fcf:
        n = graph.num_nodes
        pseudo = PseudoLabels(np.tile([1.0, 0.0], (n, 1)), np.zeros(n, dtype=np.int64), np.zeros(n, dtype=bool))
    else:
        pseudo = propagate_labels(graph, split.train, config.alpha, config.lp_max_iters, config.lp_tol)
    filtered = filter_features(filter_model, graph.features)
    cache, prior = build_detector_inputs(graph, config, split, pseudo, filtered, head.relation_sets, workers)
    return Detector(filter_model, head, config, split, pseudo, filtered, cache, prior)
