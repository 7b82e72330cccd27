"""Command-line interface.

Exit codes: 0 success, 2 input error, 3 training aborted.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ABLATIONS, PROFILES, ConfigFileError, TrainConfig, read_config_file, with_ablation
from .fcf import FcfDivergence, train_fcf
from .graph import GraphError, SyntheticConfig, generate_synthetic, load_dataset, split_nodes, write_dataset
from .label_prop import propagate_labels, write_pseudo_csv
from .lga import observed_labels, precompute_sequences, write_cache
from .metrics import MetricError
from .pipeline import (
    TrainingAborted,
    evaluate,
    load_detector,
    load_filter,
    save_detector,
    train,
)
from .serialize import CheckpointError, module_tensors, save_checkpoint

log = logging.getLogger("scfcrc")

EXIT_OK, EXIT_INPUT, EXIT_ABORT = 0, 2, 3

METRICS_SCHEMA = {
    "type": "object",
    "required": ["split", "n", "auc", "ap", "f1_macro", "experts"],
    "properties": {
        "split": {"type": "string"},
        "n": {"type": "integer", "minimum": 1},
        "auc": {"type": "number", "minimum": 0, "maximum": 1},
        "ap": {"type": "number", "minimum": 0, "maximum": 1},
        "f1_macro": {"type": "number", "minimum": 0, "maximum": 1},
        "mean_manager_weight": {"type": "array", "items": {"type": "number"}},
        "experts": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["index", "auc", "ap", "f1_macro"],
                "properties": {
                    "index": {"type": "integer", "minimum": 0},
                    "auc": {"type": "number", "minimum": 0, "maximum": 1},
                    "ap": {"type": "number", "minimum": 0, "maximum": 1},
                    "f1_macro": {"type": "number", "minimum": 0, "maximum": 1},
                },
            },
        },
    },
}


class InputError(Exception):
    pass


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("SCFCRC_NUM_WORKERS", "1")))
    except ValueError:
        raise InputError("SCFCRC_NUM_WORKERS must be an integer") from None


def _summary(metrics: dict) -> str:
    return f"AUC={metrics['auc']:.4f} AP={metrics['ap']:.4f} F1={metrics['f1_macro']:.4f}"


def cmd_prep(args) -> int:
    graph = load_dataset(args.data)
    if args.config:
        config = read_config_file(args.config, seed=args.seed).config
    else:
        config = TrainConfig.from_profile(args.profile, seed=args.seed)
    overrides = {"hops": args.hops}
    if args.alpha is not None:
        overrides["alpha"] = args.alpha
    config = TrainConfig.from_dict({**config.to_dict(), **overrides})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    split = split_nodes(graph, config.split, config.seed)
    pseudo = propagate_labels(graph, split.train, config.alpha, config.lp_max_iters, config.lp_tol)
    write_pseudo_csv(pseudo, out / "pseudo.csv")
    stage_one = train_fcf(graph, pseudo, config.effective_fcf)
    save_checkpoint(out / "fcf.ckpt", {"kind": "fcf", "arch": stage_one.model.arch, "train": config.to_dict()},
                    module_tensors(stage_one.model))
    observed = observed_labels(graph, split.train)
    cache = precompute_sequences(graph, graph.features, stage_one.filtered, observed, pseudo.hard,
                                 config.hops, workers=_workers())
    write_cache(cache, out / "sequences.bin")
    print(f"wrote {out / 'pseudo.csv'}, {out / 'fcf.ckpt'}, {out / 'sequences.bin'} "
          f"(N={len(cache)}, S={cache.seq_len}, d={graph.feature_dim})")
    return EXIT_OK


def cmd_train(args) -> int:
    spec = read_config_file(args.config, seed=args.seed)
    data = Path(args.data) if args.data else spec.data_path
    if data is None:
        raise InputError("no dataset: set [data] path in the config file or pass --data")
    graph = load_dataset(data)
    n_e = spec.config.num_experts(graph.num_relations)
    config = with_ablation(spec.config, args.ablation, n_experts=n_e)
    out = Path(args.out)
    try:
        result = train(graph, config, workers=_workers())
    except TrainingAborted as exc:
        save_detector(exc.result, out)
        print(f"training aborted: {exc}; last good checkpoint kept in {out}", file=sys.stderr)
        return EXIT_ABORT
    except FcfDivergence as exc:
        out.mkdir(parents=True, exist_ok=True)
        (out / "abort.json").write_text(json.dumps({"stage": "fcf", "epoch": exc.epoch, "step": exc.step,
                                                    "components": exc.components}) + "\n")
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    save_detector(result, out)
    print(_summary(result.report.test))
    return EXIT_OK


def _require_model(model_dir: Path, names=("fcf.ckpt", "rcr.ckpt")) -> None:
    for name in names:
        if not (model_dir / name).is_file():
            raise InputError(f"missing checkpoint {model_dir / name}")


def cmd_eval(args) -> int:
    model_dir = Path(args.model)
    _require_model(model_dir)
    graph = load_dataset(args.data)
    detector = load_detector(model_dir, graph, workers=_workers())
    metrics = {"split": args.split, **evaluate(detector, graph, args.split)}
    out = Path(args.out) if args.out else model_dir / "metrics.json"
    out.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(_summary(metrics))
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        homophily = tuple(float(h) for h in args.homophily.split(","))
    except ValueError:
        raise InputError(f"--homophily must be a comma-separated list of numbers, got {args.homophily!r}") from None
    if len(homophily) == 1:
        homophily = homophily * args.relations
    try:
        cfg = SyntheticConfig.from_imbalance(
            args.ir, n_nodes=args.nodes, n_relations=args.relations, homophily=homophily,
            camouflage_strength=args.camouflage, mean_degree=args.mean_degree,
            feature_dim=args.feature_dim, class_separation=args.separation, seed=args.seed,
        )
    except ValueError as exc:
        raise InputError(str(exc)) from None
    graph = generate_synthetic(cfg)
    write_dataset(graph, args.out)
    n_fraud = int((graph.labels == 1).sum())
    print(f"wrote {args.out}: N={graph.num_nodes} R={graph.num_relations} d={graph.feature_dim} "
          f"benign={graph.num_nodes - n_fraud} fraud={n_fraud}")
    return EXIT_OK


def _write_matrix_csv(path: Path, matrix: np.ndarray) -> None:
    header = ",".join(["id"] + [f"f{j}" for j in range(matrix.shape[1])])
    lines = [header] + [f"{i}," + ",".join(repr(float(v)) for v in row) for i, row in enumerate(matrix)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_export_embed(args) -> int:
    model_dir = Path(args.model)
    if args.which == "filtered":
        _require_model(model_dir, ("fcf.ckpt",))
    graph = load_dataset(args.data)
    if args.which == "raw":
        matrix = graph.features
    else:
        from .fcf import filter_features

        model, _ = load_filter(model_dir / "fcf.ckpt")
        if model.in_dim != graph.feature_dim:
            raise InputError(f"filter expects d={model.in_dim}, dataset has d={graph.feature_dim}")
        matrix = filter_features(model, graph.features)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_matrix_csv(out, matrix)
    print(f"wrote {out} ({matrix.shape[0]} x {matrix.shape[1]})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    profiles = "; ".join(f"{name}: " + ", ".join(f"{k}={v}" for k, v in vals.items()) for name, vals in PROFILES.items())
    parser = argparse.ArgumentParser(prog="scfcrc", description=__doc__, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", formatter_class=fmt, epilog=f"profiles: {profiles}",
                       help="pseudo-labels, trained filter and token-sequence cache")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--hops", type=int, default=2, help="neighbourhood hops K")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--alpha", type=float, default=None, help="label propagation alpha (profile default 0.9)")
    p.add_argument("--seed", type=int, default=0, help="split and training seed")
    p.add_argument("--profile", choices=sorted(PROFILES), default="yelpchi", help="default settings profile")
    p.add_argument("--config", default=None, help="optional config file (overrides --profile)")
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("train", formatter_class=fmt, epilog=f"profiles: {profiles}",
                       help="train filter and MoE head, write checkpoints and report.json")
    p.add_argument("--config", required=True, help="config file with [data] [fcf] [rcr] [train] sections")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--ablation", choices=ABLATIONS, default=None, help="ablation variant")
    p.add_argument("--data", default=None, help="dataset directory (overrides [data] path)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", formatter_class=fmt, help="evaluate a trained model directory")
    p.add_argument("--model", required=True, help="directory with fcf.ckpt and rcr.ckpt")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", choices=("train", "val", "test"), default="test", help="node split to score")
    p.add_argument("--out", default=None, help="metrics file (default MODEL/metrics.json)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", formatter_class=fmt, help="generate a synthetic camouflage graph")
    p.add_argument("--nodes", type=int, default=2000, help="number of nodes")
    p.add_argument("--relations", type=int, default=3, help="number of relations")
    p.add_argument("--ir", type=float, default=5.9, help="benign:fraud imbalance ratio")
    p.add_argument("--homophily", default="0.9,0.3,0.6", help="per-relation homophily, comma separated")
    p.add_argument("--camouflage", type=float, default=0.8, help="feature camouflage strength in [0, 1]")
    p.add_argument("--mean-degree", type=float, default=SyntheticConfig.mean_degree, help="mean degree per relation")
    p.add_argument("--feature-dim", type=int, default=SyntheticConfig.feature_dim, help="feature dimension")
    p.add_argument("--separation", type=float, default=SyntheticConfig.class_separation,
                   help="distance between un-camouflaged class means")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("export-embed", formatter_class=fmt, help="export raw or filtered feature matrices as CSV")
    p.add_argument("--model", required=True, help="model directory with fcf.ckpt")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--which", choices=("raw", "filtered"), default="filtered", help="matrix to export")
    p.add_argument("--out", required=True, help="output CSV file")
    p.set_defaults(func=cmd_export_embed)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InputError, GraphError, ConfigFileError, CheckpointError, MetricError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
