"""Command-line entry points: train, eval, distance, flops, gates, experiment.

Configuration comes from an optional flat key=value file plus flags; flags
override file values. Keys mirror the usual hyperparameter names (opt, lr,
bs, bptt, clip, nonmono, p, epochs, dropout, tied) plus the sparse-training
ones (sparsity, growth, removal, init, redistribution) and paths.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import analysis
from .dst_controller import DstConfig
from .experiments import PRESETS, run_experiment
from .optimizers import OptimizerConfig
from .training import TrainingConfig, evaluate, load_checkpoint, train

_GROWTH = {"random": "random", "gradient": "gradient"}
_REMOVAL = {"magnitude": "magnitude", "set": "set_style"}
_INIT = {"uniform": "uniform", "er": "erdos_renyi"}
_REDIST = {"cell-gate": "cell_gate", "none": "none"}
_OPT = {"sgd": "sgd", "momentum": "momentum_sgd", "adam": "adam",
        "nt-asgd": "nt_asgd", "snt-asgd": "snt_asgd"}


def parse_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SystemExit(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _parse_dropout(raw: str) -> float:
    """Single output-dropout rate, or a 4-tuple whose other slots must be zero."""
    parts = [p for p in raw.replace("(", "").replace(")", "").split(",") if p.strip()]
    if len(parts) == 1:
        return float(parts[0])
    if len(parts) != 4:
        raise SystemExit(f"dropout must be one rate or a 4-tuple, got {raw!r}")
    word, emb, hidden, output = (float(p) for p in parts)
    if word or emb or hidden:
        raise SystemExit(
            "only output dropout is supported at this scale; "
            "word/embedding/hidden dropout rates must be 0")
    return output


def _merge(file_values: dict[str, str], args: argparse.Namespace) -> dict:
    """File values under their documented keys; flags win when given."""
    merged = dict(file_values)
    flag_to_key = {
        "sparsity": "sparsity", "prune_rate": "p", "growth": "growth",
        "removal": "removal", "init": "init", "redistribution": "redistribution",
        "optimizer": "opt", "lr": "lr", "nonmono": "nonmono", "epochs": "epochs",
        "batch": "bs", "bptt": "bptt", "clip": "clip", "seed": "seed",
        "snapshots": "snapshots", "metrics": "metrics", "data": "data",
        "hidden": "hidden", "emb": "emb", "layers": "layers",
        "dropout": "dropout", "vocab_cap": "vocab_cap", "tied": "tied",
        "checkpoint": "checkpoint", "init_seed": "init_seed",
    }
    for flag, key in flag_to_key.items():
        value = getattr(args, flag, None)
        if value is not None:
            merged[key] = value
    return merged


def build_training_config(values: dict) -> TrainingConfig:
    def get(key, default, cast):
        raw = values.get(key, default)
        if raw is None:
            return None
        return cast(raw)

    data = values.get("data")
    paths = {}
    for split in ("train", "valid", "test"):
        explicit = values.get(f"{split}_path")
        if explicit:
            paths[split] = str(explicit)
        elif data:
            paths[split] = str(Path(data) / f"{split}.txt")
        else:
            paths[split] = None

    epochs = get("epochs", 100, int)
    dst = DstConfig(
        sparsity=get("sparsity", 0.67, float),
        initial_prune_rate=get("p", 0.7, float),
        growth_policy=_GROWTH[str(values.get("growth", "random"))],
        removal_policy=_REMOVAL[str(values.get("removal", "magnitude"))],
        init_distribution=_INIT[str(values.get("init", "uniform"))],
        redistribution=_REDIST[str(values.get("redistribution", "cell-gate"))],
        total_epochs=max(epochs, 1),
    )
    kind = _OPT[str(values.get("opt", "snt-asgd"))]
    optimizer = OptimizerConfig(
        kind=kind,
        lr=get("lr", {"adam": 0.001, "momentum_sgd": 2.0}.get(kind, 40.0), float),
        nonmono=get("nonmono", 5, int),
    )
    dropout = values.get("dropout", 0.0)
    dropout = _parse_dropout(str(dropout)) if not isinstance(dropout, float) else dropout
    tied_raw = str(values.get("tied", "no")).lower()
    return TrainingConfig(
        num_layers=get("layers", 2, int),
        hidden_size=get("hidden", 128, int),
        emb_dim=get("emb", 128, int),
        vocab_cap=get("vocab_cap", 10000, int),
        tied=tied_raw in ("yes", "true", "1"),
        train_path=paths["train"], valid_path=paths["valid"], test_path=paths["test"],
        epochs=epochs,
        batch_size=get("bs", 20, int),
        bptt=get("bptt", 35, int),
        clip_norm=get("clip", 0.25, float),
        dropout=dropout,
        seed=get("seed", 0, int),
        init_seed=get("init_seed", None, int),
        dst=dst, optimizer=optimizer,
        metrics_path=get("metrics", None, str),
        snapshot_dir=get("snapshots", None, str),
        checkpoint_path=get("checkpoint", None, str),
    )


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value configuration file")
    p.add_argument("--sparsity", type=float)
    p.add_argument("--prune-rate", dest="prune_rate", type=float)
    p.add_argument("--growth", choices=sorted(_GROWTH))
    p.add_argument("--removal", choices=sorted(_REMOVAL))
    p.add_argument("--init", choices=sorted(_INIT))
    p.add_argument("--redistribution", choices=sorted(_REDIST))
    p.add_argument("--optimizer", choices=sorted(_OPT))
    p.add_argument("--lr", type=float)
    p.add_argument("--nonmono", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--bptt", type=int)
    p.add_argument("--clip", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--snapshots", metavar="DIR", help="write per-epoch topology snapshots")
    p.add_argument("--metrics", metavar="PATH", help="write JSONL metrics stream")
    p.add_argument("--data", help="directory with train.txt/valid.txt/test.txt")
    p.add_argument("--hidden", type=int)
    p.add_argument("--emb", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--dropout", type=str)
    p.add_argument("--vocab-cap", dest="vocab_cap", type=int)
    p.add_argument("--tied", choices=("yes", "no"))
    p.add_argument("--checkpoint", help="where to write the final checkpoint")
    p.add_argument("--init-seed", dest="init_seed", type=int)


def cmd_train(args) -> int:
    file_values = parse_config_file(args.config) if args.config else {}
    config = build_training_config(_merge(file_values, args))
    result = train(config)
    if result.metrics:
        last = result.metrics[-1]
        print(f"epoch {last['epoch']}: train loss {last['train_loss']:.4f}, "
              f"valid ppl {last['valid_ppl']:.2f}, nnz {last['total_nnz']}")
    if result.checkpoint_path:
        print(f"checkpoint written to {result.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    loss, ppl = evaluate(args.checkpoint, args.split)
    print(f"{args.split}: loss {loss:.6f}, perplexity {ppl:.4f}")
    return 0


def cmd_distance(args) -> int:
    if args.files:
        if len(args.files) != 2:
            raise SystemExit("distance expects exactly two snapshot files")
        s1 = analysis.TopologySnapshot.load(args.files[0])
        s2 = analysis.TopologySnapshot.load(args.files[1])
        print(f"{analysis.topology_distance(s1, s2):.6f}")
        return 0
    snap_dir = Path(args.snapshots)
    files = sorted(snap_dir.glob("epoch_*.mask"))
    if not files:
        raise SystemExit(f"no snapshots found under {snap_dir}")
    base = analysis.TopologySnapshot.load(
        snap_dir / f"epoch_{args.baseline:04d}.mask")
    records = []
    for f in files:
        snap = analysis.TopologySnapshot.load(f)
        records.append({"baseline_epoch": args.baseline, "epoch": snap.epoch,
                        "distance": analysis.topology_distance(base, snap)})
        print(f"epoch {snap.epoch:4d}: {records[-1]['distance']:.6f}")
    if args.out:
        analysis.write_records(records, f"{args.out}.jsonl", f"{args.out}.csv")
    return 0


def cmd_flops(args) -> int:
    records = []
    for s in args.sparsity:
        for method in analysis.FLOPS_METHODS:
            kwargs = {}
            if method == "iss_or_pruning":
                kwargs["s_t"] = 1.0 - s
            elif method == "rigl":
                kwargs.update(sparsity=s, delta_t=args.delta_t)
            elif method != "dense":
                kwargs["sparsity"] = s
            ratio = analysis.training_flops_ratio(method, **kwargs)
            records.append({"method": method, "sparsity": s, "train_ratio": ratio})
            print(f"S={s:.2f} {method:>15s}: {ratio:.4f}x dense")
    if args.out:
        analysis.write_records(records, f"{args.out}.jsonl", f"{args.out}.csv")
    return 0


def cmd_gates(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    model = checkpoint.build_model()
    records = analysis.gate_sparsity_breakdown(model)
    for r in records:
        print(f"lstm{r['layer']}.{r['tensor']}.{r['gate']}: "
              f"sparsity {r['sparsity']:.4f} ({r['nnz']}/{r['size']})")
    if args.out:
        analysis.write_records(records, f"{args.out}.jsonl", f"{args.out}.csv")
    return 0


def cmd_experiment(args) -> int:
    bundle = run_experiment(args.preset, seed=args.seed, out_dir=args.out,
                            data_dir=args.data)
    print(json.dumps({k: v for k, v in bundle.items() if k != "records"},
                     indent=2, default=str))
    print(f"bundle written under {args.out}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="sparse-rnn",
        description="Dynamic sparse training for recurrent language models")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model")
    _add_train_flags(p_train)
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p_eval.set_defaults(fn=cmd_eval)

    p_dist = sub.add_parser("distance", help="topological distance between snapshots")
    p_dist.add_argument("files", nargs="*", help="two snapshot files")
    p_dist.add_argument("--snapshots", help="snapshot directory (curve mode)")
    p_dist.add_argument("--baseline", type=int, default=5,
                        help="baseline epoch for curve mode")
    p_dist.add_argument("--out", help="output path prefix for JSONL/CSV")
    p_dist.set_defaults(fn=cmd_distance)

    p_flops = sub.add_parser("flops", help="training-cost model per method")
    p_flops.add_argument("--sparsity", type=float, action="append", required=True)
    p_flops.add_argument("--delta-t", dest="delta_t", type=int, default=100)
    p_flops.add_argument("--out", help="output path prefix for JSONL/CSV")
    p_flops.set_defaults(fn=cmd_flops)

    p_gates = sub.add_parser("gates", help="per-gate sparsity breakdown")
    p_gates.add_argument("--checkpoint", required=True)
    p_gates.add_argument("--out", help="output path prefix for JSONL/CSV")
    p_gates.set_defaults(fn=cmd_gates)

    p_exp = sub.add_parser("experiment", help="run a preset experiment grid")
    p_exp.add_argument("preset", choices=PRESETS)
    p_exp.add_argument("--seed", type=int, required=True)
    p_exp.add_argument("--data", help="corpus directory (synthetic corpus if omitted)")
    p_exp.add_argument("--out", default="experiments", help="output directory")
    p_exp.set_defaults(fn=cmd_experiment)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
