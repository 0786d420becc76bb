"""Preset experiment grids at desk scale.

Each preset trains a small matrix of configurations with shared seeds,
feeds the results through the analysis tooling, and writes a consolidated
bundle (JSONL and CSV) for external plotting. Independent runs may execute
in parallel; the SELFISH_DST_THREADS environment variable caps the worker
count (default 1, fully serial).
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis
from .corpus import generate_synthetic_corpus, load_corpus
from .dst_controller import DstConfig
from .optimizers import OptimizerConfig
from .training import TrainingConfig, TrainResult, train

PRESETS = ("optimizer_grid", "growth_comparison", "init_comparison",
           "static_vs_dynamic", "snt_asgd_mechanism")

# lr per optimizer kind at desk scale (Table-style defaults are for the
# full-size models; these are tuned for the small reference model)
DESK_LR = {"sgd": 2.0, "momentum_sgd": 2.0, "adam": 0.001,
           "nt_asgd": 4.0, "snt_asgd": 4.0}


def _max_workers() -> int:
    return max(1, int(os.environ.get("SELFISH_DST_THREADS", "1")))


def _map_runs(fn, items):
    workers = _max_workers()
    if workers == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _data_paths(out_dir: Path, data_dir: str | None, seed: int,
                corpus_kwargs: dict | None = None) -> dict[str, Path]:
    if data_dir is not None:
        base = Path(data_dir)
        paths = {name: base / f"{name}.txt" for name in ("train", "valid", "test")}
        missing = [str(p) for p in paths.values() if not p.exists()]
        if missing:
            raise FileNotFoundError(f"missing corpus files: {missing}")
        return paths
    return generate_synthetic_corpus(out_dir / "corpus", seed=seed,
                                     **(corpus_kwargs or {}))


def desk_config(paths: dict[str, Path], seed: int, out_dir: Path, run_name: str,
                **overrides) -> TrainingConfig:
    """Small reference configuration: minutes-scale runs, full algorithm surface."""
    run_dir = out_dir / run_name
    run_dir.mkdir(parents=True, exist_ok=True)
    # copy nested dicts: the same overrides feed several runs
    dst_kwargs = dict(overrides.pop("dst_kwargs", {}))
    opt_kwargs = dict(overrides.pop("opt_kwargs", {}))
    epochs = overrides.pop("epochs", 20)
    dst = DstConfig(sparsity=dst_kwargs.pop("sparsity", 0.67),
                    initial_prune_rate=dst_kwargs.pop("initial_prune_rate", 0.5),
                    total_epochs=dst_kwargs.pop("total_epochs", epochs),
                    **dst_kwargs)
    kind = opt_kwargs.pop("kind", "snt_asgd")
    opt = OptimizerConfig(kind=kind, lr=opt_kwargs.pop("lr", DESK_LR[kind]),
                          nonmono=opt_kwargs.pop("nonmono", 5), **opt_kwargs)
    return TrainingConfig(
        num_layers=2, hidden_size=overrides.pop("hidden_size", 64),
        emb_dim=overrides.pop("emb_dim", 64), vocab_cap=10000, tied=False,
        train_path=str(paths["train"]), valid_path=str(paths["valid"]),
        test_path=str(paths["test"]),
        epochs=epochs, batch_size=overrides.pop("batch_size", 20),
        bptt=overrides.pop("bptt", 35), clip_norm=0.25,
        dropout=overrides.pop("dropout", 0.0),
        seed=seed, init_seed=overrides.pop("init_seed", None),
        dst=dst, optimizer=opt,
        metrics_path=str(run_dir / "metrics.jsonl"),
        snapshot_dir=overrides.pop("snapshot_dir", None),
        checkpoint_path=str(run_dir / "model.ckpt"),
        **overrides)


def count_large_averaged_weights(model, optimizer, threshold: float = 0.1) -> int:
    """How many LSTM weights exceed the threshold in the masked averaged view."""
    view = optimizer.averaged_parameters(model.parameters(), model.masks())
    total = 0
    for l in range(len(model.layers)):
        for tname in ("ih", "hh"):
            name = f"lstm{l}.{tname}"
            mask = model.masks()[name]
            total += int(((np.abs(view[name]) > threshold) & (mask == 1.0)).sum())
    return total


def _final(result: TrainResult, key: str):
    return result.metrics[-1][key] if result.metrics else None


def _write_bundle(out_dir: Path, preset: str, records: list[dict],
                  extra: dict | None = None) -> dict:
    bundle = {"preset": preset, "records": records}
    if extra:
        bundle.update(extra)
    analysis.write_records(records, out_dir / "bundle.jsonl", out_dir / "bundle.csv")
    with open(out_dir / "bundle.json", "w") as fh:
        json.dump(bundle, fh, indent=2, default=str)
    return bundle


def _flops_table(sparsities=(0.67, 0.62, 0.53, 0.68), delta_t: int = 100) -> list[dict]:
    rows = []
    for s in sparsities:
        for method in analysis.FLOPS_METHODS:
            kwargs = {"sparsity": s}
            if method == "dense":
                kwargs = {}
            elif method == "iss_or_pruning":
                kwargs = {"s_t": 1.0 - s}
            elif method == "rigl":
                kwargs["delta_t"] = delta_t
            rows.append({"method": method, "sparsity": s,
                         "train_ratio": analysis.training_flops_ratio(method, **kwargs)})
    return rows


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def _optimizer_grid(out_dir: Path, seed: int, paths, overrides) -> dict:
    kinds = ("sgd", "momentum_sgd", "adam", "nt_asgd", "snt_asgd")
    configs = [desk_config(paths, seed, out_dir, f"opt_{kind}",
                           opt_kwargs={"kind": kind}, **overrides)
               for kind in kinds]
    results = _map_runs(train, configs)
    records = [{"optimizer": kind,
                "final_valid_ppl": _final(res, "valid_ppl"),
                "final_valid_loss": _final(res, "valid_loss"),
                "trigger_epoch": res.trigger_epoch}
               for kind, res in zip(kinds, results)]
    return _write_bundle(out_dir, "optimizer_grid", records,
                         {"flops_table": _flops_table()})


def _paired_runs(out_dir: Path, seed: int, paths, policy: str, n_pairs: int,
                 overrides) -> list[tuple[TrainResult, TrainResult]]:
    """Same-init run pairs (shared init seed, different training seeds)."""
    configs = []
    for pair in range(n_pairs):
        init_seed = seed * 1000 + pair
        for side in range(2):
            run_seed = seed * 100 + pair * 10 + side + 1
            name = f"{policy}_pair{pair}_run{side}"
            configs.append(desk_config(
                paths, run_seed, out_dir, name, init_seed=init_seed,
                snapshot_dir=str(out_dir / name / "snapshots"),
                dst_kwargs={"growth_policy": policy, **overrides.get("dst_kwargs", {})},
                **{k: v for k, v in overrides.items() if k != "dst_kwargs"}))
    results = _map_runs(train, configs)
    return [(results[2 * i], results[2 * i + 1]) for i in range(n_pairs)]


def _pair_distance(res_a: TrainResult, res_b: TrainResult,
                   probe_tokens: np.ndarray) -> dict:
    """Final-epoch topological distance with activation-based unit alignment."""
    alignment = {}
    for l in range(len(res_a.model.layers)):
        act_a = analysis.collect_hidden_activations(res_a.model, probe_tokens, l)
        act_b = analysis.collect_hidden_activations(res_b.model, probe_tokens, l)
        alignment[l] = analysis.semi_match(act_a, act_b)
    epoch = res_a.config.epochs
    snap_a = analysis.TopologySnapshot.load(
        Path(res_a.config.snapshot_dir) / f"epoch_{epoch:04d}.mask")
    snap_b = analysis.TopologySnapshot.load(
        Path(res_b.config.snapshot_dir) / f"epoch_{epoch:04d}.mask")
    curve = []
    for e in range(0, epoch + 1):
        s_a = analysis.TopologySnapshot.load(
            Path(res_a.config.snapshot_dir) / f"epoch_{e:04d}.mask")
        s_b = analysis.TopologySnapshot.load(
            Path(res_b.config.snapshot_dir) / f"epoch_{e:04d}.mask")
        curve.append(analysis.topology_distance(s_a, s_b, alignment))
    return {"final_distance": analysis.topology_distance(snap_a, snap_b, alignment),
            "distance_curve": curve}


def _growth_comparison(out_dir: Path, seed: int, paths, overrides) -> dict:
    n_pairs = overrides.pop("n_pairs", 3)
    policies = overrides.pop("policies", ("random", "gradient"))
    probe = _probe_tokens(paths, overrides)
    records = []
    details = {}
    for policy in policies:
        pairs = _paired_runs(out_dir, seed, paths, policy, n_pairs, overrides)
        dists = []
        for i, (a, b) in enumerate(pairs):
            d = _pair_distance(a, b, probe)
            dists.append(d["final_distance"])
            details[f"{policy}_pair{i}"] = d["distance_curve"]
            records.append({"policy": policy, "pair": i,
                            "final_distance": d["final_distance"],
                            "final_valid_ppl_a": _final(a, "valid_ppl"),
                            "final_valid_ppl_b": _final(b, "valid_ppl")})
        records.append({"policy": policy, "pair": "mean",
                        "final_distance": float(np.mean(dists)),
                        "final_valid_ppl_a": None, "final_valid_ppl_b": None})
    return _write_bundle(out_dir, "growth_comparison", records,
                         {"distance_curves": details})


def _probe_tokens(paths, overrides, n: int = 2000) -> np.ndarray:
    corpus = load_corpus(paths["train"], paths["valid"], paths["test"])
    return corpus.valid[:n]


def _init_comparison(out_dir: Path, seed: int, paths, overrides) -> dict:
    records = []
    for dist in ("uniform", "erdos_renyi"):
        config = desk_config(paths, seed, out_dir, f"init_{dist}",
                             dst_kwargs={"init_distribution": dist}, **overrides)
        res = train(config)
        records.append({"init_distribution": dist,
                        "final_valid_ppl": _final(res, "valid_ppl"),
                        "total_nnz": _final(res, "total_nnz")})
    return _write_bundle(out_dir, "init_comparison", records)


def _static_vs_dynamic(out_dir: Path, seed: int, paths, overrides) -> dict:
    n_seeds = overrides.pop("n_seeds", 3)
    records = []
    means = {}
    for method, prune in (("selfish", None), ("static_uniform", 0.0)):
        ppls = []
        for i in range(n_seeds):
            dst_kwargs = {} if prune is None else {"initial_prune_rate": prune}
            config = desk_config(paths, seed + i, out_dir, f"{method}_seed{i}",
                                 dst_kwargs=dst_kwargs, **overrides)
            res = train(config)
            ppl = _final(res, "valid_ppl")
            ppls.append(ppl)
            records.append({"method": method, "seed": seed + i,
                            "final_valid_ppl": ppl,
                            "total_nnz": _final(res, "total_nnz")})
        means[method] = float(np.mean(ppls))
        records.append({"method": method, "seed": "mean",
                        "final_valid_ppl": means[method], "total_nnz": None})
    return _write_bundle(out_dir, "static_vs_dynamic", records, {"means": means})


def _snt_asgd_mechanism(out_dir: Path, seed: int, paths, overrides) -> dict:
    threshold = overrides.pop("threshold", 0.1)
    records = []
    counts = {}
    triggers = {}
    for kind in ("nt_asgd", "snt_asgd"):
        per_epoch: list[int] = []

        def callback(model, optimizer, epoch, record, reports):
            per_epoch.append(count_large_averaged_weights(model, optimizer, threshold))

        config = desk_config(paths, seed, out_dir, f"mech_{kind}",
                             init_seed=seed,
                             opt_kwargs={"kind": kind,
                                         **overrides.get("opt_kwargs", {})},
                             **{k: v for k, v in overrides.items() if k != "opt_kwargs"})
        res = train(config, epoch_callback=callback)
        counts[kind] = per_epoch
        triggers[kind] = res.trigger_epoch
        records.append({"optimizer": kind, "trigger_epoch": res.trigger_epoch,
                        "count_at_trigger": per_epoch[res.trigger_epoch - 1]
                        if res.trigger_epoch else None,
                        "count_at_final": per_epoch[-1] if per_epoch else None,
                        "final_valid_ppl": _final(res, "valid_ppl")})
    return _write_bundle(out_dir, "snt_asgd_mechanism", records,
                         {"counts": counts, "trigger_epochs": triggers})


_PRESET_FNS = {
    "optimizer_grid": _optimizer_grid,
    "growth_comparison": _growth_comparison,
    "init_comparison": _init_comparison,
    "static_vs_dynamic": _static_vs_dynamic,
    "snt_asgd_mechanism": _snt_asgd_mechanism,
}


def run_experiment(preset: str, seed: int, out_dir: str | Path,
                   data_dir: str | None = None, **overrides) -> dict:
    """Run one preset's configuration matrix and write its report bundle.

    With no data_dir, a deterministic synthetic corpus is generated under
    the output directory so the presets are runnable out of the box.
    """
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {PRESETS}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus_kwargs = overrides.pop("corpus_kwargs", None)
    paths = _data_paths(out_dir, data_dir, seed, corpus_kwargs)
    return _PRESET_FNS[preset](out_dir, seed, paths, overrides)
