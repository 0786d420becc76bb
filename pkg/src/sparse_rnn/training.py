"""End-to-end training orchestration: the per-epoch loop (optimizer steps,
validation/trigger check, connectivity update), metrics emission, topology
snapshots, and integrity-checked single-file checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analysis
from .corpus import Corpus, batchify, encode, load_corpus
from .dst_controller import DstConfig, epoch_update
from .optimizers import Optimizer, OptimizerConfig, make_optimizer
from .rnn_model import (
    LanguageModel,
    backward,
    clip_gradients,
    cross_entropy_sum,
    forward,
)

METRICS_SCHEMA = "metrics-v1"
CHECKPOINT_SCHEMA = "checkpoint-v1"


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, window: int, message: str):
        super().__init__(f"epoch {epoch}, window {window}: {message}")
        self.epoch = epoch
        self.window = window


@dataclass
class TrainingConfig:
    """Everything one run needs; nested DST and optimizer settings included."""

    # model
    num_layers: int = 2
    hidden_size: int = 128
    emb_dim: int = 128
    vocab_cap: int | None = 10000
    tied: bool = False
    # data
    train_path: str | None = None
    valid_path: str | None = None
    test_path: str | None = None
    # loop
    epochs: int = 100
    batch_size: int = 20
    bptt: int = 35
    clip_norm: float = 0.25
    dropout: float = 0.0
    seed: int = 0
    init_seed: int | None = None
    # components
    dst: DstConfig = None
    optimizer: OptimizerConfig = None
    # outputs
    metrics_path: str | None = None
    snapshot_dir: str | None = None
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.dst is None:
            self.dst = DstConfig(total_epochs=max(self.epochs, 1))
        if self.optimizer is None:
            self.optimizer = OptimizerConfig()
        for name in ("num_layers", "hidden_size", "emb_dim", "epochs", "batch_size", "bptt"):
            if getattr(self, name) < 0 or (name not in ("epochs",) and getattr(self, name) == 0):
                raise ValueError(f"{name} must be positive")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        d = dict(d)
        d["dst"] = DstConfig(**d["dst"])
        d["optimizer"] = OptimizerConfig(**d["optimizer"])
        return cls(**d)

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


@dataclass
class TrainResult:
    model: LanguageModel
    optimizer: Optimizer
    corpus: Corpus
    config: TrainingConfig
    metrics: list[dict]
    trigger_epoch: int | None
    checkpoint_path: str | None


def _rngs(config: TrainingConfig):
    init_entropy = config.init_seed if config.init_seed is not None else config.seed
    init_rng = np.random.default_rng(np.random.SeedSequence([init_entropy, 0]))
    dropout_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    growth_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    return init_rng, dropout_rng, growth_rng


def build_model(config: TrainingConfig, vocab_size: int,
                init_rng: np.random.Generator) -> LanguageModel:
    from .dst_controller import init_model_sparsity

    model = LanguageModel(vocab_size, config.emb_dim, config.hidden_size,
                          config.num_layers, config.tied, init_rng)
    init_model_sparsity(model, config.dst, init_rng)
    return model


@contextmanager
def _swapped_parameters(model: LanguageModel, override: dict[str, np.ndarray]):
    """Temporarily substitute parameter values, restoring them bitwise after."""
    params = model.parameters()
    saved = {name: params[name].copy() for name in override}
    try:
        for name, value in override.items():
            params[name][:] = value
        model.apply_masks()
        yield
    finally:
        for name, value in saved.items():
            params[name][:] = value


def eval_split(model: LanguageModel, batches) -> tuple[float, float]:
    """Token-weighted mean NLL and perplexity over a batched split, no dropout."""
    if not batches:
        raise ValueError("no batches to evaluate")
    state = model.zero_hidden_state(batches[0].inputs.shape[1])
    total, count = 0.0, 0
    for batch in batches:
        logits, state, _ = forward(model, batch, state)
        nll, n = cross_entropy_sum(logits, batch.targets)
        total += nll
        count += n
    mean = total / count
    return mean, float(np.exp(mean))


def evaluate_with_view(model: LanguageModel, optimizer: Optimizer, batches
                       ) -> tuple[float, float]:
    """Validation-time evaluation: averaged parameters once the trigger is on."""
    if optimizer.trigger_active:
        view = optimizer.averaged_parameters(model.parameters(), model.masks())
        with _swapped_parameters(model, view):
            return eval_split(model, batches)
    return eval_split(model, batches)


def _gate_sparsity_flat(model: LanguageModel) -> dict[str, float]:
    return {f"lstm{r['layer']}.{r['tensor']}.{r['gate']}": r["sparsity"]
            for r in analysis.gate_sparsity_breakdown(model)}


def _layer_nnz(model: LanguageModel) -> dict[str, int]:
    nnz = {f"lstm{l}": layer.input_weights.nnz() + layer.hidden_weights.nnz()
           for l, layer in enumerate(model.layers)}
    nnz["embedding"] = model.embedding.nnz()
    if not model.tied:
        nnz["decoder"] = model.decoder.nnz()
    return nnz


def train(config: TrainingConfig, corpus: Corpus | None = None,
          epoch_callback=None) -> TrainResult:
    """Run the full training loop and return the trained state.

    Per epoch: iterate BPTT windows (forward, backward, clip, step, mask),
    validate (averaged view once triggered), trigger check, connectivity
    update, then metrics/snapshot emission. epoch_callback(result-like dict)
    runs after each epoch for experiment instrumentation.
    """
    if corpus is None:
        if not (config.train_path and config.valid_path and config.test_path):
            raise ValueError("either a corpus or all three split paths are required")
        corpus = load_corpus(config.train_path, config.valid_path, config.test_path,
                             config.vocab_cap)

    init_rng, dropout_rng, growth_rng = _rngs(config)
    model = build_model(config, corpus.vocab_size, init_rng)
    optimizer = make_optimizer(config.optimizer, model.parameters(), model.masks())

    train_batches = batchify(corpus.train, config.batch_size, config.bptt)
    valid_batches = batchify(corpus.valid, config.batch_size, config.bptt)
    digest = config.digest()

    snapshot_dir = Path(config.snapshot_dir) if config.snapshot_dir else None
    if snapshot_dir:
        snapshot_dir.mkdir(parents=True, exist_ok=True)
        analysis.TopologySnapshot.from_model(model, 0, digest).save(
            snapshot_dir / "epoch_0000.mask")

    metrics_fh = open(config.metrics_path, "w") if config.metrics_path else None
    metrics: list[dict] = []
    trigger_epoch: int | None = None
    want_dense = config.dst.growth_policy == "gradient"
    params = model.parameters()

    try:
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            state = model.zero_hidden_state(config.batch_size)
            nll_total, tok_total = 0.0, 0
            last_dense = None
            for wi, batch in enumerate(train_batches):
                logits, state, cache = forward(
                    model, batch, state, config.dropout, dropout_rng, training=True)
                nll, n = cross_entropy_sum(logits, batch.targets)
                if not np.isfinite(nll):
                    raise TrainingDiverged(epoch, wi, "non-finite training loss")
                grads, dense = backward(
                    model, cache, logits, batch.targets,
                    want_dense=want_dense and wi == len(train_batches) - 1)
                clip_gradients(grads, config.clip_norm)
                optimizer.step(params, grads)
                nll_total += nll
                tok_total += n
                if dense is not None:
                    last_dense = dense
            train_loss = nll_total / tok_total

            valid_loss, valid_ppl = evaluate_with_view(model, optimizer, valid_batches)
            was_active = optimizer.trigger_active
            optimizer.check_trigger(valid_loss)
            if optimizer.trigger_active and not was_active:
                trigger_epoch = epoch

            reports = epoch_update(model, epoch, config.dst, growth_rng,
                                   dense_grads=last_dense, optimizer=optimizer)
            prune_rate = reports[0].prune_rate if reports else 0.0

            record = {
                "schema": METRICS_SCHEMA,
                "epoch": epoch,
                "train_loss": train_loss,
                "valid_loss": valid_loss,
                "valid_ppl": valid_ppl,
                "trigger_active": optimizer.trigger_active,
                "prune_rate": prune_rate,
                "total_nnz": model.total_nnz(),
                "layer_nnz": _layer_nnz(model),
                "gate_sparsity": _gate_sparsity_flat(model),
                "wall_time_s": time.perf_counter() - t0,
            }
            metrics.append(record)
            if metrics_fh:
                metrics_fh.write(json.dumps(record) + "\n")
                metrics_fh.flush()
            if snapshot_dir:
                analysis.TopologySnapshot.from_model(model, epoch, digest).save(
                    snapshot_dir / f"epoch_{epoch:04d}.mask")
            if epoch_callback is not None:
                epoch_callback(model=model, optimizer=optimizer, epoch=epoch,
                               record=record, reports=reports)
    finally:
        if metrics_fh:
            metrics_fh.close()

    checkpoint_path = None
    if config.checkpoint_path:
        rng_state = {"dropout": dropout_rng.bit_generator.state,
                     "growth": growth_rng.bit_generator.state}
        save_checkpoint(config.checkpoint_path, model, optimizer, config,
                        corpus.vocab, rng_state, trigger_epoch)
        checkpoint_path = config.checkpoint_path

    return TrainResult(model=model, optimizer=optimizer, corpus=corpus,
                       config=config, metrics=metrics,
                       trigger_epoch=trigger_epoch,
                       checkpoint_path=checkpoint_path)


# ---------------------------------------------------------------------------
# checkpoints: npz payload plus a trailing sha256 for integrity
# ---------------------------------------------------------------------------

_SHA_LEN = 32


@dataclass
class Checkpoint:
    config: TrainingConfig
    digest: str
    vocab: list[str]
    params: dict[str, np.ndarray]
    masks: dict[str, np.ndarray]
    averaged: dict[str, np.ndarray]
    optimizer_scalars: dict
    optimizer_arrays: dict[str, np.ndarray]
    rng_state: dict
    trigger_epoch: int | None

    @property
    def trigger_active(self) -> bool:
        return bool(self.optimizer_scalars["trigger_active"])

    def build_model(self) -> LanguageModel:
        model = LanguageModel(len(self.vocab), self.config.emb_dim,
                              self.config.hidden_size, self.config.num_layers,
                              self.config.tied, np.random.default_rng(0))
        params = model.parameters()
        masks = model.masks()
        for name, value in self.params.items():
            params[name][:] = value
        for name, mask in self.masks.items():
            masks[name][:] = mask
        model.apply_masks()
        return model

    def build_optimizer(self, model: LanguageModel) -> Optimizer:
        optimizer = make_optimizer(self.config.optimizer, model.parameters(), model.masks())
        optimizer.load_state_dict(self.optimizer_scalars, self.optimizer_arrays)
        return optimizer


def save_checkpoint(path: str | Path, model: LanguageModel, optimizer: Optimizer,
                    config: TrainingConfig, vocab: list[str], rng_state: dict,
                    trigger_epoch: int | None) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, p in model.parameters().items():
        arrays[f"param__{name}"] = p
    for name, t in model.sparse_tensors().items():
        arrays[f"mask__{name}"] = t.mask
    averaged = optimizer.averaged_parameters(model.parameters(), model.masks())
    for name, p in averaged.items():
        arrays[f"avg__{name}"] = p
    scalars, opt_arrays = optimizer.state_dict()
    for name, a in opt_arrays.items():
        arrays[f"opt__{name}"] = a

    meta = {"schema": CHECKPOINT_SCHEMA,
            "config": config.to_dict(),
            "digest": config.digest(),
            "vocab": vocab,
            "optimizer_scalars": scalars,
            "rng_state": rng_state,
            "trigger_epoch": trigger_epoch}
    arrays["__meta__"] = np.array(json.dumps(meta))

    buf = io.BytesIO()
    np.savez(buf, **arrays)
    payload = buf.getvalue()
    checksum = hashlib.sha256(payload).digest()
    Path(path).write_bytes(payload + checksum)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    payload, checksum = raw[:-_SHA_LEN], raw[-_SHA_LEN:]
    if hashlib.sha256(payload).digest() != checksum:
        raise ValueError(f"checkpoint {path} failed its integrity check")
    data = np.load(io.BytesIO(payload))
    meta = json.loads(str(data["__meta__"]))
    params, masks, averaged, opt_arrays = {}, {}, {}, {}
    for key in data.files:
        if key == "__meta__":
            continue
        prefix, name = key.split("__", 1)
        {"param": params, "mask": masks, "avg": averaged, "opt": opt_arrays}[prefix][name] = data[key]
    return Checkpoint(config=TrainingConfig.from_dict(meta["config"]),
                      digest=meta["digest"], vocab=meta["vocab"],
                      params=params, masks=masks, averaged=averaged,
                      optimizer_scalars=meta["optimizer_scalars"],
                      optimizer_arrays=opt_arrays,
                      rng_state=meta["rng_state"],
                      trigger_epoch=meta["trigger_epoch"])


def evaluate(checkpoint: Checkpoint | str | Path, split: str = "valid",
             tokens: np.ndarray | None = None) -> tuple[float, float]:
    """Loss and perplexity of a checkpointed model on a split.

    Uses the stored averaged view when the checkpoint's trigger was active,
    raw weights otherwise; dropout off. `tokens` overrides re-reading the
    split file named in the checkpoint's config (they must be encoded with
    the checkpoint's vocabulary).
    """
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint)
    config = checkpoint.config
    if tokens is None:
        path = {"train": config.train_path, "valid": config.valid_path,
                "test": config.test_path}[split]
        if path is None:
            raise ValueError(f"checkpoint config has no path for split {split!r}")
        token_to_id = {t: i for i, t in enumerate(checkpoint.vocab)}
        from .corpus import read_tokens
        tokens = encode(read_tokens(path), token_to_id)
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and tokens.max() >= len(checkpoint.vocab):
        raise ValueError("token ids exceed the checkpoint vocabulary")

    model = checkpoint.build_model()
    if checkpoint.trigger_active:
        params = model.parameters()
        for name, value in checkpoint.averaged.items():
            params[name][:] = value
        model.apply_masks()
    batches = batchify(tokens, config.batch_size, config.bptt)
    return eval_split(model, batches)
