import json

import numpy as np
import pytest

from sparse_rnn.analysis import TopologySnapshot, topology_distance
from sparse_rnn.corpus import (
    EOS,
    UNK,
    batchify,
    build_vocab,
    generate_synthetic_corpus,
    load_corpus,
)
from sparse_rnn.dst_controller import DstConfig
from sparse_rnn.optimizers import OptimizerConfig
from sparse_rnn.rnn_model import BpttBatch, forward, cross_entropy_sum
from sparse_rnn.training import (
    TrainingConfig,
    eval_split,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    generate_synthetic_corpus(out, seed=7, vocab_size=25, train_tokens=4000,
                              valid_tokens=1200, test_tokens=1200)
    return out


def tiny_config(corpus_dir, tmp_path, **kw):
    dst_kwargs = kw.pop("dst_kwargs", {})
    opt_kwargs = kw.pop("opt_kwargs", {})
    epochs = kw.pop("epochs", 2)
    dst_settings = dict(sparsity=0.5, initial_prune_rate=0.5, total_epochs=max(epochs, 1))
    dst_settings.update(dst_kwargs)
    opt_settings = dict(kind="snt_asgd", lr=2.0)
    opt_settings.update(opt_kwargs)
    defaults = dict(
        num_layers=2, hidden_size=16, emb_dim=16, vocab_cap=None, tied=False,
        train_path=str(corpus_dir / "train.txt"),
        valid_path=str(corpus_dir / "valid.txt"),
        test_path=str(corpus_dir / "test.txt"),
        epochs=epochs, batch_size=4, bptt=10, seed=1,
        dst=DstConfig(**dst_settings),
        optimizer=OptimizerConfig(**opt_settings),
        checkpoint_path=str(tmp_path / "model.ckpt"),
        metrics_path=str(tmp_path / "metrics.jsonl"),
    )
    defaults.update(kw)
    return TrainingConfig(**defaults)


# ---------------------------------------------------------------------------
# corpus loading and batching
# ---------------------------------------------------------------------------

def test_load_corpus_basic(tmp_path):
    (tmp_path / "train.txt").write_text("a b a\n")
    (tmp_path / "valid.txt").write_text("a c\n")
    (tmp_path / "test.txt").write_text("b\n")
    corpus = load_corpus(tmp_path / "train.txt", tmp_path / "valid.txt",
                         tmp_path / "test.txt")
    assert set(corpus.vocab) == {"a", "b", EOS, UNK}
    ids = corpus.token_to_id
    assert corpus.train.tolist() == [ids["a"], ids["b"], ids["a"], ids[EOS]]
    # 'c' unseen in train -> unk
    assert corpus.valid.tolist() == [ids["a"], ids[UNK], ids[EOS]]


def test_vocab_deterministic_and_frequency_sorted():
    tokens = ["b", "a", "a", "c", "b", "a"]
    v1 = build_vocab(tokens)
    v2 = build_vocab(list(tokens))
    assert v1 == v2
    assert v1[0] == "a"          # most frequent first
    assert v1.index("b") < v1.index("c")  # ties broken lexicographically


def test_vocab_cap_maps_rarest_to_unk():
    tokens = ["a"] * 5 + ["b"] * 3 + ["c"] * 2 + ["d"]
    vocab = build_vocab(tokens, vocab_cap=3)
    assert len(vocab) == 3
    assert UNK in vocab
    assert "a" in vocab and "b" in vocab
    assert "c" not in vocab and "d" not in vocab


def test_empty_train_split_rejected(tmp_path):
    for name in ("train", "valid", "test"):
        (tmp_path / f"{name}.txt").write_text("")
    with pytest.raises(ValueError):
        load_corpus(tmp_path / "train.txt", tmp_path / "valid.txt", tmp_path / "test.txt")


def test_batchify_window_shapes():
    batches = batchify(np.arange(10), batch_size=2, bptt=3)
    assert [b.inputs.shape for b in batches] == [(3, 2), (1, 2)]
    assert [b.targets.shape for b in batches] == [(3, 2), (1, 2)]


def test_batchify_single_window_when_bptt_large():
    batches = batchify(np.arange(10), batch_size=2, bptt=50)
    assert len(batches) == 1
    assert batches[0].inputs.shape == (4, 2)


def test_batchify_targets_are_shifted_stream():
    tokens = np.arange(20)
    batches = batchify(tokens, batch_size=2, bptt=3)
    stream = tokens[:20].reshape(2, 10).T
    inputs = np.concatenate([b.inputs for b in batches])
    targets = np.concatenate([b.targets for b in batches])
    assert np.array_equal(inputs, stream[:-1])
    assert np.array_equal(targets, stream[1:])


def test_batchify_too_small():
    with pytest.raises(ValueError):
        batchify(np.arange(3), batch_size=2, bptt=3)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def test_zero_epochs_emits_only_init_snapshot(corpus_dir, tmp_path):
    config = tiny_config(corpus_dir, tmp_path, epochs=0,
                         snapshot_dir=str(tmp_path / "snaps"))
    result = train(config)
    assert result.metrics == []
    snaps = sorted((tmp_path / "snaps").glob("*.mask"))
    assert [s.name for s in snaps] == ["epoch_0000.mask"]
    # model is freshly initialized, untouched by training
    assert result.optimizer.iteration == 0


def test_static_run_masks_never_change(corpus_dir, tmp_path):
    config = tiny_config(corpus_dir, tmp_path, epochs=3,
                         dst_kwargs={"initial_prune_rate": 0.0},
                         snapshot_dir=str(tmp_path / "snaps"))
    train(config)
    snaps = [TopologySnapshot.load(p)
             for p in sorted((tmp_path / "snaps").glob("*.mask"))]
    assert len(snaps) == 4
    for a in snaps:
        for b in snaps:
            assert topology_distance(a, b) == 0.0


def test_total_nnz_constant_in_metrics(corpus_dir, tmp_path):
    config = tiny_config(corpus_dir, tmp_path, epochs=3)
    result = train(config)
    counts = {m["total_nnz"] for m in result.metrics}
    assert len(counts) == 1


def test_seeded_runs_bitwise_identical(corpus_dir, tmp_path):
    streams = []
    for run in range(2):
        config = tiny_config(corpus_dir, tmp_path / f"run{run}", epochs=3)
        (tmp_path / f"run{run}").mkdir(exist_ok=True)
        result = train(config)
        lines = []
        for record in result.metrics:
            record = {k: v for k, v in record.items() if k != "wall_time_s"}
            lines.append(json.dumps(record, sort_keys=True))
        streams.append("\n".join(lines))
    assert streams[0] == streams[1]


def test_metrics_stream_schema(corpus_dir, tmp_path):
    config = tiny_config(corpus_dir, tmp_path, epochs=2)
    train(config)
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2
    for i, line in enumerate(lines, 1):
        rec = json.loads(line)
        assert rec["schema"] == "metrics-v1"
        assert rec["epoch"] == i
        for key in ("train_loss", "valid_loss", "valid_ppl", "trigger_active",
                    "prune_rate", "total_nnz", "gate_sparsity", "wall_time_s"):
            assert key in rec


def test_divergence_aborts_with_location(corpus_dir, tmp_path, monkeypatch):
    import sparse_rnn.training as training_mod
    from sparse_rnn.training import TrainingDiverged

    real = training_mod.cross_entropy_sum
    calls = {"n": 0}

    def poisoned(logits, targets):
        calls["n"] += 1
        if calls["n"] == 3:
            return float("nan"), 1
        return real(logits, targets)

    monkeypatch.setattr(training_mod, "cross_entropy_sum", poisoned)
    config = tiny_config(corpus_dir, tmp_path, epochs=1)
    with pytest.raises(TrainingDiverged) as exc:
        train(config)
    assert exc.value.epoch == 1
    assert exc.value.window == 2  # zero-indexed third window


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def test_untrained_zero_decoder_ppl_equals_vocab(corpus_dir, tmp_path):
    config = tiny_config(corpus_dir, tmp_path, epochs=0)
    result = train(config)
    model = result.model
    model.decoder.values[:] = 0.0
    model.decoder.mask[:] = 1.0
    model.decoder_bias[:] = 0.0
    batches = batchify(result.corpus.valid, 4, 10)
    loss, ppl = eval_split(model, batches)
    assert ppl == pytest.approx(result.corpus.vocab_size, rel=1e-12)


def test_eval_matches_straightline_oracle(corpus_dir, tmp_path):
    config = tiny_config(corpus_dir, tmp_path, epochs=2)
    result = train(config)
    model = result.model
    tokens = result.corpus.valid
    batches = batchify(tokens, 4, 10)
    loss, _ = eval_split(model, batches)

    # window-free single pass over the same truncated streams
    n_stream = len(tokens) // 4
    data = tokens[:n_stream * 4].reshape(4, n_stream).T
    single = BpttBatch(inputs=data[:-1], targets=data[1:])
    logits, _, _ = forward(model, single, model.zero_hidden_state(4))
    nll, count = cross_entropy_sum(logits, single.targets)
    assert abs(loss - nll / count) <= 1e-10


def test_evaluate_is_deterministic_and_pure(corpus_dir, tmp_path):
    config = tiny_config(corpus_dir, tmp_path, epochs=2)
    result = train(config)
    ckpt = load_checkpoint(result.checkpoint_path)
    model = ckpt.build_model()
    params_before = {k: v.copy() for k, v in model.parameters().items()}

    r1 = evaluate(ckpt, "valid")
    r2 = evaluate(ckpt, "valid")
    assert r1 == r2
    for k, v in ckpt.build_model().parameters().items():
        assert np.array_equal(v, params_before[k])


def test_evaluate_rejects_vocab_mismatch(corpus_dir, tmp_path):
    config = tiny_config(corpus_dir, tmp_path, epochs=1)
    result = train(config)
    bad_tokens = np.array([0, 1, 10 ** 6])
    with pytest.raises(ValueError):
        evaluate(load_checkpoint(result.checkpoint_path), tokens=bad_tokens)


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_bitwise(corpus_dir, tmp_path):
    config = tiny_config(corpus_dir, tmp_path, epochs=3,
                         opt_kwargs={"kind": "snt_asgd", "lr": 2.0, "nonmono": 0})
    result = train(config)

    in_memory = evaluate_in_memory(result)
    from_disk = evaluate(result.checkpoint_path, "test")
    assert in_memory == from_disk  # bitwise-identical floats

    ckpt = load_checkpoint(result.checkpoint_path)
    for name, p in result.model.parameters().items():
        assert np.array_equal(ckpt.params[name], p)
    for name, t in result.model.sparse_tensors().items():
        assert np.array_equal(ckpt.masks[name], t.mask)
    assert ckpt.digest == config.digest()
    assert ckpt.vocab == result.corpus.vocab


def evaluate_in_memory(result):
    model = result.model
    view = result.optimizer.averaged_parameters(model.parameters(), model.masks()) \
        if result.optimizer.trigger_active else model.parameters()
    from sparse_rnn.training import _swapped_parameters
    batches = batchify(result.corpus.test, result.config.batch_size, result.config.bptt)
    if result.optimizer.trigger_active:
        with _swapped_parameters(model, view):
            return eval_split(model, batches)
    return eval_split(model, batches)


def test_checkpoint_detects_corruption(corpus_dir, tmp_path):
    config = tiny_config(corpus_dir, tmp_path, epochs=1)
    result = train(config)
    raw = bytearray(open(result.checkpoint_path, "rb").read())
    raw[100] ^= 0xFF
    bad = tmp_path / "corrupt.ckpt"
    bad.write_bytes(bytes(raw))
    with pytest.raises(ValueError):
        load_checkpoint(bad)


def test_checkpoint_restores_optimizer(corpus_dir, tmp_path):
    config = tiny_config(corpus_dir, tmp_path, epochs=2)
    result = train(config)
    ckpt = load_checkpoint(result.checkpoint_path)
    model = ckpt.build_model()
    opt = ckpt.build_optimizer(model)
    assert opt.iteration == result.optimizer.iteration
    assert opt.trigger_active == result.optimizer.trigger_active
    v1 = opt.averaged_parameters(model.parameters(), model.masks())
    v2 = result.optimizer.averaged_parameters(
        result.model.parameters(), result.model.masks())
    for name in v1:
        assert np.array_equal(v1[name], v2[name])
