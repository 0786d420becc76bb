"""Corpus ingestion and BPTT batching for word-level language modeling."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rnn_model import BpttBatch

EOS = "<eos>"
UNK = "<unk>"


@dataclass
class Corpus:
    vocab: list[str]
    token_to_id: dict[str, int]
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def split(self, name: str) -> np.ndarray:
        if name not in ("train", "valid", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def read_tokens(path: str | Path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        tokens = []
        for line in fh:
            tokens.extend(line.split())
            tokens.append(EOS)
    return tokens


def build_vocab(train_tokens: list[str], vocab_cap: int | None = None) -> list[str]:
    """Vocabulary ordered by descending frequency, ties lexicographic.

    The unknown token is always present; when a cap is given, the rarest
    tokens beyond it are dropped (they will map to the unknown token).
    """
    counts = Counter(train_tokens)
    vocab = sorted(counts, key=lambda t: (-counts[t], t))
    if UNK not in counts:
        vocab.append(UNK)
    if vocab_cap is not None and len(vocab) > vocab_cap:
        kept = vocab[:vocab_cap]
        if UNK not in kept:
            kept = vocab[:vocab_cap - 1] + [UNK]
        vocab = kept
    return vocab


def encode(tokens: list[str], token_to_id: dict[str, int]) -> np.ndarray:
    unk_id = token_to_id[UNK]
    return np.fromiter((token_to_id.get(t, unk_id) for t in tokens),
                       dtype=np.int64, count=len(tokens))


def load_corpus(train_path: str | Path, valid_path: str | Path, test_path: str | Path,
                vocab_cap: int | None = None) -> Corpus:
    """Whitespace-tokenized corpus with an end-of-sentence token per line.

    The vocabulary is built from the train split only; out-of-vocabulary
    tokens in valid/test map to the reserved unknown token.
    """
    train_tokens = read_tokens(train_path)
    if not train_tokens:
        raise ValueError(f"train split {train_path} is empty")
    vocab = build_vocab(train_tokens, vocab_cap)
    token_to_id = {t: i for i, t in enumerate(vocab)}
    return Corpus(vocab=vocab, token_to_id=token_to_id,
                  train=encode(train_tokens, token_to_id),
                  valid=encode(read_tokens(valid_path), token_to_id),
                  test=encode(read_tokens(test_path), token_to_id))


def batchify(tokens: np.ndarray, batch_size: int, bptt: int) -> list[BpttBatch]:
    """Cut a token stream into BPTT windows over `batch_size` parallel streams.

    The stream is truncated to a multiple of batch_size and reshaped
    column-wise; consecutive windows of length bptt carry next-token
    targets, and the final short window is kept.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    n_stream = len(tokens) // batch_size
    if n_stream < 2:
        raise ValueError(
            f"split of {len(tokens)} tokens too small for batch size {batch_size}")
    data = tokens[:n_stream * batch_size].reshape(batch_size, n_stream).T
    batches = []
    for start in range(0, n_stream - 1, bptt):
        seq_len = min(bptt, n_stream - 1 - start)
        batches.append(BpttBatch(inputs=data[start:start + seq_len],
                                 targets=data[start + 1:start + 1 + seq_len]))
    return batches


def generate_synthetic_corpus(out_dir: str | Path, seed: int = 0,
                              vocab_size: int = 40, train_tokens: int = 30000,
                              valid_tokens: int = 6000, test_tokens: int = 6000,
                              order_strength: float = 6.0,
                              line_length: int = 20) -> dict[str, Path]:
    """Write a learnable Markov-chain corpus (train/valid/test .txt files).

    Used by experiment presets and tests when no real corpus is supplied.
    A sparse, peaked transition matrix gives the data enough structure for a
    small LSTM to make real progress and then plateau.
    """
    rng = np.random.default_rng(seed)
    logits = rng.normal(0.0, 1.0, size=(vocab_size, vocab_size)) * order_strength
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    state = int(rng.integers(vocab_size))
    for name, n in (("train", train_tokens), ("valid", valid_tokens), ("test", test_tokens)):
        words = []
        for _ in range(n):
            state = int(rng.choice(vocab_size, p=probs[state]))
            words.append(f"w{state}")
        lines = [" ".join(words[i:i + line_length])
                 for i in range(0, len(words), line_length)]
        path = out_dir / f"{name}.txt"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        paths[name] = path
    return paths
