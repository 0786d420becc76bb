"""Post-hoc analytics over training runs.

Three independent tools: a scaled edit distance between sparse topologies
(with optional activation-based unit alignment between different networks),
a closed-form FLOPs model for comparing sparse training methods, and the
per-gate sparsity breakdown of a model.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rnn_model import BpttBatch, LanguageModel, forward
from .sparse_tensor import MASK_FORMAT_VERSION, read_mask_records, write_mask_record

_LAYER_RE = re.compile(r"^lstm(\d+)\.(ih|hh)$")


@dataclass
class TopologySnapshot:
    """Per-epoch record of every sparse tensor's mask coordinates."""

    epoch: int
    digest: str
    tensors: dict[str, tuple[int, int, np.ndarray]]  # name -> (rows, cols, coords)

    @classmethod
    def from_model(cls, model: LanguageModel, epoch: int, digest: str = "") -> "TopologySnapshot":
        tensors = {}
        for name, t in model.sparse_tensors().items():
            tensors[name] = (t.rows, t.cols, t.nonzero_coordinates().astype(np.int64))
        return cls(epoch=epoch, digest=digest, tensors=tensors)

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write(f"{MASK_FORMAT_VERSION}\n")
            fh.write(f"epoch {self.epoch}\n")
            fh.write(f"digest {self.digest or 'none'}\n")
            for name, (rows, cols, coords) in self.tensors.items():
                write_mask_record(fh, name, rows, cols, coords)

    @classmethod
    def load(cls, path: str | Path) -> "TopologySnapshot":
        with open(path) as fh:
            version = fh.readline().strip()
            if version != MASK_FORMAT_VERSION:
                raise ValueError(f"unsupported snapshot format {version!r}")
            epoch = int(fh.readline().split()[1])
            digest = fh.readline().split()[1]
            records = read_mask_records(fh)
        return cls(epoch=epoch, digest="" if digest == "none" else digest, tensors=records)

    def total_nnz(self) -> int:
        return sum(len(coords) for _, _, coords in self.tensors.values())


# ---------------------------------------------------------------------------
# unit alignment by activation correlation (semi-matching)
# ---------------------------------------------------------------------------

def semi_match(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Map each unit of `a` to the unit of `b` with maximal Pearson correlation.

    Both arguments are (units, samples) activation records over the same
    probe data. Many-to-one matches are allowed. Zero-variance units map by
    index; correlation ties break by lowest index.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"unit-count mismatch: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"probe-sample mismatch: {a.shape[1]} vs {b.shape[1]}")
    n = a.shape[0]

    a_mean = a.mean(axis=1, keepdims=True)
    b_mean = b.mean(axis=1, keepdims=True)
    ac = a - a_mean
    bc = b - b_mean
    a_norm = np.sqrt((ac ** 2).sum(axis=1))
    b_norm = np.sqrt((bc ** 2).sum(axis=1))
    # constant units center to roundoff noise, not exact zero
    a_dead = a_norm <= 1e-12 * (np.abs(a_mean[:, 0]) + 1.0)
    b_dead = b_norm <= 1e-12 * (np.abs(b_mean[:, 0]) + 1.0)
    corr = (ac @ bc.T) / np.outer(np.where(a_dead, 1.0, a_norm),
                                  np.where(b_dead, 1.0, b_norm))
    corr[:, b_dead] = -2.0  # below any real correlation

    mapping = np.argmax(corr, axis=1)
    mapping[a_dead] = np.arange(n)[a_dead]
    return mapping


def collect_hidden_activations(model: LanguageModel, tokens: np.ndarray,
                               layer_index: int, chunk: int = 256) -> np.ndarray:
    """(units, probe_len) record of a layer's hidden outputs over a token stream."""
    tokens = np.asarray(tokens, dtype=np.int64)
    state = model.zero_hidden_state(1)
    outs = []
    for start in range(0, len(tokens), chunk):
        window = tokens[start:start + chunk].reshape(-1, 1)
        batch = BpttBatch(inputs=window, targets=window)
        _, state, cache = forward(model, batch, state)
        lc = cache["layers"][layer_index]
        h_seq = lc["o"] * lc["tanh_c"]  # h_t = o_t * tanh(c_t), shape (T, 1, h)
        outs.append(h_seq[:, 0, :].T)
    return np.concatenate(outs, axis=1)


# ---------------------------------------------------------------------------
# scaled graph edit distance between snapshots
# ---------------------------------------------------------------------------

def _relabel(name: str, rows: int, cols: int, coords: np.ndarray,
             alignment: dict[int, np.ndarray], num_layers: int) -> np.ndarray:
    """Apply per-layer unit maps to the coordinate axes that index hidden units."""
    m = _LAYER_RE.match(name)
    out = coords.copy()
    if m:
        layer, kind = int(m.group(1)), m.group(2)
        h = rows // 4
        if layer in alignment:
            pi = alignment[layer]
            gates = out[:, 0] // h
            out[:, 0] = gates * h + pi[out[:, 0] % h]
        if kind == "hh" and layer in alignment:
            out[:, 1] = alignment[layer][out[:, 1]]
        elif kind == "ih" and layer > 0 and (layer - 1) in alignment:
            out[:, 1] = alignment[layer - 1][out[:, 1]]
    elif name == "decoder" and (num_layers - 1) in alignment:
        out[:, 1] = alignment[num_layers - 1][out[:, 1]]
    return out


def topology_distance(s1: TopologySnapshot, s2: TopologySnapshot,
                      alignment: dict[int, np.ndarray] | None = None) -> float:
    """Scaled edit distance between two sparse topologies, in [0, 1].

    With edge sets E1, E2 per tensor (mask coordinates on aligned node
    sets), the unit-cost insert/delete edit distance is |E1 symdiff E2|;
    summing over tensors and scaling by the total (|E1| + |E2|) yields 0
    exactly on identical topologies and 1 on disjoint ones. On the
    equal-size edge sets produced by fixed-parameter-count training this is
    a true metric. `alignment` maps layer index to a unit map from network 1
    to network 2 (from semi_match); identity when omitted. Many-to-one
    alignments may merge edges, in which case the deduplicated relabeled set
    is used.
    """
    if set(s1.tensors) != set(s2.tensors):
        raise ValueError("snapshots cover different tensor sets")
    num_layers = sum(1 for name in s1.tensors if name.endswith(".hh"))
    sym_total = 0
    size_total = 0
    for name, (rows, cols, c1) in s1.tensors.items():
        rows2, cols2, c2 = s2.tensors[name]
        if (rows, cols) != (rows2, cols2):
            raise ValueError(f"tensor {name!r} has incompatible shapes")
        if alignment:
            c1 = _relabel(name, rows, cols, c1, alignment, num_layers)
        e1 = np.unique(c1[:, 0] * cols + c1[:, 1])
        e2 = np.unique(c2[:, 0] * cols + c2[:, 1])
        common = np.intersect1d(e1, e2, assume_unique=True)
        sym_total += len(e1) + len(e2) - 2 * len(common)
        size_total += len(e1) + len(e2)
    if size_total == 0:
        return 0.0
    return sym_total / size_total


# ---------------------------------------------------------------------------
# FLOPs accounting
# ---------------------------------------------------------------------------

FLOPS_METHODS = ("dense", "iss_or_pruning", "set", "dsr", "snfs", "rigl", "selfish")


def flops_per_step(method: str, f_dense: float = 1.0, sparsity: float | None = None,
                   s_t: float | None = None, delta_t: int | None = None) -> float:
    """Training FLOPs for one step, forward plus backward (backward = 2x forward).

    f_dense is the dense forward cost; sparse methods run at
    f_sparse = (1 - sparsity) * f_dense. `s_t` is the fraction of weights
    present at the current iteration for dense-to-sparse methods; `delta_t`
    is the interval (in iterations) between the dense-gradient updates of
    the rigl schedule.
    """
    if method not in FLOPS_METHODS:
        raise ValueError(f"unknown method {method!r}")
    if method == "dense":
        return 3.0 * f_dense
    if method == "iss_or_pruning":
        if s_t is None:
            raise ValueError("iss_or_pruning requires s_t (current dense fraction)")
        return 3.0 * f_dense * s_t
    if sparsity is None:
        raise ValueError(f"{method} requires a sparsity level")
    f_sparse = (1.0 - sparsity) * f_dense
    if method in ("set", "dsr", "selfish"):
        return 3.0 * f_sparse
    if method == "snfs":
        return 2.0 * f_sparse + f_dense
    # rigl: delta_t cheap iterations, then one with a dense backward
    if delta_t is None:
        raise ValueError("rigl requires delta_t")
    return (3.0 * f_sparse * delta_t + 2.0 * f_sparse + f_dense) / (delta_t + 1)


def training_flops_ratio(method: str, sparsity: float | None = None,
                         s_t: float | None = None, delta_t: int | None = None) -> float:
    """Per-step training cost relative to dense training."""
    return flops_per_step(method, 1.0, sparsity, s_t, delta_t) / flops_per_step("dense", 1.0)


# ---------------------------------------------------------------------------
# gate sparsity breakdown
# ---------------------------------------------------------------------------

def gate_sparsity_breakdown(model: LanguageModel) -> list[dict]:
    """Sparsity of each gate block (8 per layer: 4 input + 4 hidden)."""
    rows = []
    for l, layer in enumerate(model.layers):
        for tname, tensor in (("ih", layer.input_weights), ("hh", layer.hidden_weights)):
            for g, gate in enumerate(layer.gates.gate_names):
                block = tensor.mask[layer.gates.block_slice(g)]
                nnz = int(block.sum())
                rows.append({"layer": l, "tensor": tname, "gate": gate,
                             "nnz": nnz, "size": block.size,
                             "sparsity": 1.0 - nnz / block.size})
    return rows


# ---------------------------------------------------------------------------
# file output for external plotting
# ---------------------------------------------------------------------------

def write_records(records: list[dict], jsonl_path: str | Path | None = None,
                  csv_path: str | Path | None = None) -> None:
    """Dump homogeneous dict records as JSONL and/or CSV."""
    if jsonl_path is not None:
        with open(jsonl_path, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
    if csv_path is not None and records:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(records[0]))
            writer.writeheader()
            writer.writerows(records)
