"""Stacked-LSTM language model over SparseTensors, float64 throughout.

Forward and backward (truncated BPTT) are written out by hand so that the
backward pass can hand the connectivity engine both masked gradients and,
on request, the full dense gradient of every sparse tensor. The forward
contract assumes apply_mask has been called on all sparse tensors, so the
dense value arrays can be used directly in the matmuls.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .sparse_tensor import SparseTensor, init_uniform

GATE_NAMES = ("i", "f", "c", "o")


class BpttBatch(NamedTuple):
    """One truncated-BPTT window: inputs (seq_len, batch), targets shifted by one."""

    inputs: np.ndarray
    targets: np.ndarray


class GatePartition:
    """Row partition of a layer's 4h-row weight tensors into the four cell gates."""

    def __init__(self, hidden_size: int, gate_names: tuple[str, ...] = GATE_NAMES):
        self.gate_names = gate_names
        self.hidden_size = hidden_size
        self.block_ranges = [
            (g * hidden_size, (g + 1) * hidden_size) for g in range(len(gate_names))
        ]

    def block_slice(self, gate_index: int) -> slice:
        start, end = self.block_ranges[gate_index]
        return slice(start, end)


class LstmLayer:
    """One LSTM layer: sparse input/hidden weight tensors plus a dense bias.

    Rows of both weight tensors are laid out in gate order (i, f, c, o);
    the forget-gate bias block is initialized to 1.0, all others to 0.0.
    """

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator,
                 sparsity: float = 0.0):
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.input_weights = init_uniform(4 * hidden_size, input_size, sparsity, rng)
        self.hidden_weights = init_uniform(4 * hidden_size, hidden_size, sparsity, rng)
        self.bias = np.zeros(4 * hidden_size, dtype=np.float64)
        self.bias[hidden_size:2 * hidden_size] = 1.0
        self.gates = GatePartition(hidden_size)


class LanguageModel:
    """Embedding -> stacked LSTM -> linear decoder, all 2-D weights sparse.

    When tied, the decoder shares the embedding SparseTensor (one storage,
    one mask), which requires emb_dim == hidden size of the last layer.
    """

    def __init__(self, vocab_size: int, emb_dim: int, hidden_size: int,
                 num_layers: int, tied: bool, rng: np.random.Generator,
                 sparsity: float = 0.0):
        self.vocab_size = vocab_size
        self.emb_dim = emb_dim
        self.hidden_size = hidden_size
        self.tied = tied
        self.embedding = init_uniform(vocab_size, emb_dim, sparsity, rng)
        self.layers = []
        in_dim = emb_dim
        for _ in range(num_layers):
            self.layers.append(LstmLayer(in_dim, hidden_size, rng, sparsity))
            in_dim = hidden_size
        if tied:
            if emb_dim != hidden_size:
                raise ValueError("weight tying requires emb_dim == hidden_size")
            self.decoder = self.embedding
        else:
            self.decoder = init_uniform(vocab_size, hidden_size, sparsity, rng)
        self.decoder_bias = np.zeros(vocab_size, dtype=np.float64)

    def sparse_tensors(self) -> dict[str, SparseTensor]:
        """Named sparse tensors; the tied decoder appears once, as 'embedding'."""
        out = {"embedding": self.embedding}
        for l, layer in enumerate(self.layers):
            out[f"lstm{l}.ih"] = layer.input_weights
            out[f"lstm{l}.hh"] = layer.hidden_weights
        if not self.tied:
            out["decoder"] = self.decoder
        return out

    def parameters(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {"embedding": self.embedding.values}
        for l, layer in enumerate(self.layers):
            out[f"lstm{l}.ih"] = layer.input_weights.values
            out[f"lstm{l}.hh"] = layer.hidden_weights.values
            out[f"lstm{l}.bias"] = layer.bias
        if not self.tied:
            out["decoder"] = self.decoder.values
        out["decoder_bias"] = self.decoder_bias
        return out

    def masks(self) -> dict[str, np.ndarray | None]:
        """Mask per parameter; biases and other dense parameters map to None."""
        sparse = self.sparse_tensors()
        return {name: (sparse[name].mask if name in sparse else None)
                for name in self.parameters()}

    def apply_masks(self) -> None:
        for t in self.sparse_tensors().values():
            t.apply_mask()

    def total_nnz(self) -> int:
        return sum(t.nnz() for t in self.sparse_tensors().values())

    def zero_hidden_state(self, batch: int) -> list[tuple[np.ndarray, np.ndarray]]:
        h = self.hidden_size
        return [(np.zeros((batch, h)), np.zeros((batch, h))) for _ in self.layers]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-safe for any x
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def _lstm_layer_forward(layer: LstmLayer, x: np.ndarray,
                        state: tuple[np.ndarray, np.ndarray]):
    seq_len, batch, _ = x.shape
    h = layer.hidden_size
    w_ih = layer.input_weights.values
    w_hh = layer.hidden_weights.values
    x_proj = x.reshape(seq_len * batch, -1) @ w_ih.T
    x_proj = x_proj.reshape(seq_len, batch, 4 * h) + layer.bias

    gi = np.empty((seq_len, batch, h))
    gf = np.empty((seq_len, batch, h))
    gg = np.empty((seq_len, batch, h))
    go = np.empty((seq_len, batch, h))
    tanh_c = np.empty((seq_len, batch, h))
    h_all = np.empty((seq_len, batch, h))
    h_prev_all = np.empty((seq_len, batch, h))
    c_prev_all = np.empty((seq_len, batch, h))

    h_prev, c_prev = state
    for t in range(seq_len):
        h_prev_all[t] = h_prev
        c_prev_all[t] = c_prev
        a = x_proj[t] + h_prev @ w_hh.T
        i_t = _sigmoid(a[:, 0 * h:1 * h])
        f_t = _sigmoid(a[:, 1 * h:2 * h])
        g_t = np.tanh(a[:, 2 * h:3 * h])
        o_t = _sigmoid(a[:, 3 * h:4 * h])
        c_t = f_t * c_prev + i_t * g_t
        tc = np.tanh(c_t)
        h_t = o_t * tc
        gi[t], gf[t], gg[t], go[t] = i_t, f_t, g_t, o_t
        tanh_c[t] = tc
        h_all[t] = h_t
        h_prev, c_prev = h_t, c_t

    cache = {"x": x, "i": gi, "f": gf, "g": gg, "o": go,
             "tanh_c": tanh_c, "h_prev": h_prev_all, "c_prev": c_prev_all}
    return h_all, (h_prev.copy(), c_prev.copy()), cache


def forward(model: LanguageModel, batch: BpttBatch,
            hidden_state: list[tuple[np.ndarray, np.ndarray]] | None = None,
            dropout: float = 0.0, rng: np.random.Generator | None = None,
            training: bool = False):
    """Run the stack over one BPTT window.

    Returns (logits (T, B, vocab), new_hidden_state, cache). The new state is
    detached: gradients never flow across window boundaries. Output dropout
    (the only dropout at this scale) is applied to the last layer's outputs
    in training mode.
    """
    inputs = batch.inputs
    if inputs.ndim != 2:
        raise ValueError(f"inputs must be (seq_len, batch), got {inputs.shape}")
    if inputs.max(initial=0) >= model.vocab_size:
        raise ValueError("token id out of vocabulary range")
    seq_len, batch_size = inputs.shape

    x = model.embedding.values[inputs]
    layer_caches = []
    new_state = []
    if hidden_state is None:
        hidden_state = model.zero_hidden_state(batch_size)
    for layer, state in zip(model.layers, hidden_state):
        x, state_out, lc = _lstm_layer_forward(layer, x, state)
        layer_caches.append(lc)
        new_state.append(state_out)

    drop_mask = None
    if training and dropout > 0.0:
        if rng is None:
            raise ValueError("dropout in training mode requires an rng")
        keep = 1.0 - dropout
        drop_mask = (rng.random(x.shape) < keep).astype(np.float64) / keep
        x = x * drop_mask

    flat = x.reshape(seq_len * batch_size, -1)
    logits = flat @ model.decoder.values.T + model.decoder_bias
    logits = logits.reshape(seq_len, batch_size, model.vocab_size)

    cache = {"inputs": inputs, "layers": layer_caches,
             "top_dropped": x, "drop_mask": drop_mask}
    return logits, new_state, cache


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def loss_and_perplexity(logits: np.ndarray, targets: np.ndarray) -> tuple[float, float]:
    """Mean softmax cross-entropy over all tokens and its exp (perplexity)."""
    nll_sum, count = cross_entropy_sum(logits, targets)
    mean = nll_sum / count
    return mean, float(np.exp(mean))


def cross_entropy_sum(logits: np.ndarray, targets: np.ndarray) -> tuple[float, int]:
    """Summed token NLL plus token count, for exact accumulation across windows."""
    seq_len, batch, vocab = logits.shape
    logp = _log_softmax(logits.reshape(-1, vocab))
    flat_targets = targets.reshape(-1)
    nll = -logp[np.arange(flat_targets.size), flat_targets]
    return float(nll.sum()), flat_targets.size


def _lstm_layer_backward(layer: LstmLayer, lc: dict, dh_out: np.ndarray):
    seq_len, batch, h = dh_out.shape
    w_ih = layer.input_weights.values
    w_hh = layer.hidden_weights.values
    gi, gf, gg, go = lc["i"], lc["f"], lc["g"], lc["o"]
    tanh_c, c_prev = lc["tanh_c"], lc["c_prev"]

    da_all = np.empty((seq_len, batch, 4 * h))
    dh_next = np.zeros((batch, h))
    dc_next = np.zeros((batch, h))
    for t in range(seq_len - 1, -1, -1):
        dh = dh_out[t] + dh_next
        do = dh * tanh_c[t]
        dc = dc_next + dh * go[t] * (1.0 - tanh_c[t] ** 2)
        di = dc * gg[t]
        df = dc * c_prev[t]
        dg = dc * gi[t]
        dc_next = dc * gf[t]
        da = da_all[t]
        da[:, 0 * h:1 * h] = di * gi[t] * (1.0 - gi[t])
        da[:, 1 * h:2 * h] = df * gf[t] * (1.0 - gf[t])
        da[:, 2 * h:3 * h] = dg * (1.0 - gg[t] ** 2)
        da[:, 3 * h:4 * h] = do * go[t] * (1.0 - go[t])
        dh_next = da @ w_hh

    da_flat = da_all.reshape(seq_len * batch, 4 * h)
    dw_ih = da_flat.T @ lc["x"].reshape(seq_len * batch, -1)
    dw_hh = da_flat.T @ lc["h_prev"].reshape(seq_len * batch, h)
    db = da_flat.sum(axis=0)
    dx = (da_flat @ w_ih).reshape(seq_len, batch, -1)
    return dx, dw_ih, dw_hh, db


def backward(model: LanguageModel, cache: dict, logits: np.ndarray,
             targets: np.ndarray, want_dense: bool = False):
    """BPTT gradients of the mean cross-entropy for every parameter.

    Gradients at masked positions are zeroed before being returned; when
    want_dense is set, the pre-masking dense gradient of each sparse tensor
    is returned alongside (used only by the gradient-growth policy).
    """
    if cache is None:
        raise ValueError("backward requires the cache produced by forward")
    seq_len, batch, vocab = logits.shape
    n_tokens = seq_len * batch

    logp = _log_softmax(logits.reshape(n_tokens, vocab))
    dlogits = np.exp(logp)
    dlogits[np.arange(n_tokens), targets.reshape(-1)] -= 1.0
    dlogits /= n_tokens

    top = cache["top_dropped"].reshape(n_tokens, -1)
    grads: dict[str, np.ndarray] = {}
    grads["decoder"] = dlogits.T @ top
    grads["decoder_bias"] = dlogits.sum(axis=0)

    dh_out = (dlogits @ model.decoder.values).reshape(seq_len, batch, -1)
    if cache["drop_mask"] is not None:
        dh_out = dh_out * cache["drop_mask"]

    for l in range(len(model.layers) - 1, -1, -1):
        dx, dw_ih, dw_hh, db = _lstm_layer_backward(model.layers[l], cache["layers"][l], dh_out)
        grads[f"lstm{l}.ih"] = dw_ih
        grads[f"lstm{l}.hh"] = dw_hh
        grads[f"lstm{l}.bias"] = db
        dh_out = dx

    demb = np.zeros((model.vocab_size, model.emb_dim))
    np.add.at(demb, cache["inputs"].reshape(-1), dh_out.reshape(n_tokens, -1))
    if model.tied:
        grads["embedding"] = demb + grads.pop("decoder")
    else:
        grads["embedding"] = demb

    dense_grads = None
    sparse = model.sparse_tensors()
    if want_dense:
        dense_grads = {name: grads[name].copy() for name in sparse}
    for name, tensor in sparse.items():
        grads[name] *= tensor.mask
    return grads, dense_grads


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    """L2 norm of all gradients concatenated."""
    return float(np.sqrt(sum(float((g ** 2).sum()) for g in grads.values())))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Rescale all gradients by a shared factor so the global L2 norm <= max_norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_grad_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return grads
