"""Per-epoch sparse-connectivity updates with a fixed parameter budget.

Every epoch, a cosine-decayed fraction of the smallest-magnitude weights is
removed and exactly as many are regrown. LSTM layers pool their gate blocks
for removal (weights compete across gates) and regrow uniformly per block,
which is what shifts capacity toward gates holding larger weights. All
policies (growth, removal, init distribution, redistribution) are pluggable
so the baseline methods can run through the same engine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rnn_model import LanguageModel, LstmLayer
from .sparse_tensor import (
    Coordinate,
    SparseTensor,
    grow_gradient,
    grow_random,
    init_with_nnz,
    remove_smallest,
    round_half_up,
)

GROWTH_POLICIES = ("random", "gradient")
REMOVAL_POLICIES = ("magnitude", "set_style")
INIT_DISTRIBUTIONS = ("uniform", "erdos_renyi")
REDISTRIBUTIONS = ("cell_gate", "none")


@dataclass
class DstConfig:
    """Connectivity-update settings.

    initial_prune_rate 0 disables updates entirely (the static baseline).
    joint_hidden_blocks controls whether cell-gate redistribution pools the
    hidden-weight gate blocks together with the input-weight ones (default)
    or restricts the pool to the 4 input blocks, leaving the hidden tensor
    to a plain magnitude update.
    """

    sparsity: float = 0.67
    initial_prune_rate: float = 0.7
    growth_policy: str = "random"
    removal_policy: str = "magnitude"
    init_distribution: str = "uniform"
    redistribution: str = "cell_gate"
    total_epochs: int = 100
    joint_hidden_blocks: bool = True

    def __post_init__(self):
        if not (0.0 <= self.sparsity < 1.0):
            raise ValueError(f"sparsity must lie in [0, 1), got {self.sparsity}")
        if not (0.0 <= self.initial_prune_rate < 1.0):
            raise ValueError(f"initial prune rate must lie in [0, 1), got {self.initial_prune_rate}")
        for value, allowed in ((self.growth_policy, GROWTH_POLICIES),
                               (self.removal_policy, REMOVAL_POLICIES),
                               (self.init_distribution, INIT_DISTRIBUTIONS),
                               (self.redistribution, REDISTRIBUTIONS)):
            if value not in allowed:
                raise ValueError(f"{value!r} not one of {allowed}")
        if self.total_epochs < 0:
            raise ValueError("total_epochs must be non-negative")


@dataclass
class ConnectivityUpdateReport:
    """What one update did to one tensor (or one pooled LSTM layer)."""

    name: str
    epoch: int
    prune_rate: float
    removed: int
    grown: int
    gate_nnz_before: dict[str, int] | None = None
    gate_nnz_after: dict[str, int] | None = None

    def to_dict(self) -> dict:
        return {"name": self.name, "epoch": self.epoch, "prune_rate": self.prune_rate,
                "removed": self.removed, "grown": self.grown,
                "gate_nnz_before": self.gate_nnz_before,
                "gate_nnz_after": self.gate_nnz_after}


def cosine_prune_rate(p0: float, epoch: int, total_epochs: int) -> float:
    """Cosine annealing of the pruning rate: p0 at epoch 0, zero at the end."""
    if total_epochs <= 0:
        raise ValueError("total_epochs must be positive")
    if not (0 <= epoch <= total_epochs):
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return p0 * (1.0 + math.cos(math.pi * epoch / total_epochs)) / 2.0


# ---------------------------------------------------------------------------
# sparse initialization
# ---------------------------------------------------------------------------

def er_quotas(shapes: list[tuple[int, int]], target_nnz: int) -> list[int]:
    """Integer per-tensor nonzero counts under the Erdos-Renyi rule.

    Per-tensor density is proportional to (rows + cols) / (rows * cols),
    rescaled so the quotas sum exactly to target_nnz. Tensors whose scaled
    density would exceed 1 are clamped dense and the excess is redistributed
    (iterated to a fixpoint); fractional quotas are settled by largest
    remainder so the total is exact.
    """
    n = len(shapes)
    sizes = [r * c for r, c in shapes]
    if target_nnz < n:
        raise ValueError(
            f"target nnz {target_nnz} infeasible for {n} tensors (needs at least one each)")
    if target_nnz > sum(sizes):
        raise ValueError(f"target nnz {target_nnz} exceeds total size {sum(sizes)}")
    raw = [(r + c) / (r * c) for r, c in shapes]

    clamped: set[int] = set()
    eps = 0.0
    while True:
        free = [i for i in range(n) if i not in clamped]
        remaining = target_nnz - sum(sizes[i] for i in clamped)
        if not free:
            break
        denom = sum(raw[i] * sizes[i] for i in free)
        eps = remaining / denom
        newly = [i for i in free if eps * raw[i] >= 1.0]
        if not newly:
            break
        clamped.update(newly)

    quotas = [0] * n
    fractional: list[tuple[float, int]] = []
    for i in range(n):
        if i in clamped:
            quotas[i] = sizes[i]
        else:
            q = eps * raw[i] * sizes[i]
            quotas[i] = int(math.floor(q))
            fractional.append((q - quotas[i], i))
    shortfall = target_nnz - sum(quotas)
    # largest fractional part first; ties by tensor index
    fractional.sort(key=lambda t: (-t[0], t[1]))
    for _, i in fractional[:shortfall]:
        quotas[i] += 1
    return quotas


def _init_gate_stratified(tensor: SparseTensor, nnz: int, rng: np.random.Generator) -> None:
    """Spread an LSTM tensor's nonzero quota evenly over its 4 gate blocks.

    Largest-remainder apportionment keeps every block within one weight of
    the tensor-level sparsity while the tensor total stays exact.
    """
    h = tensor.rows // 4
    base, rem = divmod(nnz, 4)
    tensor.values[:] = 0.0
    tensor.mask[:] = 0.0
    for g in range(4):
        quota = base + (1 if g < rem else 0)
        block = init_with_nnz(h, tensor.cols, quota, rng,
                              weight_init_scale=1.0 / math.sqrt(tensor.cols))
        tensor.values[g * h:(g + 1) * h] = block.values
        tensor.mask[g * h:(g + 1) * h] = block.mask


def init_model_sparsity(model: LanguageModel, config: DstConfig,
                        rng: np.random.Generator) -> LanguageModel:
    """Re-initialize every sparse tensor's values and mask, in place.

    Uniform puts every tensor at the configured sparsity (per-tensor
    rounding); Erdos-Renyi computes per-tensor quotas whose total equals
    round((1 - S) * total sparsifiable parameters). LSTM weight tensors
    spread their quota evenly across gate blocks so every gate starts at
    the tensor's sparsity (within rounding of one weight).
    """
    tensors = model.sparse_tensors()
    names = list(tensors)
    shapes = [(tensors[n].rows, tensors[n].cols) for n in names]
    if config.init_distribution == "uniform":
        quotas = []
        for (rows, cols), name in zip(shapes, names):
            q = round_half_up((1.0 - config.sparsity) * rows * cols)
            if q == 0:
                raise ValueError(f"sparsity {config.sparsity} leaves tensor {name!r} empty")
            quotas.append(q)
    else:
        total = sum(r * c for r, c in shapes)
        quotas = er_quotas(shapes, round_half_up((1.0 - config.sparsity) * total))
    for name, (rows, cols), q in zip(names, shapes, quotas):
        if name.startswith("lstm"):
            _init_gate_stratified(tensors[name], q, rng)
        else:
            fresh = init_with_nnz(rows, cols, q, rng)
            tensors[name].values[:] = fresh.values
            tensors[name].mask[:] = fresh.mask
    return model


# ---------------------------------------------------------------------------
# removal policies
# ---------------------------------------------------------------------------

def set_style_removal(t: SparseTensor, count: int) -> set[Coordinate]:
    """Remove ceil(k/2) smallest positive and floor(k/2) largest negative nonzeros.

    'Largest negative' means closest to zero from below. A side that runs out
    is topped up from the other, continuing that side's order. Zero-valued
    active weights count as the positive side.
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    if count > t.nnz():
        raise ValueError(f"cannot remove {count} weights from a tensor with nnz {t.nnz()}")
    if count == 0:
        return set()
    coords = t.nonzero_coordinates()
    vals = t.values[coords[:, 0], coords[:, 1]]

    pos = coords[vals >= 0.0]
    pos_vals = vals[vals >= 0.0]
    pos_order = np.lexsort((pos[:, 1], pos[:, 0], pos_vals))
    neg = coords[vals < 0.0]
    neg_vals = vals[vals < 0.0]
    neg_order = np.lexsort((neg[:, 1], neg[:, 0], -neg_vals))

    n_pos = min(math.ceil(count / 2), len(pos))
    n_neg = min(count // 2, len(neg))
    deficit = count - n_pos - n_neg
    if deficit > 0:
        extra_pos = min(deficit, len(pos) - n_pos)
        n_pos += extra_pos
        n_neg += deficit - extra_pos

    removed: set[Coordinate] = set()
    for arr, order, take in ((pos, pos_order, n_pos), (neg, neg_order, n_neg)):
        chosen = arr[order[:take]]
        t.mask[chosen[:, 0], chosen[:, 1]] = 0.0
        t.values[chosen[:, 0], chosen[:, 1]] = 0.0
        removed.update(Coordinate(int(r), int(c)) for r, c in chosen)
    return removed


def _remove(t: SparseTensor, count: int, policy: str) -> set[Coordinate]:
    if policy == "magnitude":
        return remove_smallest(t, count)
    return set_style_removal(t, count)


def _grow(t: SparseTensor, count: int, policy: str,
          grad: np.ndarray | None, rng: np.random.Generator | None) -> set[Coordinate]:
    if policy == "random":
        return grow_random(t, count, rng)
    if grad is None:
        raise ValueError("gradient growth requires a dense gradient")
    return grow_gradient(t, grad, count)


# ---------------------------------------------------------------------------
# per-tensor and per-layer updates
# ---------------------------------------------------------------------------

def update_non_rnn_layer(tensor: SparseTensor, prune_rate: float,
                         growth_policy: str = "random",
                         removal_policy: str = "magnitude",
                         grad: np.ndarray | None = None,
                         rng: np.random.Generator | None = None,
                         name: str = "", epoch: int = 0
                         ) -> tuple[ConnectivityUpdateReport, set[Coordinate]]:
    """Remove floor(rate * nnz) weights, then grow exactly as many."""
    if not (0.0 <= prune_rate < 1.0):
        raise ValueError(f"prune_rate must lie in [0, 1), got {prune_rate}")
    k = int(math.floor(prune_rate * tensor.nnz()))
    _remove(tensor, k, removal_policy)
    grown = _grow(tensor, k, growth_policy, grad, rng)
    report = ConnectivityUpdateReport(name=name, epoch=epoch, prune_rate=prune_rate,
                                      removed=k, grown=len(grown))
    return report, grown


def _gate_block_nnz(layer: LstmLayer, joint_hidden: bool) -> dict[str, int]:
    out = {}
    tensors = [("ih", layer.input_weights)]
    if joint_hidden:
        tensors.append(("hh", layer.hidden_weights))
    for tname, tensor in tensors:
        for g, gate in enumerate(layer.gates.gate_names):
            out[f"{tname}.{gate}"] = int(tensor.mask[layer.gates.block_slice(g)].sum())
    return out


def update_rnn_layer(layer: LstmLayer, prune_rate: float,
                     growth_policy: str = "random",
                     grads: tuple[np.ndarray, np.ndarray] | None = None,
                     rng: np.random.Generator | None = None,
                     joint_hidden: bool = True,
                     name: str = "", epoch: int = 0
                     ) -> tuple[ConnectivityUpdateReport, dict[str, set[Coordinate]]]:
    """Cell-gate redistribution for one LSTM layer.

    Removal pools all gate blocks of the layer and drops the k globally
    smallest magnitudes (so per-gate removal counts vary); growth hands each
    block floor(k/nblocks) new weights plus one of the k mod nblocks
    remainder in fixed gate order, at random (or largest-|grad|) free
    positions inside the block. A block without enough free positions spills
    its quota to the next block in order.
    """
    if not (0.0 <= prune_rate < 1.0):
        raise ValueError(f"prune_rate must lie in [0, 1), got {prune_rate}")
    pool: list[tuple[str, SparseTensor, np.ndarray | None]] = [
        ("ih", layer.input_weights, grads[0] if grads else None)]
    if joint_hidden:
        pool.append(("hh", layer.hidden_weights, grads[1] if grads else None))
    gate_before = _gate_block_nnz(layer, joint_hidden)

    total_nnz = sum(t.nnz() for _, t, _ in pool)
    k = int(math.floor(prune_rate * total_nnz))

    # joint removal: k globally smallest magnitudes across the pooled tensors,
    # ties by (tensor order, row, col)
    if k > 0:
        all_coords = []
        all_mags = []
        all_tids = []
        for tid, (_, tensor, _) in enumerate(pool):
            coords = tensor.nonzero_coordinates()
            all_coords.append(coords)
            all_mags.append(np.abs(tensor.values[coords[:, 0], coords[:, 1]]))
            all_tids.append(np.full(len(coords), tid))
        coords = np.concatenate(all_coords)
        mags = np.concatenate(all_mags)
        tids = np.concatenate(all_tids)
        order = np.lexsort((coords[:, 1], coords[:, 0], tids, mags))
        chosen = order[:k]
        for tid, (_, tensor, _) in enumerate(pool):
            sel = coords[chosen[tids[chosen] == tid]]
            tensor.mask[sel[:, 0], sel[:, 1]] = 0.0
            tensor.values[sel[:, 0], sel[:, 1]] = 0.0

    # uniform per-block growth with fixed-order remainder and spill
    h = layer.hidden_size
    blocks = [(tid, g) for tid in range(len(pool)) for g in range(4)]
    nblocks = len(blocks)
    quotas = [k // nblocks + (1 if b < k % nblocks else 0) for b in range(nblocks)]
    grown: dict[str, set[Coordinate]] = {tname: set() for tname, _, _ in pool}

    carry = 0
    for _ in range(2):
        for b, (tid, g) in enumerate(blocks):
            want = quotas[b] + carry
            quotas[b] = 0
            if want == 0:
                carry = 0
                continue
            tname, tensor, grad = pool[tid]
            rows = slice(g * h, (g + 1) * h)
            free = np.argwhere(tensor.mask[rows] == 0.0)
            take = min(want, len(free))
            carry = want - take
            if take == 0:
                continue
            if growth_policy == "random":
                picked = free[rng.choice(len(free), size=take, replace=False)]
            else:
                if grad is None:
                    raise ValueError("gradient growth requires dense gradients")
                block_grad = np.abs(grad[rows][free[:, 0], free[:, 1]])
                order = np.lexsort((free[:, 1], free[:, 0], -block_grad))
                picked = free[order[:take]]
            abs_rows = picked[:, 0] + g * h
            tensor.mask[abs_rows, picked[:, 1]] = 1.0
            tensor.values[abs_rows, picked[:, 1]] = 0.0
            grown[tname].update(Coordinate(int(r), int(c))
                                for r, c in zip(abs_rows, picked[:, 1]))
        if carry == 0:
            break
    if carry > 0:
        raise ValueError(f"layer {name!r} has no free positions left for growth")

    report = ConnectivityUpdateReport(
        name=name, epoch=epoch, prune_rate=prune_rate, removed=k,
        grown=sum(len(s) for s in grown.values()),
        gate_nnz_before=gate_before,
        gate_nnz_after=_gate_block_nnz(layer, joint_hidden))
    return report, grown


def epoch_update(model: LanguageModel, epoch: int, config: DstConfig,
                 rng: np.random.Generator,
                 dense_grads: dict[str, np.ndarray] | None = None,
                 optimizer=None) -> list[ConnectivityUpdateReport]:
    """Run one connectivity update over the whole model (end of epoch).

    `epoch` is the 1-based count of completed training epochs; it sets the
    cosine-decayed prune rate. Grown coordinates are reported to the
    optimizer so growth-aware averaging can restamp them.
    """
    rate = cosine_prune_rate(config.initial_prune_rate, epoch, config.total_epochs)
    if dense_grads is None:
        dense_grads = {}
    reports: list[ConnectivityUpdateReport] = []
    grown_by_tensor: dict[str, set[Coordinate]] = {}

    for l, layer in enumerate(model.layers):
        if config.redistribution == "cell_gate":
            grads = None
            if config.growth_policy == "gradient":
                grads = (dense_grads.get(f"lstm{l}.ih"), dense_grads.get(f"lstm{l}.hh"))
            report, grown = update_rnn_layer(
                layer, rate, config.growth_policy, grads, rng,
                joint_hidden=config.joint_hidden_blocks,
                name=f"lstm{l}", epoch=epoch)
            reports.append(report)
            for tname, coords in grown.items():
                grown_by_tensor.setdefault(f"lstm{l}.{tname}", set()).update(coords)
            if not config.joint_hidden_blocks:
                report, grown = update_non_rnn_layer(
                    layer.hidden_weights, rate, config.growth_policy,
                    config.removal_policy, dense_grads.get(f"lstm{l}.hh"), rng,
                    name=f"lstm{l}.hh", epoch=epoch)
                reports.append(report)
                grown_by_tensor.setdefault(f"lstm{l}.hh", set()).update(grown)
        else:
            for tname, tensor in (("ih", layer.input_weights), ("hh", layer.hidden_weights)):
                full = f"lstm{l}.{tname}"
                report, grown = update_non_rnn_layer(
                    tensor, rate, config.growth_policy, config.removal_policy,
                    dense_grads.get(full), rng, name=full, epoch=epoch)
                reports.append(report)
                grown_by_tensor.setdefault(full, set()).update(grown)

    non_rnn = ["embedding"] + ([] if model.tied else ["decoder"])
    tensors = model.sparse_tensors()
    for name in non_rnn:
        report, grown = update_non_rnn_layer(
            tensors[name], rate, config.growth_policy, config.removal_policy,
            dense_grads.get(name), rng, name=name, epoch=epoch)
        reports.append(report)
        grown_by_tensor.setdefault(name, set()).update(grown)

    model.apply_masks()
    if optimizer is not None:
        for name, coords in grown_by_tensor.items():
            if coords:
                optimizer.notify_growth(name, coords)
    return reports
