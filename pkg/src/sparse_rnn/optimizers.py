"""Optimizers behind one contract: plain SGD, momentum SGD, Adam, and the
averaged-SGD pair (NT-ASGD and its sparsity-aware variant SNT-ASGD).

The averaging variants run constant-lr SGD until a non-monotonic trigger
fires, then maintain running sums of post-update, post-mask iterates. The
sparse variant restarts a weight's average at its most recent growth event
and pins masked weights' averages to exactly zero; the standard variant
keeps averaging straight through connectivity changes, which is precisely
the failure mode the sparse variant exists to fix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .sparse_tensor import Coordinate

OPTIMIZER_KINDS = ("sgd", "momentum_sgd", "adam", "nt_asgd", "snt_asgd")


class OptimizerError(RuntimeError):
    """Raised when a step cannot be taken (non-finite gradients, bad state)."""


@dataclass
class OptimizerConfig:
    kind: str = "snt_asgd"
    lr: float = 40.0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    nonmono: int = 5
    # learning-rate drop "(A, B)": divide lr by A after B non-improving checks;
    # None selects the per-kind default (adam (2, 2), momentum (1.33, 1), else off)
    lr_drop_factor: float | None = None
    lr_drop_patience: int | None = None

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.nonmono < 0:
            raise ValueError("nonmono must be non-negative")


def _coord_arrays(coords: Iterable[Coordinate]) -> tuple[np.ndarray, np.ndarray]:
    pairs = np.asarray([(c[0], c[1]) for c in coords], dtype=np.int64)
    if pairs.size == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    return pairs[:, 0], pairs[:, 1]


class Optimizer:
    """Shared machinery: iteration counting, finiteness checks, trigger state.

    `step` applies the update rule in place, re-applies masks so masked
    positions stay exactly 0.0, and increments the global iteration counter.
    """

    def __init__(self, config: OptimizerConfig, params: dict[str, np.ndarray],
                 masks: dict[str, np.ndarray | None]):
        self.config = config
        self.lr = config.lr
        self.masks = masks
        self.iteration = 0
        self.trigger_active = False
        self._best = float("inf")
        self._bad = 0

    # -- update rules -------------------------------------------------------

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise OptimizerError(
                    f"non-finite gradient in {name!r} at iteration {self.iteration + 1}")
        self._update(params, grads)
        for name, mask in self.masks.items():
            if mask is not None and name in params:
                params[name] *= mask
        self.iteration += 1
        self._after_step(params)

    def _update(self, params, grads):
        raise NotImplementedError

    def _after_step(self, params):
        pass

    # -- validation hooks ---------------------------------------------------

    def check_trigger(self, validation_metric: float) -> bool:
        """Track the non-improvement streak; subclasses act on it."""
        if validation_metric < self._best:
            self._best = validation_metric
            self._bad = 0
        else:
            self._bad += 1
        self._on_validation()
        return self.trigger_active

    def _on_validation(self):
        pass

    def averaged_parameters(self, params: dict[str, np.ndarray],
                            masks: dict[str, np.ndarray | None] | None = None
                            ) -> dict[str, np.ndarray]:
        """Evaluation view of the parameters; identity (copies) by default."""
        return {name: p.copy() for name, p in params.items()}

    def notify_growth(self, name: str, coords: Iterable[Coordinate]) -> None:
        if name not in self.masks:
            raise OptimizerError(f"notify_growth for unknown tensor {name!r}")

    # -- checkpointing ------------------------------------------------------

    def state_dict(self) -> tuple[dict, dict[str, np.ndarray]]:
        scalars = {"kind": self.config.kind, "iteration": self.iteration,
                   "lr": self.lr, "trigger_active": self.trigger_active,
                   "best": self._best, "bad": self._bad}
        return scalars, {}

    def load_state_dict(self, scalars: dict, arrays: dict[str, np.ndarray]) -> None:
        self.iteration = int(scalars["iteration"])
        self.lr = float(scalars["lr"])
        self.trigger_active = bool(scalars["trigger_active"])
        self._best = float(scalars["best"])
        self._bad = int(scalars["bad"])


class _LrDropMixin:
    """Table-style '(A, B)' schedule: divide lr by A after B non-improving checks."""

    drop_factor: float | None = None
    drop_patience: int | None = None

    def _on_validation(self):
        if self.drop_factor is None or self.drop_patience is None:
            return
        if self._bad >= self.drop_patience:
            self.lr /= self.drop_factor
            self._bad = 0


class Sgd(Optimizer):
    def _update(self, params, grads):
        for name, g in grads.items():
            params[name] -= self.lr * g


class MomentumSgd(_LrDropMixin, Optimizer):
    def __init__(self, config, params, masks):
        super().__init__(config, params, masks)
        self.buffers = {name: np.zeros_like(p) for name, p in params.items()}
        self.drop_factor = config.lr_drop_factor if config.lr_drop_factor is not None else 1.33
        self.drop_patience = config.lr_drop_patience if config.lr_drop_patience is not None else 1

    def _update(self, params, grads):
        mu = self.config.momentum
        for name, g in grads.items():
            buf = self.buffers[name]
            buf *= mu
            buf += g
            params[name] -= self.lr * buf

    def state_dict(self):
        scalars, arrays = super().state_dict()
        arrays.update({f"buf__{k}": v for k, v in self.buffers.items()})
        return scalars, arrays

    def load_state_dict(self, scalars, arrays):
        super().load_state_dict(scalars, arrays)
        for k in self.buffers:
            self.buffers[k] = arrays[f"buf__{k}"].copy()


class Adam(_LrDropMixin, Optimizer):
    def __init__(self, config, params, masks):
        super().__init__(config, params, masks)
        self.m = {name: np.zeros_like(p) for name, p in params.items()}
        self.v = {name: np.zeros_like(p) for name, p in params.items()}
        self.drop_factor = config.lr_drop_factor if config.lr_drop_factor is not None else 2.0
        self.drop_patience = config.lr_drop_patience if config.lr_drop_patience is not None else 2

    def _update(self, params, grads):
        b1, b2, eps = self.config.beta1, self.config.beta2, self.config.eps
        t = self.iteration + 1
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        for name, g in grads.items():
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[name] -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + eps)

    def state_dict(self):
        scalars, arrays = super().state_dict()
        arrays.update({f"m__{k}": v for k, v in self.m.items()})
        arrays.update({f"v__{k}": v for k, v in self.v.items()})
        return scalars, arrays

    def load_state_dict(self, scalars, arrays):
        super().load_state_dict(scalars, arrays)
        for k in self.m:
            self.m[k] = arrays[f"m__{k}"].copy()
            self.v[k] = arrays[f"v__{k}"].copy()


class NtAsgd(Optimizer):
    """Constant-lr SGD that switches to full-window iterate averaging.

    The trigger fires the first time the validation metric has failed to
    improve on the best seen for `nonmono` consecutive checks (at least one),
    and stays active forever after. Averaging runs over every weight from
    the trigger on, with no awareness of the mask or of growth events.
    """

    def __init__(self, config, params, masks):
        super().__init__(config, params, masks)
        self.sums = {name: np.zeros_like(p) for name, p in params.items()}
        self.count = 0

    def _update(self, params, grads):
        for name, g in grads.items():
            params[name] -= self.lr * g

    def _after_step(self, params):
        if not self.trigger_active:
            return
        for name, p in params.items():
            self.sums[name] += p
        self.count += 1

    def _on_validation(self):
        if not self.trigger_active and self._bad >= max(self.config.nonmono, 1):
            self._activate()

    def _activate(self):
        self.trigger_active = True
        for s in self.sums.values():
            s[:] = 0.0
        self.count = 0

    def averaged_parameters(self, params, masks=None):
        if not self.trigger_active or self.count == 0:
            return {name: p.copy() for name, p in params.items()}
        return {name: self.sums[name] / self.count for name in params}

    def state_dict(self):
        scalars, arrays = super().state_dict()
        scalars["count"] = self.count
        arrays.update({f"sum__{k}": v for k, v in self.sums.items()})
        return scalars, arrays

    def load_state_dict(self, scalars, arrays):
        super().load_state_dict(scalars, arrays)
        self.count = int(scalars["count"])
        for k in self.sums:
            self.sums[k] = arrays[f"sum__{k}"].copy()


class SntAsgd(NtAsgd):
    """Growth-aware averaged SGD for sparse tensors.

    Per-weight running sums restart whenever a weight is (re)grown, so its
    average spans only the iterations since it last (re)appeared; masked
    weights average to exactly zero. Dense parameters (biases) fall back to
    the standard full-window average.
    """

    def __init__(self, config, params, masks):
        super().__init__(config, params, masks)
        # per-weight iterate counts for masked tensors; dense params use self.count
        self.counts = {name: np.zeros_like(params[name])
                       for name, mask in masks.items()
                       if mask is not None and name in params}

    def _after_step(self, params):
        if not self.trigger_active:
            return
        for name, p in params.items():
            mask = self.masks.get(name)
            s = self.sums[name]
            if mask is None:
                s += p
            else:
                # removal zeroes the accumulator; p is already post-mask
                s *= mask
                s += p
                cnt = self.counts[name]
                cnt *= mask
                cnt += mask
        self.count += 1

    def _activate(self):
        super()._activate()
        for c in self.counts.values():
            c[:] = 0.0

    def notify_growth(self, name, coords):
        super().notify_growth(name, coords)
        if name not in self.counts:
            raise OptimizerError(f"notify_growth for dense tensor {name!r}")
        rows, cols = _coord_arrays(coords)
        self.sums[name][rows, cols] = 0.0
        self.counts[name][rows, cols] = 0.0

    def averaged_parameters(self, params, masks=None):
        if masks is None:
            masks = self.masks
        if not self.trigger_active:
            return {name: p.copy() for name, p in params.items()}
        out = {}
        for name, p in params.items():
            mask = masks.get(name)
            if mask is None:
                out[name] = self.sums[name] / self.count if self.count > 0 else p.copy()
            else:
                cnt = self.counts[name]
                avg = np.divide(self.sums[name], cnt, out=p.copy(), where=cnt > 0)
                avg *= mask
                out[name] = avg
        return out

    def state_dict(self):
        scalars, arrays = super().state_dict()
        arrays.update({f"count__{k}": v for k, v in self.counts.items()})
        return scalars, arrays

    def load_state_dict(self, scalars, arrays):
        super().load_state_dict(scalars, arrays)
        for k in self.counts:
            self.counts[k] = arrays[f"count__{k}"].copy()


_KIND_TO_CLASS = {
    "sgd": Sgd,
    "momentum_sgd": MomentumSgd,
    "adam": Adam,
    "nt_asgd": NtAsgd,
    "snt_asgd": SntAsgd,
}


def make_optimizer(config: OptimizerConfig, params: dict[str, np.ndarray],
                   masks: dict[str, np.ndarray | None]) -> Optimizer:
    return _KIND_TO_CLASS[config.kind](config, params, masks)
