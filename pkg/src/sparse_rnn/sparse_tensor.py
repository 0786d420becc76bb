"""Masked 2-D weight tensors with exact nonzero accounting.

A SparseTensor is a dense float64 value array paired with a dense binary
mask of the same shape. The mask is authoritative: every operation that
touches connectivity keeps values at masked positions exactly 0.0, so a
removal-then-growth cycle preserves the nonzero count exactly.
"""

from __future__ import annotations

import math
from typing import NamedTuple, TextIO

import numpy as np


class Coordinate(NamedTuple):
    """A (row, col) position inside a tensor."""

    row: int
    col: int


def round_half_up(x: float) -> int:
    """Round with halves going up (0.5 -> 1), unlike builtin banker's rounding."""
    return int(math.floor(x + 0.5))


class SparseTensor:
    """Dense value array plus dense {0,1} mask, float64 throughout.

    Invariants maintained by every mutating operation:
      * mask entries are exactly 0.0 or 1.0,
      * values are exactly 0.0 wherever mask is 0,
      * nnz is unchanged by a remove(k)/grow(k) cycle.
    """

    __slots__ = ("values", "mask")

    def __init__(self, values: np.ndarray, mask: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        mask = np.asarray(mask, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"values must be 2-D, got shape {values.shape}")
        if values.shape != mask.shape:
            raise ValueError(f"shape mismatch: values {values.shape} vs mask {mask.shape}")
        if not np.all((mask == 0.0) | (mask == 1.0)):
            raise ValueError("mask entries must be exactly 0 or 1")
        self.values = values
        self.mask = mask
        self.apply_mask()

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def size(self) -> int:
        return self.values.size

    def nnz(self) -> int:
        """Number of mask entries equal to 1."""
        return int(np.count_nonzero(self.mask))

    def apply_mask(self) -> "SparseTensor":
        """Zero values at masked positions (Hadamard with the mask), in place."""
        self.values *= self.mask
        return self

    def sparsity(self) -> float:
        return 1.0 - self.nnz() / self.size

    def nonzero_coordinates(self) -> np.ndarray:
        """(nnz, 2) int array of mask-1 positions, sorted by (row, col)."""
        return np.argwhere(self.mask == 1.0)

    def zero_coordinates(self) -> np.ndarray:
        return np.argwhere(self.mask == 0.0)

    def copy(self) -> "SparseTensor":
        return SparseTensor(self.values.copy(), self.mask.copy())


def _validate_sparsity(sparsity: float) -> None:
    if not (0.0 <= sparsity < 1.0):
        raise ValueError(f"sparsity must lie in [0, 1), got {sparsity}")


def init_with_nnz(
    rows: int,
    cols: int,
    nnz: int,
    rng: np.random.Generator,
    weight_init_scale: float | None = None,
) -> SparseTensor:
    """Tensor with exactly `nnz` nonzeros at uniformly random positions.

    Nonzero values are drawn uniformly from [-scale, +scale]; the default
    scale is 1/sqrt(cols), i.e. the usual fan-in rule with fan_in = cols.
    """
    if rows <= 0 or cols <= 0:
        raise ValueError("rows and cols must be positive")
    size = rows * cols
    if not (0 <= nnz <= size):
        raise ValueError(f"nnz {nnz} out of range for {rows}x{cols}")
    scale = weight_init_scale if weight_init_scale is not None else 1.0 / math.sqrt(cols)
    mask = np.zeros(size, dtype=np.float64)
    positions = rng.choice(size, size=nnz, replace=False)
    mask[positions] = 1.0
    values = np.zeros(size, dtype=np.float64)
    values[positions] = rng.uniform(-scale, scale, size=nnz)
    return SparseTensor(values.reshape(rows, cols), mask.reshape(rows, cols))


def init_uniform(
    rows: int,
    cols: int,
    sparsity: float,
    rng: np.random.Generator,
    weight_init_scale: float | None = None,
) -> SparseTensor:
    """Uniform sparse initialization at the given sparsity level.

    nnz = round-half-up((1 - sparsity) * rows * cols); nonzero positions are
    sampled uniformly without replacement.
    """
    _validate_sparsity(sparsity)
    nnz = round_half_up((1.0 - sparsity) * rows * cols)
    return init_with_nnz(rows, cols, nnz, rng, weight_init_scale)


def _clear_positions(t: SparseTensor, rows: np.ndarray, cols: np.ndarray) -> set[Coordinate]:
    t.mask[rows, cols] = 0.0
    t.values[rows, cols] = 0.0
    return {Coordinate(int(r), int(c)) for r, c in zip(rows, cols)}


def remove_smallest(t: SparseTensor, count: int) -> set[Coordinate]:
    """Clear the `count` smallest-magnitude nonzeros, in place.

    Ties break by (row, col) ascending. Returns the removed coordinates.
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    if count > t.nnz():
        raise ValueError(f"cannot remove {count} weights from a tensor with nnz {t.nnz()}")
    if count == 0:
        return set()
    coords = t.nonzero_coordinates()
    magnitudes = np.abs(t.values[coords[:, 0], coords[:, 1]])
    # lexsort: last key is primary
    order = np.lexsort((coords[:, 1], coords[:, 0], magnitudes))
    chosen = coords[order[:count]]
    return _clear_positions(t, chosen[:, 0], chosen[:, 1])


def grow_random(t: SparseTensor, count: int, rng: np.random.Generator) -> set[Coordinate]:
    """Activate `count` uniformly random zero-mask positions with value 0.0."""
    if count < 0:
        raise ValueError("count must be non-negative")
    if count == 0:
        return set()
    zeros = t.zero_coordinates()
    if count > len(zeros):
        raise ValueError(f"cannot grow {count} weights: only {len(zeros)} free positions")
    picked = zeros[rng.choice(len(zeros), size=count, replace=False)]
    t.mask[picked[:, 0], picked[:, 1]] = 1.0
    t.values[picked[:, 0], picked[:, 1]] = 0.0
    return {Coordinate(int(r), int(c)) for r, c in picked}


def grow_gradient(t: SparseTensor, dense_grad: np.ndarray, count: int) -> set[Coordinate]:
    """Activate the `count` zero-mask positions with the largest |gradient|.

    Ties break by (row, col) ascending. Grown values are 0.0.
    """
    dense_grad = np.asarray(dense_grad, dtype=np.float64)
    if dense_grad.shape != t.values.shape:
        raise ValueError(f"gradient shape {dense_grad.shape} != tensor shape {t.values.shape}")
    if count < 0:
        raise ValueError("count must be non-negative")
    if count == 0:
        return set()
    zeros = t.zero_coordinates()
    if count > len(zeros):
        raise ValueError(f"cannot grow {count} weights: only {len(zeros)} free positions")
    magnitudes = np.abs(dense_grad[zeros[:, 0], zeros[:, 1]])
    order = np.lexsort((zeros[:, 1], zeros[:, 0], -magnitudes))
    picked = zeros[order[:count]]
    t.mask[picked[:, 0], picked[:, 1]] = 1.0
    t.values[picked[:, 0], picked[:, 1]] = 0.0
    return {Coordinate(int(r), int(c)) for r, c in picked}


# ---------------------------------------------------------------------------
# mask-v1 snapshot records
# ---------------------------------------------------------------------------

MASK_FORMAT_VERSION = "mask-v1"


def mask_record(t: SparseTensor) -> np.ndarray:
    """Sorted (row, col) coordinate pairs of the mask, shape (nnz, 2)."""
    return t.nonzero_coordinates().astype(np.int64)


def write_mask_record(fh: TextIO, name: str, rows: int, cols: int, coords: np.ndarray) -> None:
    """One tensor record: header line `tensor <name> <rows> <cols> <nnz>` then pairs."""
    if " " in name:
        raise ValueError("tensor names may not contain spaces")
    fh.write(f"tensor {name} {rows} {cols} {len(coords)}\n")
    for r, c in coords:
        fh.write(f"{r} {c}\n")


def read_mask_records(fh: TextIO) -> dict[str, tuple[int, int, np.ndarray]]:
    """Parse consecutive tensor records into {name: (rows, cols, coords)}."""
    records: dict[str, tuple[int, int, np.ndarray]] = {}
    line = fh.readline()
    while line:
        parts = line.split()
        if not parts:
            line = fh.readline()
            continue
        if parts[0] != "tensor":
            raise ValueError(f"expected tensor record, got: {line!r}")
        name, rows, cols, nnz = parts[1], int(parts[2]), int(parts[3]), int(parts[4])
        coords = np.empty((nnz, 2), dtype=np.int64)
        for i in range(nnz):
            r, c = fh.readline().split()
            coords[i, 0] = int(r)
            coords[i, 1] = int(c)
        if len(coords) and (coords.min() < 0 or coords[:, 0].max() >= rows or coords[:, 1].max() >= cols):
            raise ValueError(f"record {name}: coordinates out of range")
        records[name] = (rows, cols, coords)
        line = fh.readline()
    return records
