"""Core domain types: sparse filter matrices, column groupings, packed
matrices, and shift+pointwise network definitions.

All types are immutable values after construction (arrays are stored
read-only), so instances can be shared freely across concurrent workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .exceptions import GroupingError, IntegrityError, NetworkError

INT8_MIN = -128
INT8_MAX = 127

#: Spatial translations available to shift layers: identity first, then the
#: eight neighbours clockwise starting from "up".  Entries are (dy, dx).
SHIFT_OFFSETS = (
    (0, 0),
    (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1),
)
NUM_SHIFT_DIRECTIONS = len(SHIFT_OFFSETS)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SparseFilterMatrix:
    """Weight matrix of a pointwise layer with explicit zeros.

    Rows are filters (output channels), columns are flattened input
    channels.  Weights are signed 8-bit integers; zero means pruned/absent.
    """

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"filter matrix must be a nonempty 2-D array, got shape {v.shape}")
        if not np.issubdtype(v.dtype, np.integer):
            raise ValueError(f"filter matrix must have an integer dtype, got {v.dtype}")
        if v.min() < INT8_MIN or v.max() > INT8_MAX:
            raise ValueError("filter weights must fit in signed 8 bits")
        object.__setattr__(self, "values", _readonly(v.astype(np.int8)))

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.values))

    def nonzero_mask(self) -> np.ndarray:
        return self.values != 0

    def __repr__(self):
        return f"SparseFilterMatrix(rows={self.rows}, cols={self.cols}, nnz={self.nnz})"


@dataclass(frozen=True)
class ColumnGrouping:
    """Partition of a filter matrix's columns into ordered groups.

    ``alpha`` and ``gamma`` record the constraints of the run that produced
    the grouping (optional metadata, kept for serialization).
    """

    groups: tuple
    alpha: Optional[int] = None
    gamma: Optional[float] = None

    def __post_init__(self):
        norm = tuple(tuple(int(c) for c in g) for g in self.groups)
        object.__setattr__(self, "groups", norm)
        seen = set()
        for g in norm:
            if not g:
                raise GroupingError("empty group in column grouping")
            for c in g:
                if c < 0:
                    raise GroupingError(f"negative column index {c}")
                if c in seen:
                    raise GroupingError(f"column {c} appears in more than one group")
                seen.add(c)

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    @property
    def num_columns(self) -> int:
        return sum(len(g) for g in self.groups)

    @property
    def max_group_size(self) -> int:
        return max(len(g) for g in self.groups)

    def validate_partition(self, n_cols: int) -> None:
        """Raise unless the groups partition {0..n_cols-1} exactly."""
        cols = sorted(c for g in self.groups for c in g)
        if cols != list(range(n_cols)):
            raise GroupingError(
                f"groups do not partition the {n_cols} columns (cover {len(cols)} indices)"
            )

    def slot_of(self) -> dict:
        """Map column index -> (group index, slot within group)."""
        out = {}
        for gi, g in enumerate(self.groups):
            for slot, c in enumerate(g):
                out[c] = (gi, slot)
        return out

    def is_contiguous(self) -> bool:
        """True when each group is a run of consecutive indices in order."""
        nxt = 0
        for g in self.groups:
            for c in g:
                if c != nxt:
                    return False
                nxt += 1
        return True


@dataclass(frozen=True, eq=False)
class PackedFilterMatrix:
    """Dense matrix of combined columns, one per group.

    Each cell is either empty or holds the single surviving weight of its
    row within the group, together with the weight's source column and the
    column's slot inside the group (the mux select for MX cells).
    Empty cells have weight 0 and source/slot -1.
    """

    weights: np.ndarray        # (rows, packed_cols) int8
    source_cols: np.ndarray    # (rows, packed_cols) int32, -1 where empty
    channel_slots: np.ndarray  # (rows, packed_cols) int16, -1 where empty
    grouping: ColumnGrouping

    def __post_init__(self):
        w = np.asarray(self.weights).astype(np.int8)
        src = np.asarray(self.source_cols).astype(np.int32)
        slot = np.asarray(self.channel_slots).astype(np.int16)
        if w.shape != src.shape or w.shape != slot.shape or w.ndim != 2:
            raise IntegrityError("packed matrix arrays must share one 2-D shape")
        if w.shape[1] != self.grouping.num_groups:
            raise IntegrityError("packed column count must equal the number of groups")
        occupied = src >= 0
        if not np.array_equal(occupied, w != 0) or not np.array_equal(occupied, slot >= 0):
            raise IntegrityError("cell occupancy must agree across weight/source/slot arrays")
        for gi, g in enumerate(self.grouping.groups):
            col_src = src[:, gi][occupied[:, gi]]
            col_slot = slot[:, gi][occupied[:, gi]]
            garr = np.asarray(g)
            if np.any(col_slot >= len(g)) or np.any(garr[col_slot] != col_src):
                raise IntegrityError(f"cell source column outside its group (group {gi})")
        object.__setattr__(self, "weights", _readonly(w))
        object.__setattr__(self, "source_cols", _readonly(src))
        object.__setattr__(self, "channel_slots", _readonly(slot))

    @property
    def rows(self) -> int:
        return self.weights.shape[0]

    @property
    def packed_cols(self) -> int:
        return self.weights.shape[1]

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.weights))

    def unpack(self, n_cols: Optional[int] = None) -> SparseFilterMatrix:
        """Scatter cells back to their source columns."""
        if n_cols is None:
            n_cols = self.grouping.num_columns
        out = np.zeros((self.rows, n_cols), dtype=np.int8)
        rr, cc = np.nonzero(self.source_cols >= 0)
        out[rr, self.source_cols[rr, cc]] = self.weights[rr, cc]
        return SparseFilterMatrix(out)

    def __repr__(self):
        return (f"PackedFilterMatrix(rows={self.rows}, packed_cols={self.packed_cols}, "
                f"nnz={self.nnz})")


@dataclass(frozen=True)
class PackingParams:
    """Knobs of the column-combining loop."""

    alpha: int = 8     # max columns per group
    beta: float = 20.0 # initial pruning percentage
    gamma: float = 0.5 # average conflicts allowed per row per group
    rho: int = 1       # target nonzero count (stopping criterion)

    def __post_init__(self):
        if self.alpha < 1:
            raise ValueError("alpha must be >= 1")
        if not (0 <= self.beta < 100):
            raise ValueError("beta must lie in [0, 100)")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.rho < 1:
            raise ValueError("rho must be >= 1")


@dataclass(frozen=True)
class QuantParams:
    """Fixed-point format of a layer: 8-bit inputs/weights, k-bit accumulation,
    and the power-of-two right shift used when requantizing outputs."""

    acc_bits: int = 32
    out_shift: int = 0
    input_bits: int = 8
    weight_bits: int = 8

    def __post_init__(self):
        if self.acc_bits not in (16, 32):
            raise ValueError("acc_bits must be 16 or 32")
        if self.input_bits != 8 or self.weight_bits != 8:
            raise ValueError("inputs and weights are fixed at 8 bits")
        if self.out_shift < 0:
            raise ValueError("out_shift must be >= 0")


@dataclass(frozen=True, eq=False)
class LayerDef:
    """One shift + pointwise layer of a network."""

    filter: SparseFilterMatrix
    width: int
    height: int
    shifts: tuple
    quant: QuantParams = QuantParams()
    packed: Optional[PackedFilterMatrix] = None

    def __post_init__(self):
        object.__setattr__(self, "shifts", tuple(int(s) for s in self.shifts))

    @property
    def in_channels(self) -> int:
        return self.filter.cols

    @property
    def out_channels(self) -> int:
        return self.filter.rows


@dataclass(frozen=True, eq=False)
class NetworkDef:
    """Ordered list of shift + pointwise layers."""

    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def total_nnz(self) -> int:
        return sum(l.filter.nnz for l in self.layers)


@dataclass(frozen=True)
class NetworkDiagnostic:
    layer: int
    message: str

    def __str__(self):
        return f"layer {self.layer}: {self.message}"


def _column_set(F_values: np.ndarray, cols: Iterable[int]) -> np.ndarray:
    idx = np.asarray(list(cols), dtype=np.int64)
    if idx.size == 0:
        raise GroupingError("column set must be nonempty")
    if idx.min() < 0 or idx.max() >= F_values.shape[1]:
        raise GroupingError(f"column index out of range for {F_values.shape[1]} columns")
    if len(np.unique(idx)) != idx.size:
        raise GroupingError("duplicate column index in column set")
    return idx


def density(F, cols: Iterable[int]) -> float:
    """Density of the combined column the given columns would form.

    Counts rows that have at least one nonzero among ``cols`` and divides
    by the number of rows.
    """
    from .validation import check_weight_matrix

    v = check_weight_matrix(F)
    idx = _column_set(v, cols)
    covered = int(np.count_nonzero((v[:, idx] != 0).any(axis=1)))
    return covered / v.shape[0]


def count_conflicts(F, cols: Iterable[int]) -> int:
    """Number of weights column-combine pruning would remove from ``cols``.

    A row with n >= 1 nonzeros among the columns contributes n - 1.
    """
    from .validation import check_weight_matrix

    v = check_weight_matrix(F)
    idx = _column_set(v, cols)
    counts = (v[:, idx] != 0).sum(axis=1)
    return int(np.maximum(counts - 1, 0).sum())


def validate_network(net: NetworkDef) -> Optional[NetworkDiagnostic]:
    """Check structural invariants; return the first violation or None."""
    if net.num_layers == 0:
        return NetworkDiagnostic(-1, "network has no layers")
    for l, layer in enumerate(net.layers):
        if layer.width < 1 or layer.height < 1:
            return NetworkDiagnostic(l, "spatial dimensions must be >= 1")
        if len(layer.shifts) != layer.in_channels:
            return NetworkDiagnostic(
                l, f"shift list length {len(layer.shifts)} != input channels {layer.in_channels}")
        bad = [s for s in layer.shifts if not (0 <= s < NUM_SHIFT_DIRECTIONS)]
        if bad:
            return NetworkDiagnostic(l, f"invalid shift direction {bad[0]}")
        if layer.packed is not None and layer.packed.rows != layer.filter.rows:
            return NetworkDiagnostic(l, "packed matrix row count differs from filter")
    for l in range(net.num_layers - 1):
        rows = net.layers[l].out_channels
        nxt = net.layers[l + 1].in_channels
        if rows != nxt:
            return NetworkDiagnostic(
                l, f"output channels {rows} do not match layer {l + 1} input channels {nxt}")
        if (net.layers[l].width, net.layers[l].height) != (
                net.layers[l + 1].width, net.layers[l + 1].height):
            return NetworkDiagnostic(l, "spatial dimensions change between layers")
    return None


def require_valid_network(net: NetworkDef) -> None:
    diag = validate_network(net)
    if diag is not None:
        raise NetworkError(str(diag))
