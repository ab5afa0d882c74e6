"""Column combining: grouping, conflict pruning, packing, row permutation.

The grouping policy is dense-column-first and greedy: ungrouped columns are
taken in ascending index order and each one joins the existing group whose
combined column would be densest, subject to a size cap (alpha) and a cap on
the group's total conflicts (gamma per row on average, i.e. gamma * rows).
If no group qualifies the column opens a new singleton group.  Ties on
density break toward the lowest group index, which makes runs reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import GroupingError, IntegrityError
from .matrix import (ColumnGrouping, LayerDef, NetworkDef, PackedFilterMatrix,
                     SparseFilterMatrix)
from .validation import check_grouping, check_int8_matrix, check_weight_matrix, magnitudes


@dataclass(frozen=True)
class GroupingStep:
    """One greedy decision: the column considered, the density/overlap of
    every candidate group with that column admitted, and where it went."""

    selected_col: int
    candidate_densities: tuple
    candidate_overlaps: tuple
    chosen_group: int
    opened_new_group: bool


@dataclass(frozen=True)
class GroupingTrace:
    """Audit record of a grouping run; replaying it reproduces the grouping."""

    steps: tuple
    grouping: ColumnGrouping

    def replay(self) -> ColumnGrouping:
        groups: List[List[int]] = []
        for step in self.steps:
            if step.opened_new_group:
                groups.append([step.selected_col])
            else:
                groups[step.chosen_group].append(step.selected_col)
        return ColumnGrouping(tuple(tuple(g) for g in groups),
                              alpha=self.grouping.alpha, gamma=self.grouping.gamma)

    def to_json(self) -> str:
        doc = {
            "alpha": self.grouping.alpha,
            "gamma": self.grouping.gamma,
            "groups": [list(g) for g in self.grouping.groups],
            "steps": [
                {
                    "selected_col": s.selected_col,
                    "candidate_densities": list(s.candidate_densities),
                    "candidate_overlaps": list(s.candidate_overlaps),
                    "chosen_group": s.chosen_group,
                    "opened_new_group": s.opened_new_group,
                }
                for s in self.steps
            ],
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "GroupingTrace":
        doc = json.loads(text)
        steps = tuple(
            GroupingStep(
                selected_col=int(s["selected_col"]),
                candidate_densities=tuple(s["candidate_densities"]),
                candidate_overlaps=tuple(s["candidate_overlaps"]),
                chosen_group=int(s["chosen_group"]),
                opened_new_group=bool(s["opened_new_group"]),
            )
            for s in doc["steps"]
        )
        grouping = ColumnGrouping(tuple(tuple(g) for g in doc["groups"]),
                                  alpha=doc.get("alpha"), gamma=doc.get("gamma"))
        return cls(steps, grouping)


def group_columns(F, alpha: int, gamma: float) -> Tuple[ColumnGrouping, GroupingTrace]:
    """Partition the columns of ``F`` into combined-column groups.

    Returns the grouping and a per-decision trace.  Works on int8 matrices
    and on float master weights (only nonzero patterns matter here).
    """
    if alpha < 1:
        raise ValueError("alpha must be >= 1")
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    v = check_weight_matrix(F)
    nz = v != 0
    n_rows, n_cols = v.shape
    conflict_cap = gamma * n_rows

    groups: List[List[int]] = []
    # Per-group count of nonzeros in each row; grown as groups are opened.
    counts = np.zeros((0, n_rows), dtype=np.int32)
    sizes: List[int] = []
    steps: List[GroupingStep] = []

    for c in range(n_cols):
        pattern = nz[:, c].astype(np.int32)
        if counts.shape[0]:
            cand = counts + pattern[None, :]
            covered = (cand > 0).sum(axis=1)
            overlaps = cand.sum(axis=1) - covered
            densities = covered / n_rows
            feasible = (np.asarray(sizes) + 1 <= alpha) & (overlaps <= conflict_cap)
            if feasible.any():
                key = np.where(feasible, densities, -1.0)
                best = int(np.argmax(key))  # first max -> lowest group index
            else:
                best = -1
        else:
            densities = np.zeros(0)
            overlaps = np.zeros(0, dtype=np.int64)
            best = -1

        if best >= 0:
            groups[best].append(c)
            counts[best] += pattern
            sizes[best] += 1
            steps.append(GroupingStep(c, tuple(densities.tolist()),
                                      tuple(int(o) for o in overlaps), best, False))
        else:
            groups.append([c])
            counts = np.vstack([counts, pattern[None, :]])
            sizes.append(1)
            steps.append(GroupingStep(c, tuple(densities.tolist()),
                                      tuple(int(o) for o in overlaps),
                                      len(groups) - 1, True))

    grouping = ColumnGrouping(tuple(tuple(g) for g in groups), alpha=alpha, gamma=gamma)
    return grouping, GroupingTrace(tuple(steps), grouping)


def group_prune(F, grouping: ColumnGrouping):
    """Resolve conflicts inside each group: per row, keep only the first
    entry (in group column order) whose magnitude equals the row maximum.

    Returns the same kind of object it was given (SparseFilterMatrix in,
    SparseFilterMatrix out; plain array in, plain array out).
    """
    v = check_weight_matrix(F)
    grouping = check_grouping(grouping, v.shape[1])
    out = v.copy()
    for g in grouping.groups:
        if len(g) == 1:
            continue
        idx = list(g)
        mags = magnitudes(out[:, idx])
        row_max = mags.max(axis=1)
        first_max = np.argmax(mags == row_max[:, None], axis=1)
        keep = np.zeros_like(mags, dtype=bool)
        keep[np.arange(v.shape[0]), first_max] = True
        out[:, idx] = np.where(keep, out[:, idx], 0)
    if isinstance(F, SparseFilterMatrix):
        return SparseFilterMatrix(out)
    return out


def pack(F_pruned, grouping: ColumnGrouping) -> PackedFilterMatrix:
    """Combine each group into a single packed column.

    ``F_pruned`` must already be conflict-free within groups (at most one
    nonzero per row per group); anything else raises IntegrityError.
    """
    v = check_int8_matrix(F_pruned)
    grouping = check_grouping(grouping, v.shape[1])
    n = v.shape[0]
    h = grouping.num_groups
    weights = np.zeros((n, h), dtype=np.int8)
    source = np.full((n, h), -1, dtype=np.int32)
    slots = np.full((n, h), -1, dtype=np.int16)
    for gi, g in enumerate(grouping.groups):
        idx = list(g)
        sub = v[:, idx]
        nz = sub != 0
        per_row = nz.sum(axis=1)
        if np.any(per_row > 1):
            row = int(np.argmax(per_row > 1))
            raise IntegrityError(
                f"row {row} has {int(per_row[row])} survivors in group {gi}; "
                "run group_prune before packing")
        rows_with = np.nonzero(per_row == 1)[0]
        slot = np.argmax(nz[rows_with], axis=1)
        weights[rows_with, gi] = sub[rows_with, slot]
        source[rows_with, gi] = np.asarray(idx, dtype=np.int32)[slot]
        slots[rows_with, gi] = slot
    return PackedFilterMatrix(weights, source, slots, grouping)


def packing_efficiency(packed: PackedFilterMatrix) -> float:
    """Fraction of packed cells holding a weight (= systolic utilization)."""
    return packed.nnz / (packed.rows * packed.packed_cols)


@dataclass(frozen=True, eq=False)
class RowPermutation:
    """Bijection on row indices; ``order[p]`` is the old index at new slot p."""

    order: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.order, dtype=np.int64)
        if sorted(o.tolist()) != list(range(o.size)):
            raise GroupingError("row permutation is not a bijection")
        o = o.copy()
        o.setflags(write=False)
        object.__setattr__(self, "order", o)

    @property
    def size(self) -> int:
        return self.order.size

    def inverse(self) -> "RowPermutation":
        inv = np.empty_like(self.order)
        inv[self.order] = np.arange(self.order.size)
        return RowPermutation(inv)

    def apply_to_rows(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values)[self.order]

    def apply_to_cols(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values)[:, self.order]

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.order, np.arange(self.order.size)))


def row_permutation(grouping_next: ColumnGrouping) -> RowPermutation:
    """Permutation of the previous layer's rows making the given grouping's
    groups contiguous: group 0's columns first (in group order), then
    group 1's, and so on."""
    n = grouping_next.num_columns
    grouping_next.validate_partition(n)
    order = [c for g in grouping_next.groups for c in g]
    return RowPermutation(np.asarray(order))


def renumber_contiguous(grouping: ColumnGrouping) -> ColumnGrouping:
    """The grouping as it looks after its columns are renumbered by
    ``row_permutation(grouping)``: consecutive runs of the same sizes."""
    runs = []
    nxt = 0
    for g in grouping.groups:
        runs.append(tuple(range(nxt, nxt + len(g))))
        nxt += len(g)
    return ColumnGrouping(tuple(runs), alpha=grouping.alpha, gamma=grouping.gamma)


def permute_network_rows(net: NetworkDef, groupings: Sequence[ColumnGrouping]):
    """Row-permute every layer so each layer's column groups are contiguous.

    Layer l's rows are reordered by the grouping of layer l+1 (the last
    layer keeps its row order, since its outputs leave the network), and
    each layer's columns plus shift assignments are renumbered to match.
    Returns (permuted NetworkDef, contiguous groupings, input channel order):
    the caller must reorder input-sample channels by the returned order.
    """
    if len(groupings) != net.num_layers:
        raise GroupingError("need one grouping per layer")
    L = net.num_layers
    col_orders = [row_permutation(g) for g in groupings]
    new_layers = []
    new_groupings = []
    for l in range(L):
        col_perm = col_orders[l]
        row_perm = col_orders[l + 1] if l + 1 < L else RowPermutation(
            np.arange(net.layers[l].filter.rows))
        layer = net.layers[l]
        if col_perm.size != layer.filter.cols or row_perm.size != layer.filter.rows:
            raise GroupingError(f"grouping shape does not match layer {l}")
        values = row_perm.apply_to_rows(col_perm.apply_to_cols(layer.filter.values))
        shifts = tuple(layer.shifts[c] for c in col_perm.order)
        new_groupings.append(renumber_contiguous(groupings[l]))
        new_layers.append(LayerDef(filter=SparseFilterMatrix(values), width=layer.width,
                                   height=layer.height, shifts=shifts, quant=layer.quant))
    return NetworkDef(tuple(new_layers)), new_groupings, col_orders[0].order.copy()


class ColumnCombiner(BaseEstimator, TransformerMixin):
    """Fit/transform wrapper around column combining.

    ``fit`` learns a column grouping from a sparse weight matrix and
    ``transform`` returns the packed dense matrix (rows x groups, int8).
    Use ``pack_details`` for the full packed structure with source columns
    and mux slots.
    """

    def __init__(self, alpha=8, gamma=0.5):
        self.alpha = alpha
        self.gamma = gamma

    def fit(self, X, y=None):
        v = check_weight_matrix(X)
        self.grouping_, self.trace_ = group_columns(v, self.alpha, self.gamma)
        self.n_features_in_ = v.shape[1]
        pruned = group_prune(check_int8_matrix(X), self.grouping_) \
            if np.issubdtype(v.dtype, np.integer) else None
        if pruned is not None:
            packed = pack(pruned, self.grouping_)
            self.packing_efficiency_ = packing_efficiency(packed)
        self.n_groups_ = self.grouping_.num_groups
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "grouping_"):
            raise RuntimeError("ColumnCombiner is not fitted")
        return self.pack_details(X).weights.copy()

    def pack_details(self, X) -> PackedFilterMatrix:
        v = check_int8_matrix(X)
        if v.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {v.shape[1]} columns, combiner was fitted on {self.n_features_in_}")
        return pack(group_prune(v, self.grouping_), self.grouping_)
