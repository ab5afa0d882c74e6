"""Input validation helpers shared by the estimators and the functional API."""

from __future__ import annotations

import numpy as np

from .exceptions import GroupingError
from .matrix import INT8_MAX, INT8_MIN, ColumnGrouping, SparseFilterMatrix


def check_weight_matrix(F) -> np.ndarray:
    """Return the 2-D numeric array behind ``F``.

    Accepts a SparseFilterMatrix or any 2-D integer/float array.  Packing
    operations only look at nonzero patterns and magnitudes, so float
    master weights are accepted alongside quantized int8 matrices.
    """
    if isinstance(F, SparseFilterMatrix):
        return F.values
    v = np.asarray(F)
    if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
        raise ValueError(f"weight matrix must be a nonempty 2-D array, got shape {v.shape}")
    if not (np.issubdtype(v.dtype, np.integer) or np.issubdtype(v.dtype, np.floating)):
        raise ValueError(f"weight matrix must be numeric, got dtype {v.dtype}")
    return v


def check_int8_matrix(F) -> np.ndarray:
    """Like check_weight_matrix but requires int8-representable integers."""
    if isinstance(F, SparseFilterMatrix):
        return F.values
    v = check_weight_matrix(F)
    if not np.issubdtype(v.dtype, np.integer):
        raise ValueError("expected an integer matrix")
    if v.min() < INT8_MIN or v.max() > INT8_MAX:
        raise ValueError("weights must fit in signed 8 bits")
    return v.astype(np.int8)


def check_grouping(grouping: ColumnGrouping, n_cols: int) -> ColumnGrouping:
    if not isinstance(grouping, ColumnGrouping):
        grouping = ColumnGrouping(tuple(grouping))
    grouping.validate_partition(n_cols)
    return grouping


def magnitudes(values: np.ndarray) -> np.ndarray:
    """|values| widened so abs(-128) does not wrap."""
    if np.issubdtype(values.dtype, np.integer):
        return np.abs(values.astype(np.int64))
    return np.abs(values.astype(np.float64))
