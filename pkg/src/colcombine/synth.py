"""Synthetic matrix and network generators for experiments and tests."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .matrix import (LayerDef, NetworkDef, QuantParams, SparseFilterMatrix,
                     NUM_SHIFT_DIRECTIONS)


def random_sparse_matrix(rows: int, cols: int, density: float, seed: int = 0,
                         max_magnitude: int = 127) -> SparseFilterMatrix:
    """Uniformly placed nonzeros with an exact count of round(density * size)."""
    rng = np.random.default_rng(seed)
    size = rows * cols
    nnz = int(round(density * size))
    values = np.zeros(size, dtype=np.int8)
    pos = rng.choice(size, size=nnz, replace=False)
    mags = rng.integers(1, max_magnitude + 1, size=nnz)
    signs = rng.choice((-1, 1), size=nnz)
    values[pos] = (mags * signs).astype(np.int8)
    return SparseFilterMatrix(values.reshape(rows, cols))


def random_sparse_network(channels: Sequence[int], height: int, width: int,
                          density: float, seed: int = 0, acc_bits: int = 32,
                          out_shift: int = 7, max_magnitude: int = 127) -> NetworkDef:
    """Random shift+pointwise network with round-robin shift directions."""
    rng = np.random.default_rng(seed)
    layers = []
    for li, (m, n) in enumerate(zip(channels[:-1], channels[1:])):
        f = random_sparse_matrix(n, m, density, seed=int(rng.integers(0, 2**31)),
                                 max_magnitude=max_magnitude)
        layers.append(LayerDef(
            filter=f, width=width, height=height,
            shifts=tuple(int(c) % NUM_SHIFT_DIRECTIONS for c in range(m)),
            quant=QuantParams(acc_bits=acc_bits, out_shift=out_shift),
        ))
    return NetworkDef(tuple(layers))
