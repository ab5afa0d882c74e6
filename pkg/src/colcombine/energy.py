"""Energy-efficiency accounting: compute energy scales with the MAC count a
design actually performs, so packing quality fixes how close a design gets
to the optimum where only nonzero weights cost MACs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError
from .matrix import PackedFilterMatrix, SparseFilterMatrix


@dataclass(frozen=True)
class EnergyParams:
    """Per-sample energy model inputs (arbitrary units)."""

    e_mac: float        # energy per MAC operation
    e_mem: float        # total memory energy per sample
    n_mac: int          # MACs performed by the design
    n_mac_opt: int      # MACs of the ideal design (nonzero weights only)

    def __post_init__(self):
        if self.n_mac_opt < 1 or self.n_mac < self.n_mac_opt:
            raise ConfigError("need n_mac >= n_mac_opt >= 1")
        if self.e_mac <= 0 or self.e_mem < 0:
            raise ConfigError("need e_mac > 0 and e_mem >= 0")

    @property
    def c(self) -> float:
        """Ratio of performed to optimal MACs (>= 1)."""
        return self.n_mac / self.n_mac_opt

    @property
    def r(self) -> float:
        """Memory energy relative to compute energy."""
        return self.e_mem / (self.e_mac * self.n_mac)

    @classmethod
    def from_ratios(cls, c: float, r: float, e_mac: float = 1.0,
                    n_mac_opt: int = 1_000_000) -> "EnergyParams":
        """Build params realizing given c and r exactly."""
        if c < 1:
            raise ConfigError("c must be >= 1")
        n_mac = int(round(c * n_mac_opt))
        return cls(e_mac=e_mac, e_mem=r * e_mac * n_mac, n_mac=n_mac,
                   n_mac_opt=n_mac_opt)


def energy_efficiency_ratio(p: EnergyParams) -> float:
    """Achieved over optimal energy efficiency: (1/c + r) / (1 + r)."""
    if p.c < 1:
        raise ConfigError("c must be >= 1")
    return (1.0 / p.c + p.r) / (1.0 + p.r)


def mac_counts(matrix, data_width: int):
    """(n_mac, n_mac_opt) for running a matrix against data of a given
    width: every cell of a (packed) matrix computes on every word, while
    the optimum spends MACs on nonzero weights only."""
    if data_width < 1:
        raise ConfigError("data width must be >= 1")
    if isinstance(matrix, PackedFilterMatrix):
        cells = matrix.rows * matrix.packed_cols
        nnz = matrix.nnz
    elif isinstance(matrix, SparseFilterMatrix):
        cells = matrix.rows * matrix.cols
        nnz = matrix.nnz
    else:
        v = np.asarray(matrix)
        cells = v.shape[0] * v.shape[1]
        nnz = int(np.count_nonzero(v))
    return cells * data_width, max(1, nnz * data_width)
