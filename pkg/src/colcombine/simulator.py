"""Functional, cycle-accounted simulation of bit-serial weight-stationary
systolic arrays, plus the shift and ReLU/requantization blocks around them.

Cell types
----------
* BL: balanced cell, 8-bit inputs and 8-bit accumulation (word period 8).
* IL: interleaved cell, 8-bit inputs and k-bit accumulation (k in {16, 32});
  the k - 8 cycle gap between words of one stream is filled by k/8
  independent streams taking turns.
* MX: interleaved cell that additionally multiplexes up to ``mux_width``
  input channels; each cell's stored weight selects one channel, which is
  how packed (column-combined) matrices are executed.

Cycle model
-----------
Values are computed with exact integer semantics; timing is tracked by a
per-word schedule rather than gate-level bit simulation.  Within one array
pass over an r x c occupied tile fed with n data words per stream:

* the word period is P = max(8, acc_bits); data words are assigned to the
  P/8 interleave streams round-robin, so column j starts word m at cycle
  j + 8*m (neighbouring columns are skewed by one cycle),
* the accumulation word for output row i completes at the array's right
  edge at cycle 8*m + i + (c - 1) + P,
* loading weights into the full R x C array takes 8*R + C - 1 cycles (one
  stream of 8-bit weight words per column, skewed by one cycle).

When a matrix is larger than the array it is partitioned into tiles and the
array alternates between weight loads and matrix multiplications; the load
of tile t+1 overlaps the output drain of tile t, so in steady state a tile
costs max(8*n_words, load) cycles, with the first load and the final drain
paid once.  Partial sums across column tiles of one row tile are held in a
k-bit side buffer; ReLU and requantization run after the final column tile.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .exceptions import SimulationError
from .matrix import (INT8_MAX, INT8_MIN, NUM_SHIFT_DIRECTIONS, SHIFT_OFFSETS,
                     LayerDef, PackedFilterMatrix, QuantParams,
                     SparseFilterMatrix)

CELL_KINDS = ("BL", "IL", "MX")


@dataclass(frozen=True)
class CellConfig:
    """Bit-serial cell parameters."""

    kind: str = "IL"
    acc_bits: int = 32
    input_bits: int = 8
    mux_width: int = 8

    def __post_init__(self):
        if self.kind not in CELL_KINDS:
            raise ValueError(f"unknown cell kind {self.kind!r}")
        if self.input_bits != 8:
            raise ValueError("inputs are fixed at 8 bits")
        if self.kind == "BL":
            if self.acc_bits != self.input_bits:
                raise ValueError("BL cells require acc_bits == input_bits")
        elif self.acc_bits not in (16, 32):
            raise ValueError("IL/MX cells require acc_bits in {16, 32}")
        if not (1 <= self.mux_width <= 8):
            raise ValueError("mux_width must lie in 1..8")

    @property
    def interleave(self) -> int:
        return self.acc_bits // self.input_bits

    @property
    def word_period(self) -> int:
        return max(self.input_bits, self.acc_bits)


@dataclass(frozen=True)
class ArrayConfig:
    rows: int = 32
    cols: int = 32
    cell: CellConfig = CellConfig()

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("array dimensions must be >= 1")


@dataclass(frozen=True, eq=False)
class SimTrace:
    """Result of a simulated run: exact outputs plus cycle bookkeeping."""

    output: np.ndarray          # (rows, n_words) k-bit values (wrapped)
    cycles_total: int
    cycles_weight_load: int
    cycles_compute: int
    word_period: int
    gap: int
    interleave: int
    input_schedule: np.ndarray  # (phys cols, n_words) word start cycles
    output_schedule: np.ndarray # (rows, n_words) word completion cycles
    stream_ids: np.ndarray      # (n_words,) interleave stream of each word
    overflow: bool
    phases: tuple               # ordered load/compute phase records

    def to_json(self) -> str:
        return json.dumps({
            "cycles_total": self.cycles_total,
            "cycles_weight_load": self.cycles_weight_load,
            "cycles_compute": self.cycles_compute,
            "word_period": self.word_period,
            "gap": self.gap,
            "interleave": self.interleave,
            "overflow": self.overflow,
            "phases": list(self.phases),
            "output_shape": list(self.output.shape),
        }, indent=1)


@dataclass(frozen=True)
class TilePlan:
    """Row-major grid of (r0, r1, c0, c1) tiles over a matrix, plus the
    alternating load/compute phase order."""

    tiles: tuple
    n_row_tiles: int
    n_col_tiles: int
    array_rows: int
    array_cols: int

    @property
    def n_tiles(self) -> int:
        return len(self.tiles)

    @property
    def phases(self) -> tuple:
        out = []
        for t in range(self.n_tiles):
            out.append(("load", t))
            out.append(("compute", t))
        return tuple(out)


def tile_plan(shape: Tuple[int, int], cfg: ArrayConfig) -> TilePlan:
    """Partition a rows x cols matrix into array-sized tiles."""
    rows, cols = int(shape[0]), int(shape[1])
    if rows < 1 or cols < 1:
        raise ValueError("matrix dimensions must be >= 1")
    r_edges = list(range(0, rows, cfg.rows)) + [rows]
    c_edges = list(range(0, cols, cfg.cols)) + [cols]
    tiles = []
    for r0, r1 in zip(r_edges[:-1], r_edges[1:]):
        for c0, c1 in zip(c_edges[:-1], c_edges[1:]):
            tiles.append((r0, r1, c0, c1))
    return TilePlan(tuple(tiles), len(r_edges) - 1, len(c_edges) - 1, cfg.rows, cfg.cols)


def _wrap_kbit(values: np.ndarray, k: int) -> np.ndarray:
    u = values.astype(np.int64) & ((1 << k) - 1)
    return np.where(u >= (1 << (k - 1)), u - (1 << k), u)


def _check_data(data) -> np.ndarray:
    d = np.asarray(data)
    if d.ndim != 2:
        raise SimulationError(f"data matrix must be 2-D, got shape {d.shape}")
    if not np.issubdtype(d.dtype, np.integer):
        raise SimulationError("data matrix must be integer typed")
    if d.size and (d.min() < INT8_MIN or d.max() > INT8_MAX):
        raise SimulationError("data words must fit in signed 8 bits")
    return d.astype(np.int64)


def _load_cycles(cfg: ArrayConfig) -> int:
    return 8 * cfg.rows + cfg.cols - 1


def _accumulate_plain(weights: np.ndarray, data: np.ndarray) -> np.ndarray:
    # Column-by-column accumulation in the order partial sums visit cells.
    r, c = weights.shape
    acc = np.zeros((r, data.shape[1]), dtype=np.int64)
    w = weights.astype(np.int64)
    for j in range(c):
        acc += w[:, j:j + 1] * data[j][None, :]
    return acc


def _accumulate_packed(weights, source_cols, data: np.ndarray) -> np.ndarray:
    r, c = weights.shape
    acc = np.zeros((r, data.shape[1]), dtype=np.int64)
    w = weights.astype(np.int64)
    for j in range(c):
        src = source_cols[:, j]
        sel = src >= 0
        gathered = np.zeros((r, data.shape[1]), dtype=np.int64)
        gathered[sel] = data[src[sel]]
        acc += w[:, j:j + 1] * gathered
    return acc


def simulate_array(weights, data, cfg: ArrayConfig) -> SimTrace:
    """Run one weight-load + matrix-multiplication pass of the array.

    ``weights`` is either a plain int8 tile (rows x cols, data indexed by
    column) or a PackedFilterMatrix executed on MX cells (data indexed by
    each cell's source column).  Output words are the exact integer products
    accumulated left-to-right, wrapped to acc_bits; the overflow flag is
    raised when any exact word exceeds the accumulator range.
    """
    data = _check_data(data)
    cell = cfg.cell
    if isinstance(weights, PackedFilterMatrix):
        if cell.kind != "MX":
            raise SimulationError("packed matrices require MX cells")
        if weights.grouping.max_group_size > cell.mux_width:
            raise SimulationError(
                f"group of {weights.grouping.max_group_size} columns exceeds "
                f"mux_width {cell.mux_width}")
        if int(weights.channel_slots.max()) >= cell.mux_width:
            raise SimulationError("channel_slot outside the cell's mux range")
        r, c = weights.rows, weights.packed_cols
        if r > cfg.rows or c > cfg.cols:
            raise SimulationError(
                f"tile {r}x{c} does not fit the {cfg.rows}x{cfg.cols} array")
        if data.shape[0] <= int(weights.source_cols.max()):
            raise SimulationError("data matrix has fewer channels than the packed "
                                  "matrix references")
        exact = _accumulate_packed(weights.weights, weights.source_cols, data)
    else:
        w = np.asarray(weights)
        if w.ndim != 2 or not np.issubdtype(w.dtype, np.integer):
            raise SimulationError("weight tile must be a 2-D integer array")
        if w.size and (w.min() < INT8_MIN or w.max() > INT8_MAX):
            raise SimulationError("weights must fit in signed 8 bits")
        r, c = w.shape
        if r > cfg.rows or c > cfg.cols:
            raise SimulationError(
                f"tile {r}x{c} does not fit the {cfg.rows}x{cfg.cols} array")
        if data.shape[0] != c:
            raise SimulationError(
                f"data matrix has {data.shape[0]} channels, tile expects {c}")
        exact = _accumulate_plain(w, data)

    k = cell.acc_bits
    output = _wrap_kbit(exact, k)
    overflow = bool(np.any(output != exact))

    n_words = data.shape[1]
    period = cell.word_period
    m = np.arange(n_words)
    input_schedule = np.arange(c)[:, None] + 8 * m[None, :]
    output_schedule = 8 * m[None, :] + np.arange(r)[:, None] + (c - 1) + period
    stream_ids = m % cell.interleave

    load = _load_cycles(cfg)
    compute = (8 * (n_words - 1) + (r - 1) + (c - 1) + period) if n_words else 0
    phases = ({"phase": "load", "tile": 0, "cycles": load, "overlapped": False},
              {"phase": "compute", "tile": 0, "cycles": compute, "overlapped": False})
    return SimTrace(
        output=output,
        cycles_total=load + compute,
        cycles_weight_load=load,
        cycles_compute=compute,
        word_period=period,
        gap=period - cell.input_bits,
        interleave=cell.interleave,
        input_schedule=input_schedule,
        output_schedule=output_schedule,
        stream_ids=stream_ids,
        overflow=overflow,
        phases=phases,
    )


def _translate(planes: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(planes)
    h, w = planes.shape[-2:]
    y0, y1 = max(dy, 0), h + min(dy, 0)
    x0, x1 = max(dx, 0), w + min(dx, 0)
    if y0 < y1 and x0 < x1:
        out[..., y0:y1, x0:x1] = planes[..., y0 - dy:y1 - dy, x0 - dx:x1 - dx]
    return out


def shift_apply(maps: np.ndarray, directions) -> np.ndarray:
    """Translate each channel by its direction, zero-padding at borders.

    ``maps`` has shape (..., channels, height, width); ``directions`` gives
    one direction code per channel (0 = identity, 1..8 = neighbours).
    """
    maps = np.asarray(maps)
    dirs = np.asarray(list(directions), dtype=np.int64)
    if dirs.ndim != 1 or dirs.size != maps.shape[-3]:
        raise ValueError(f"need one direction per channel ({maps.shape[-3]}), got {dirs.size}")
    if dirs.size and (dirs.min() < 0 or dirs.max() >= NUM_SHIFT_DIRECTIONS):
        raise ValueError("direction codes must lie in 0..8")
    out = np.empty_like(maps)
    for d in np.unique(dirs):
        sel = dirs == d
        dy, dx = SHIFT_OFFSETS[int(d)]
        out[..., sel, :, :] = _translate(maps[..., sel, :, :], dy, dx)
    return out


def shift_source_words(direction: int, height: int, width: int) -> np.ndarray:
    """For one channel, map each output word index (row-major over the
    spatial grid) to the word index it reads after shifting, or -1 where
    the border zero-pad supplies the value."""
    dy, dx = SHIFT_OFFSETS[int(direction)]
    yy, xx = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    sy, sx = yy - dy, xx - dx
    valid = (sy >= 0) & (sy < height) & (sx >= 0) & (sx < width)
    src = np.where(valid, sy * width + sx, -1)
    return src.reshape(-1)


def relu_quant(acc, q: QuantParams) -> np.ndarray:
    """ReLU then requantize: negatives clamp to zero, the rest shift right
    by out_shift (rounding half away from zero) and saturate to [0, 127]."""
    v = np.maximum(np.asarray(acc, dtype=np.int64), 0)
    s = q.out_shift
    if s > 0:
        v = (v + (1 << (s - 1))) >> s
    return np.minimum(v, INT8_MAX).astype(np.int8)


def bitserial_mac(x_words, weight: int, y_in_words, acc_bits: int = 32):
    """Bit-serial multiply-accumulate of one stored weight against a stream.

    Each word is processed LSB-first, one bit per cycle: the 8 input bits
    drive a shift-add against |weight| (the sign bit subtracts), the product
    is negated when the weight is negative, and a serial full adder merges
    it into the k-bit accumulation stream.  Returns (y_out words, cycles,
    overflow flag); words wrap to k bits and the flag records whether any
    exact sum fell outside the accumulator range.
    """
    if acc_bits not in (8, 16, 32):
        raise ValueError("acc_bits must be 8, 16 or 32")
    x_arr = np.atleast_1d(np.asarray(x_words, dtype=np.int64))
    y_arr = np.atleast_1d(np.asarray(y_in_words, dtype=np.int64))
    if x_arr.shape != y_arr.shape:
        raise ValueError("x and y_in streams must have the same length")
    w = int(weight)
    if not (INT8_MIN <= w <= INT8_MAX):
        raise ValueError("weight must fit in signed 8 bits")
    if x_arr.size and (x_arr.min() < INT8_MIN or x_arr.max() > INT8_MAX):
        raise ValueError("input words must fit in signed 8 bits")
    k = acc_bits
    half = 1 << (k - 1)
    mask = (1 << k) - 1
    w_abs = abs(w)
    out = np.empty_like(y_arr)
    overflow = False
    for n in range(x_arr.size):
        xb = int(x_arr[n]) & 0xFF
        p = 0
        for t in range(8):
            if (xb >> t) & 1:
                p += -(w_abs << 7) if t == 7 else (w_abs << t)
        if w < 0:
            p = -p
        au = int(y_arr[n]) & mask
        bu = p & mask
        carry = 0
        ou = 0
        for t in range(k):
            s = ((au >> t) & 1) + ((bu >> t) & 1) + carry
            ou |= (s & 1) << t
            carry = s >> 1
        val = ou - (1 << k) if ou >= half else ou
        if val != int(y_arr[n]) + int(x_arr[n]) * w:
            overflow = True
        out[n] = val
    return out, int(x_arr.size) * k, overflow


def run_layer(layer: LayerDef, maps: np.ndarray, cfg: ArrayConfig,
              use_packed: Optional[bool] = None):
    """Execute one shift + pointwise layer on the array.

    Applies the shift block, runs the tile plan (accumulating partial sums
    across column tiles in a k-bit side buffer), then ReLU/requantization
    after each row tile's final column tile.  Returns (output maps int8 of
    shape (out_channels, height, width), aggregated SimTrace).
    """
    maps = np.asarray(maps)
    if maps.shape != (layer.in_channels, layer.height, layer.width):
        raise SimulationError(
            f"input maps shape {maps.shape} does not match layer "
            f"({layer.in_channels}, {layer.height}, {layer.width})")
    if use_packed is None:
        use_packed = layer.packed is not None
    if use_packed and layer.packed is None:
        raise SimulationError("layer has no packed matrix")
    matrix = layer.packed if use_packed else layer.filter
    cell = cfg.cell
    if use_packed and cell.kind != "MX":
        raise SimulationError("packed execution requires MX cells")
    k = cell.acc_bits

    shifted = shift_apply(maps, layer.shifts)
    data = shifted.reshape(layer.in_channels, -1).astype(np.int64)
    n_words = data.shape[1]
    n_out = matrix.rows
    cols = matrix.packed_cols if use_packed else matrix.cols
    plan = tile_plan((n_out, cols), cfg)

    acc = np.zeros((n_out, n_words), dtype=np.int64)
    any_overflow = False
    for (r0, r1, c0, c1) in plan.tiles:
        if use_packed:
            tile = PackedFilterMatrix(
                matrix.weights[r0:r1, c0:c1],
                matrix.source_cols[r0:r1, c0:c1],
                matrix.channel_slots[r0:r1, c0:c1],
                _slice_grouping(matrix.grouping, c0, c1),
            )
            trace = simulate_array(tile, data, cfg)
        else:
            trace = simulate_array(matrix.values[r0:r1, c0:c1], data[c0:c1], cfg)
        acc[r0:r1] += trace.output
        any_overflow = any_overflow or trace.overflow

    wrapped = _wrap_kbit(acc, k)
    # per-tile flags miss overflow of the cross-tile total; checked below
    out = relu_quant(wrapped, layer.quant)

    load = _load_cycles(cfg)
    supply = 8 * n_words
    n_tiles = plan.n_tiles
    r_last, c_last = plan.tiles[-1][1] - plan.tiles[-1][0], plan.tiles[-1][3] - plan.tiles[-1][2]
    drain_last = (r_last - 1) + (c_last - 1) + cell.word_period
    total = load
    phases = [{"phase": "load", "tile": 0, "cycles": load, "overlapped": False}]
    for t in range(n_tiles):
        if t + 1 < n_tiles:
            slot = max(supply, load)
            total += slot
            phases.append({"phase": "compute", "tile": t, "cycles": supply,
                           "overlapped": False})
            phases.append({"phase": "load", "tile": t + 1, "cycles": load,
                           "overlapped": load <= supply})
        else:
            tail = (supply - 8 if n_words else 0) + drain_last
            total += tail
            phases.append({"phase": "compute", "tile": t, "cycles": tail,
                           "overlapped": False})
    load_exposed = load + sum(max(0, load - supply) for _ in range(n_tiles - 1))

    trace = SimTrace(
        output=out.reshape(n_out, n_words),
        cycles_total=total,
        cycles_weight_load=load_exposed,
        cycles_compute=total - load_exposed,
        word_period=cell.word_period,
        gap=cell.word_period - cell.input_bits,
        interleave=cell.interleave,
        input_schedule=np.arange(cols)[:, None] + 8 * np.arange(n_words)[None, :],
        output_schedule=8 * np.arange(n_words)[None, :] + np.arange(n_out)[:, None]
                        + (min(cols, cfg.cols) - 1) + cell.word_period,
        stream_ids=np.arange(n_words) % cell.interleave,
        overflow=any_overflow or bool(np.any(wrapped != acc)),
        phases=tuple(phases),
    )
    out_maps = out.reshape(n_out, layer.height, layer.width)
    return out_maps, trace


def _slice_grouping(grouping, c0: int, c1: int):
    from .matrix import ColumnGrouping
    return ColumnGrouping(tuple(grouping.groups[c0:c1]),
                          alpha=grouping.alpha, gamma=grouping.gamma)


def run_network(net, maps: np.ndarray, cfgs, use_packed: Optional[bool] = None):
    """Run every layer in order; ``cfgs`` is one ArrayConfig or one per layer.

    Returns (final output maps, list of per-layer SimTraces)."""
    if isinstance(cfgs, ArrayConfig):
        cfgs = [cfgs] * len(net.layers)
    if len(cfgs) != len(net.layers):
        raise SimulationError("need one array config per layer")
    traces = []
    out = np.asarray(maps)
    for layer, cfg in zip(net.layers, cfgs):
        out, trace = run_layer(layer, out, cfg, use_packed=use_packed)
        traces.append(trace)
    return out, traces
