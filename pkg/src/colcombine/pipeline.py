"""Cross-layer pipelining: chain one systolic array per layer and feed every
output element into the next layer as soon as it is produced.

Each layer runs the rigid schedule of `simulator` (column j starts word m at
offset + j + 8*m; the word for output row i completes at offset + 8*m + i +
(cols-1) + period).  The only scheduling freedom is each layer's start
offset: pipelined mode picks the smallest offset that never consumes an
element before it is produced (one register cycle per hop), while the
sequential baseline buffers whole intermediate maps and starts each layer
one cycle after the previous layer fully drains.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .exceptions import PipelineError
from .matrix import NetworkDef, require_valid_network
from .simulator import ArrayConfig, shift_source_words


@dataclass(frozen=True, eq=False)
class LayerSchedule:
    offset: int
    entry_cycles: np.ndarray   # (array cols used, n_words) input word start cycles
    exit_cycles: np.ndarray    # (rows, n_words) output word completion cycles
    avail_cycles: np.ndarray   # (array cols used, n_words) when inputs became ready
    window: tuple              # (first entry cycle, last exit cycle)


@dataclass(frozen=True, eq=False)
class PipelineSchedule:
    layers: tuple
    latency: int
    mode: str  # "pipelined" | "sequential"

    def check_causality(self) -> None:
        """Raise unless every element is consumed after it was produced."""
        for li, ls in enumerate(self.layers):
            if np.any(ls.entry_cycles < ls.avail_cycles + 1):
                raise PipelineError(f"layer {li} consumes an element before it is ready")
            if np.any(ls.exit_cycles <= ls.entry_cycles.min()):
                raise PipelineError(f"layer {li} emits an element before its pass begins")


def _layer_geometry(layer):
    if layer.packed is not None:
        grouping = layer.packed.grouping
        if not grouping.is_contiguous():
            raise PipelineError(
                "column groups must be contiguous; apply row permutation first")
        groups = grouping.groups
        cols = layer.packed.packed_cols
    else:
        groups = tuple((c,) for c in range(layer.filter.cols))
        cols = layer.filter.cols
    return groups, cols


def _schedule(net: NetworkDef, cfgs: Sequence[ArrayConfig], sequential: bool) -> PipelineSchedule:
    require_valid_network(net)
    if len(cfgs) != net.num_layers:
        raise PipelineError("need one array config per layer")
    first = net.layers[0]
    n_words = first.width * first.height
    # Network inputs sit in the input buffer: ready one cycle before start.
    ready = np.full((first.in_channels, n_words), -1, dtype=np.int64)

    schedules: List[LayerSchedule] = []
    prev_end = -1
    for li, (layer, cfg) in enumerate(zip(net.layers, cfgs)):
        groups, cols = _layer_geometry(layer)
        rows = layer.out_channels
        if rows > cfg.rows or cols > cfg.cols:
            raise PipelineError(
                f"layer {li} is {rows}x{cols} but its array is "
                f"{cfg.rows}x{cfg.cols}; pipelining runs without tiling")
        period = cfg.cell.word_period

        # When does each (array column, word) become available after the
        # shift block remaps spatial positions?  Border zeros are constants.
        avail = np.full((cols, n_words), -1, dtype=np.int64)
        for q, group in enumerate(groups):
            for ch in group:
                src = shift_source_words(layer.shifts[ch], layer.height, layer.width)
                ch_avail = np.where(src >= 0, ready[ch][src], -1)
                avail[q] = np.maximum(avail[q], ch_avail)

        m = np.arange(n_words)
        base_entry = np.arange(cols)[:, None] + 8 * m[None, :]
        if sequential:
            offset = prev_end + 1
        else:
            offset = max(0, int((avail + 1 - base_entry).max()))
        entry = offset + base_entry
        exits = offset + 8 * m[None, :] + np.arange(rows)[:, None] + (cols - 1) + period
        prev_end = int(exits.max())
        schedules.append(LayerSchedule(offset, entry, exits, avail,
                                       (int(entry.min()), prev_end)))
        ready = exits

    return PipelineSchedule(tuple(schedules), prev_end,
                            "sequential" if sequential else "pipelined")


def schedule_pipeline(net: NetworkDef, cfgs: Sequence[ArrayConfig]) -> PipelineSchedule:
    """Schedule the net with cross-layer pipelining; layers must fit their
    arrays whole (use the tiling simulator otherwise)."""
    return _schedule(net, cfgs, sequential=False)


def schedule_sequential(net: NetworkDef, cfgs: Sequence[ArrayConfig]) -> PipelineSchedule:
    """Baseline schedule: each layer starts after the previous fully drains."""
    return _schedule(net, cfgs, sequential=True)


def standalone_layer_cycles(net: NetworkDef, cfgs: Sequence[ArrayConfig]) -> List[int]:
    out = []
    n_words = net.layers[0].width * net.layers[0].height
    for layer, cfg in zip(net.layers, cfgs):
        _, cols = _layer_geometry(layer)
        out.append(8 * (n_words - 1) + (layer.out_channels - 1) + (cols - 1)
                   + cfg.cell.word_period)
    return out


def latency_report(net: NetworkDef, cfgs: Sequence[ArrayConfig]) -> dict:
    """Single-sample latency with and without cross-layer pipelining."""
    pipelined = schedule_pipeline(net, cfgs)
    sequential = schedule_sequential(net, cfgs)
    pipelined.check_causality()
    sequential.check_causality()
    return {
        "sequential": sequential.latency,
        "pipelined": pipelined.latency,
        "ratio": sequential.latency / pipelined.latency,
        "per_layer": standalone_layer_cycles(net, cfgs),
    }
