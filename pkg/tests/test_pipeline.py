"""Cross-layer pipelining: schedules validated against a cycle-stepped token
simulation, causality, latency ordering, and functional equivalence."""

import numpy as np
import pytest

import colcombine as cc
from colcombine.exceptions import PipelineError
from colcombine.matrix import SHIFT_OFFSETS
from colcombine.simulator import CellConfig
from colcombine.synth import random_sparse_network


def build_packed_net(channels, height=4, width=4, density=0.35, seed=0, alpha=4):
    net = random_sparse_network(channels, height, width, density, seed=seed,
                                out_shift=6)
    groupings = [cc.group_columns(l.filter, alpha, 0.5)[0] for l in net.layers]
    net, groupings, input_order = cc.permute_network_rows(net, groupings)
    return cc.pack_network(net, groupings), input_order


def cfg_for(net, extra_rows=0, extra_cols=0, k=32):
    cfgs = []
    for layer in net.layers:
        cols = layer.packed.packed_cols if layer.packed is not None else layer.filter.cols
        cfgs.append(cc.ArrayConfig(rows=layer.out_channels + extra_rows,
                                   cols=cols + extra_cols,
                                   cell=CellConfig(kind="MX", acc_bits=k)))
    return cfgs


# ------------------------------------------------------------- event oracle

def token_grid_exits(offset, rows, cols, period, n_words):
    """Step tokens through the array cycle by cycle: inputs climb one row per
    cycle, partial sums move one column per cycle, and the two must sit in
    the same cell whenever they meet.  Returns measured completion cycles."""
    x_entry = np.empty((cols, n_words), dtype=np.int64)
    for q in range(cols):
        for m in range(n_words):
            x_entry[q, m] = offset + q + 8 * m
    spawn = np.empty((rows, n_words), dtype=np.int64)
    for i in range(rows):
        for m in range(n_words):
            spawn[i, m] = x_entry[0, m] + i
    exits = np.full((rows, n_words), -1, dtype=np.int64)
    end = int(spawn.max()) + cols + period
    for cycle in range(offset, end + 1):
        for i in range(rows):
            for m in range(n_words):
                q = cycle - spawn[i, m]
                if 0 <= q < cols:
                    assert cycle - x_entry[q, m] == i  # co-location
                elif q == cols:
                    exits[i, m] = cycle - 1 + period
    assert np.all(exits >= 0)
    return exits


def oracle_latency(net, cfgs, sequential):
    """Independent recomputation of the schedule: plain loops for shift
    sources and group readiness, brute-force scan for each layer's offset,
    token stepping for exit times."""
    first = net.layers[0]
    n_words = first.width * first.height
    ready = np.full((first.in_channels, n_words), -1, dtype=np.int64)
    all_exits = []
    prev_end = -1
    for layer, cfg in zip(net.layers, cfgs):
        h, w = layer.height, layer.width
        if layer.packed is not None:
            groups = layer.packed.grouping.groups
        else:
            groups = tuple((c,) for c in range(layer.filter.cols))
        cols = len(groups)
        rows = layer.out_channels
        period = cfg.cell.word_period

        avail = np.full((cols, n_words), -1, dtype=np.int64)
        for q, group in enumerate(groups):
            for ch in group:
                dy, dx = SHIFT_OFFSETS[layer.shifts[ch]]
                for y in range(h):
                    for x in range(w):
                        sy, sx = y - dy, x - dx
                        if 0 <= sy < h and 0 <= sx < w:
                            m = y * w + x
                            avail[q, m] = max(avail[q, m], ready[ch, sy * w + sx])
        if sequential:
            offset = prev_end + 1
        else:
            offset = 0
            while True:
                ok = all(offset + q + 8 * m >= avail[q, m] + 1
                         for q in range(cols) for m in range(n_words))
                if ok:
                    break
                offset += 1
        exits = token_grid_exits(offset, rows, cols, period, n_words)
        all_exits.append(exits)
        prev_end = int(exits.max())
        ready = exits
    return all_exits, prev_end


# ------------------------------------------------------------------- tests

def test_single_layer_ratio_is_one():
    net, _ = build_packed_net([6, 8])
    report = cc.latency_report(net, cfg_for(net))
    assert report["ratio"] == 1.0
    assert report["pipelined"] == report["sequential"]


def test_schedule_matches_event_oracle():
    net, _ = build_packed_net([6, 10, 8, 8], seed=3)
    cfgs = cfg_for(net)
    for sequential in (False, True):
        sched = (cc.schedule_sequential if sequential else cc.schedule_pipeline)(net, cfgs)
        exits, latency = oracle_latency(net, cfgs, sequential)
        assert sched.latency == latency
        for ls, ex in zip(sched.layers, exits):
            assert np.array_equal(ls.exit_cycles, ex)
    pipe = cc.schedule_pipeline(net, cfgs)
    seq = cc.schedule_sequential(net, cfgs)
    assert pipe.latency < seq.latency


def test_causality_holds_for_every_element():
    net, _ = build_packed_net([6, 10, 8, 8], seed=4)
    cfgs = cfg_for(net)
    for sched in (cc.schedule_pipeline(net, cfgs), cc.schedule_sequential(net, cfgs)):
        sched.check_causality()
        for ls in sched.layers:
            assert np.all(ls.entry_cycles >= ls.avail_cycles + 1)


def test_packed_latency_below_unpacked():
    # Column combining narrows the arrays, which cuts skew and drain.
    net, _ = build_packed_net([8, 12, 10, 8], seed=5)
    unpacked = cc.NetworkDef(tuple(
        cc.LayerDef(filter=l.filter, width=l.width, height=l.height,
                    shifts=l.shifts, quant=l.quant)
        for l in net.layers))
    packed_cfgs = cfg_for(net)
    unpacked_cfgs = [cc.ArrayConfig(rows=l.out_channels, cols=l.in_channels,
                                    cell=CellConfig(kind="MX", acc_bits=32))
                     for l in unpacked.layers]
    packed_lat = cc.schedule_pipeline(net, packed_cfgs).latency
    unpacked_lat = cc.schedule_pipeline(unpacked, unpacked_cfgs).latency
    assert packed_lat < unpacked_lat


def test_ratio_grows_with_depth():
    ratios = []
    for depth in (1, 2, 4, 6):
        net, _ = build_packed_net([8] * (depth + 1), seed=6)
        ratios.append(cc.latency_report(net, cfg_for(net))["ratio"])
    assert ratios == sorted(ratios)
    assert ratios[0] == 1.0
    assert ratios[-1] > ratios[0]


def test_layer_too_large_directs_to_tiling():
    net, _ = build_packed_net([6, 8], seed=7)
    small = [cc.ArrayConfig(rows=2, cols=2, cell=CellConfig(kind="MX", acc_bits=32))]
    with pytest.raises(PipelineError):
        cc.schedule_pipeline(net, small)


def test_non_contiguous_groups_rejected():
    net = random_sparse_network([6, 8], 4, 4, 0.4, seed=8)
    grouping, _ = cc.group_columns(net.layers[0].filter, 4, 0.5)
    packed_net = cc.pack_network(net, [grouping])
    if not grouping.is_contiguous():
        with pytest.raises(PipelineError):
            cc.schedule_pipeline(packed_net, cfg_for(packed_net))
    else:
        cc.schedule_pipeline(packed_net, cfg_for(packed_net))


def test_outputs_identical_packed_vs_plain_execution():
    # The pipeline changes timing only: packed (pipelined) execution and the
    # buffered plain execution must produce bit-identical maps.
    net, input_order = build_packed_net([8, 12, 10, 8], seed=9)
    maps = np.random.default_rng(0).integers(0, 128, size=(8, 4, 4)).astype(np.int8)
    maps = maps[input_order]
    big = cc.ArrayConfig(rows=16, cols=16, cell=CellConfig(kind="MX", acc_bits=32))
    out_packed, _ = cc.run_network(net, maps, big, use_packed=True)
    out_plain, _ = cc.run_network(net, maps, big, use_packed=False)
    assert np.array_equal(out_packed, out_plain)


def test_report_fields():
    net, _ = build_packed_net([6, 8, 8], seed=10)
    report = cc.latency_report(net, cfg_for(net))
    assert set(report) == {"sequential", "pipelined", "ratio", "per_layer"}
    assert len(report["per_layer"]) == 2
    assert report["ratio"] >= 1.0
