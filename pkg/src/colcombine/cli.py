"""Command-line front end: pack, train, simulate, pipeline, sweep, report.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 invariant
violation.  Reports are deterministic for a fixed seed; timestamps live in
a separate "meta" field so result payloads byte-reproduce.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import fileio
from .energy import EnergyParams, energy_efficiency_ratio, mac_counts
from .exceptions import (ColCombineError, ConfigError, DataFormatError)
from .matrix import PackingParams, require_valid_network
from .packing import (group_columns, group_prune, pack, packing_efficiency,
                      permute_network_rows)
from .pipeline import latency_report
from .simulator import ArrayConfig, CellConfig, run_network, tile_plan
from .synth import random_sparse_matrix
from .training import (Dataset, ShiftNet, TrainConfig, dataset_fraction,
                       iterative_train, limited_data_comparison, load_idx,
                       make_synthetic_dataset, pack_network, quantize_network,
                       split_dataset)


def _write_report(path, config: dict, results: dict) -> None:
    doc = {"config": config, "results": results,
           "meta": {"timestamp": time.strftime("%Y-%m-%dT%H:%M:%S")}}
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def _array_config(args, kind="IL") -> ArrayConfig:
    return ArrayConfig(rows=args.array_rows, cols=args.array_cols,
                       cell=CellConfig(kind=kind, acc_bits=args.acc_bits))


def _load_or_synth_matrix(args):
    if args.weights:
        return fileio.read_filter_matrix(args.weights)
    return random_sparse_matrix(args.rows, args.cols, args.density, seed=args.seed)


def cmd_pack(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    matrix = _load_or_synth_matrix(args)
    grouping, trace = group_columns(matrix, args.alpha, args.gamma)
    pruned = group_prune(matrix, grouping)
    packed = pack(pruned, grouping)
    cfg = _array_config(args, kind="MX")
    tiles_before = tile_plan((matrix.rows, matrix.cols), cfg).n_tiles
    tiles_after = tile_plan((packed.rows, packed.packed_cols), cfg).n_tiles

    fileio.write_grouping(out / "grouping.json", grouping)
    fileio.write_filter_matrix(out / "packed.sfm", packed.weights)
    (out / "trace.json").write_text(trace.to_json() + "\n")
    results = {
        "rows": matrix.rows,
        "cols": matrix.cols,
        "nnz_before": matrix.nnz,
        "nnz_after": pruned.nnz,
        "groups": grouping.num_groups,
        "packing_efficiency": packing_efficiency(packed),
        "tiles_before": tiles_before,
        "tiles_after": tiles_after,
    }
    _write_report(out / "report.json", _config_dict(args), results)
    print(f"packed {matrix.cols} columns into {grouping.num_groups} groups; "
          f"efficiency {packing_efficiency(packed):.3f}, "
          f"tiles {tiles_before} -> {tiles_after}")
    return 0


def _load_dataset(args) -> Dataset:
    if args.images or args.labels:
        if not (args.images and args.labels):
            raise ConfigError("--images and --labels must be given together")
        data = load_idx(args.images, args.labels)
    else:
        data = make_synthetic_dataset(args.samples_per_class, channels=args.channels,
                                      noise=args.noise, seed=args.seed)
    if args.fraction < 1:
        data = dataset_fraction(data, args.fraction, seed=args.seed)
    return data


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = _load_dataset(args)
    train, evald = split_dataset(data, 0.25, seed=args.seed)
    hidden = [int(h) for h in args.hidden.split(",") if h]
    channels = [train.images.shape[1], *hidden, data.num_classes]
    model = ShiftNet(channels, height=train.images.shape[2],
                     width=train.images.shape[3], seed=args.seed)
    rho = args.rho if args.rho else max(1, int(args.rho_fraction * model.nnz()))
    params = PackingParams(alpha=args.alpha, beta=args.beta, gamma=args.gamma, rho=rho)
    cfg = TrainConfig(eta=args.eta, epochs_per_iteration=args.epochs_per_iteration,
                      final_epochs=args.final_epochs, seed=args.seed)
    result = iterative_train(model, params, cfg, train, evald)

    fileio.write_history(out / "history.csv", result.history)
    calib = Dataset(train.images[:64], train.labels[:64])
    net = pack_network(quantize_network(model, calib, acc_bits=args.acc_bits),
                       result.groupings)
    weight_paths, grouping_paths = [], []
    for li, layer in enumerate(net.layers):
        wp, gp = f"layer{li}.sfm", f"layer{li}.grouping.json"
        fileio.write_filter_matrix(out / wp, layer.filter)
        fileio.write_grouping(out / gp, result.groupings[li])
        fileio.write_mask(out / f"layer{li}.mask.sfm", result.mask.layers[li])
        weight_paths.append(wp)
        grouping_paths.append(gp)
    fileio.write_network(out / "network.json", net, weight_paths, grouping_paths)
    results = {
        "iterations": result.iterations,
        "final_nnz": result.mask.nnz(),
        "rho": rho,
        "final_accuracy": result.history[-1][2],
        "epochs": result.history[-1][0],
    }
    _write_report(out / "report.json", _config_dict(args), results)
    print(f"trained {result.iterations} iterations to nnz={result.mask.nnz()} "
          f"(target {rho}); eval accuracy {result.history[-1][2]:.3f}")
    return 0


def cmd_simulate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net, groupings = fileio.read_network(args.network)
    require_valid_network(net)
    maps = fileio.read_tensor(args.input)
    use_packed = args.packed
    if use_packed:
        if any(g is None for g in groupings):
            raise ConfigError("--packed needs grouping files in the network JSON")
        net = pack_network(net, groupings)
    cfg = _array_config(args, kind="MX" if use_packed else args.cell)
    outputs, traces = run_network(net, maps, cfg, use_packed=use_packed)
    fileio.write_tensor(out / "output.tns", outputs)
    doc = [json.loads(t.to_json()) for t in traces]
    (out / "trace.json").write_text(json.dumps(doc, indent=1) + "\n")
    total = sum(t.cycles_total for t in traces)
    _write_report(out / "report.json", _config_dict(args),
                  {"cycles_total": total,
                   "per_layer_cycles": [t.cycles_total for t in traces],
                   "overflow": any(t.overflow for t in traces)})
    print(f"simulated {net.num_layers} layers in {total} cycles")
    return 0


def cmd_pipeline(args) -> int:
    net, groupings = fileio.read_network(args.network)
    require_valid_network(net)
    if all(g is not None for g in groupings):
        net, groupings, _ = permute_network_rows(net, groupings)
        net = pack_network(net, groupings)
    cfgs = [_array_config(args)] * net.num_layers
    report = latency_report(net, cfgs)
    _write_report(args.out, _config_dict(args), report)
    print(f"pipelined {report['pipelined']} vs sequential {report['sequential']} "
          f"cycles (ratio {report['ratio']:.2f})")
    return 0


SWEEP_FIELDS = ("param", "value", "packing_efficiency", "groups", "tiles", "accuracy")


def cmd_sweep(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    values = [float(v) for v in args.values.split(",") if v]
    if not values:
        raise ConfigError("--values must list at least one value")
    matrix = _load_or_synth_matrix(args)
    cfg = _array_config(args, kind="MX")
    rows = []
    for v in values:
        alpha = int(v) if args.param == "alpha" else args.alpha
        gamma = v if args.param == "gamma" else args.gamma
        grouping, _ = group_columns(matrix, alpha, gamma)
        packed = pack(group_prune(matrix, grouping), grouping)
        acc = ""
        if args.train:
            acc = f"{_sweep_accuracy(args, alpha, gamma):.4f}"
        rows.append({
            "param": args.param,
            "value": v,
            "packing_efficiency": packing_efficiency(packed),
            "groups": grouping.num_groups,
            "tiles": tile_plan((packed.rows, packed.packed_cols), cfg).n_tiles,
            "accuracy": acc,
        })
    import csv
    with open(out / "sweep.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        w.writerows(rows)
    _write_report(out / "sweep.json", _config_dict(args), {"rows": rows})
    for r in rows:
        print(f"{r['param']}={r['value']}: efficiency {r['packing_efficiency']:.3f} "
              f"({r['groups']} groups, {r['tiles']} tiles)")
    return 0


def _sweep_accuracy(args, alpha, gamma) -> float:
    data = make_synthetic_dataset(48, channels=8, seed=args.seed)
    train, evald = split_dataset(data, 0.25, seed=args.seed)
    model = ShiftNet([8, 16, 16, 10], seed=args.seed)
    params = PackingParams(alpha=alpha, beta=20.0, gamma=gamma,
                           rho=max(1, int(0.3 * model.nnz())))
    cfg = TrainConfig(epochs_per_iteration=6, final_epochs=12, seed=args.seed)
    return iterative_train(model, params, cfg, train, evald).history[-1][2]


def cmd_report(args) -> int:
    if args.experiment == "energy":
        results = {"points": []}
        for r in (0.0, 0.06, 0.1):
            for inv_c in (1.0, 0.945, 0.5):
                p = EnergyParams.from_ratios(1.0 / inv_c, r)
                results["points"].append({
                    "c": 1.0 / inv_c, "r": r,
                    "efficiency_ratio": energy_efficiency_ratio(p),
                })
        if args.weights:
            matrix = fileio.read_filter_matrix(args.weights)
            grouping, _ = group_columns(matrix, args.alpha, args.gamma)
            packed = pack(group_prune(matrix, grouping), grouping)
            n_mac, n_opt = mac_counts(packed, args.data_width)
            p = EnergyParams(e_mac=1.0, e_mem=0.06 * n_mac, n_mac=n_mac, n_mac_opt=n_opt)
            results["packed_matrix"] = {
                "n_mac": n_mac, "n_mac_opt": n_opt, "c": p.c,
                "efficiency_ratio": energy_efficiency_ratio(p),
            }
    elif args.experiment == "limited-data":
        results = limited_data_comparison(args.fraction, seeds=[args.seed + i for i in range(3)])
    else:
        raise ConfigError(f"unknown experiment {args.experiment!r}")
    _write_report(args.out, _config_dict(args), results)
    print(f"wrote {args.experiment} report to {args.out}")
    return 0


def _config_dict(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items())
            if k != "func" and v is not None}


def _add_common(p, *, rows_default=32):
    p.add_argument("--alpha", type=int, default=8)
    p.add_argument("--beta", type=float, default=20.0)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--rho", type=int, default=0)
    p.add_argument("--array-rows", type=int, default=rows_default)
    p.add_argument("--array-cols", type=int, default=rows_default)
    p.add_argument("--acc-bits", type=int, choices=(16, 32), default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fraction", type=float, default=1.0)


def _add_synth_matrix(p):
    p.add_argument("--weights", help="SFM1 filter matrix (default: synthetic)")
    p.add_argument("--rows", type=int, default=96)
    p.add_argument("--cols", type=int, default=95)
    p.add_argument("--density", type=float, default=0.16)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="colcombine",
                                 description="Pack sparse filter matrices by column "
                                             "combining and simulate them on bit-serial "
                                             "systolic arrays.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pack", help="group, conflict-prune and pack one matrix")
    _add_common(p)
    _add_synth_matrix(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("train", help="run the iterative prune/retrain loop")
    _add_common(p)
    p.add_argument("--images", help="IDX image file (default: synthetic task)")
    p.add_argument("--labels", help="IDX label file")
    p.add_argument("--samples-per-class", type=int, default=96)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--noise", type=int, default=30)
    p.add_argument("--hidden", default="16,16")
    p.add_argument("--eta", type=float, default=0.1)
    p.add_argument("--rho-fraction", type=float, default=0.25)
    p.add_argument("--epochs-per-iteration", type=int, default=16)
    p.add_argument("--final-epochs", type=int, default=30)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="run a network on the array simulator")
    _add_common(p)
    p.add_argument("--network", required=True)
    p.add_argument("--input", required=True, help="TNS1 input maps")
    p.add_argument("--cell", choices=("BL", "IL", "MX"), default="IL")
    p.add_argument("--packed", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("pipeline", help="cross-layer pipelining latency report")
    _add_common(p)
    p.add_argument("--network", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("sweep", help="sweep alpha or gamma and tabulate efficiency")
    _add_common(p)
    _add_synth_matrix(p)
    p.add_argument("--param", choices=("alpha", "gamma"), required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--train", action="store_true",
                   help="also train per point to fill the accuracy column")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="energy or limited-data experiment reports")
    _add_common(p)
    p.add_argument("--experiment", choices=("energy", "limited-data"), required=True)
    p.add_argument("--weights")
    p.add_argument("--data-width", type=int, default=1024)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DataFormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except ColCombineError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
