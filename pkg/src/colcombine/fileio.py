"""Bit-exact file formats: SFM1 filter matrices, TNS1 tensors, grouping and
network JSON, mask files, and history CSV."""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import DataFormatError
from .matrix import (ColumnGrouping, LayerDef, NetworkDef, QuantParams,
                     SparseFilterMatrix)

SFM_MAGIC = b"SFM1"
TNS_MAGIC = b"TNS1"


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise DataFormatError(f"truncated file while reading {what}")
    return buf


def write_filter_matrix(path, matrix) -> None:
    """Write an int8 matrix as SFM1: magic, u32 rows, u32 cols, row-major int8."""
    values = matrix.values if isinstance(matrix, SparseFilterMatrix) else np.asarray(matrix)
    values = np.ascontiguousarray(values.astype(np.int8))
    with open(path, "wb") as f:
        f.write(SFM_MAGIC)
        f.write(struct.pack("<II", values.shape[0], values.shape[1]))
        f.write(values.tobytes())


def read_filter_matrix(path) -> SparseFilterMatrix:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != SFM_MAGIC:
            raise DataFormatError(f"bad magic {magic!r}, expected {SFM_MAGIC!r}")
        rows, cols = struct.unpack("<II", _read_exact(f, 8, "header"))
        if rows < 1 or cols < 1:
            raise DataFormatError(f"invalid dimensions {rows}x{cols}")
        payload = _read_exact(f, rows * cols, "payload")
        if f.read(1):
            raise DataFormatError("trailing bytes after payload")
    values = np.frombuffer(payload, dtype=np.int8).reshape(rows, cols)
    return SparseFilterMatrix(values.copy())


def write_mask(path, mask: np.ndarray) -> None:
    """Mask file: SFM1 container with 0/1 bytes (1 = pruned)."""
    write_filter_matrix(path, np.asarray(mask, dtype=bool).astype(np.int8))


def read_mask(path) -> np.ndarray:
    m = read_filter_matrix(path).values
    if not np.all((m == 0) | (m == 1)):
        raise DataFormatError("mask file contains values other than 0/1")
    return m.astype(bool)


def write_tensor(path, tensor: np.ndarray) -> None:
    """Write an int8 tensor as TNS1: magic, u32 rank, u32 dims, then int8 data."""
    t = np.ascontiguousarray(np.asarray(tensor).astype(np.int8))
    with open(path, "wb") as f:
        f.write(TNS_MAGIC)
        f.write(struct.pack("<I", t.ndim))
        f.write(struct.pack(f"<{t.ndim}I", *t.shape))
        f.write(t.tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != TNS_MAGIC:
            raise DataFormatError(f"bad magic {magic!r}, expected {TNS_MAGIC!r}")
        (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
        if rank < 1 or rank > 8:
            raise DataFormatError(f"unsupported tensor rank {rank}")
        dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "dims"))
        n = int(np.prod(dims))
        payload = _read_exact(f, n, "payload")
        if f.read(1):
            raise DataFormatError("trailing bytes after payload")
    return np.frombuffer(payload, dtype=np.int8).reshape(dims).copy()


def grouping_to_dict(grouping: ColumnGrouping) -> dict:
    return {
        "alpha": grouping.alpha,
        "gamma": grouping.gamma,
        "groups": [list(g) for g in grouping.groups],
    }


def grouping_from_dict(d: dict) -> ColumnGrouping:
    try:
        return ColumnGrouping(tuple(tuple(g) for g in d["groups"]),
                              alpha=d.get("alpha"), gamma=d.get("gamma"))
    except (KeyError, TypeError) as e:
        raise DataFormatError(f"malformed grouping JSON: {e}")


def write_grouping(path, grouping: ColumnGrouping) -> None:
    with open(path, "w") as f:
        json.dump(grouping_to_dict(grouping), f, indent=1)
        f.write("\n")


def read_grouping(path) -> ColumnGrouping:
    with open(path) as f:
        return grouping_from_dict(json.load(f))


def write_network(path, net: NetworkDef, weight_paths: Sequence[str],
                  grouping_paths: Optional[Sequence[Optional[str]]] = None) -> None:
    """Write the network JSON; weight files must be written separately.

    ``weight_paths`` (and optional ``grouping_paths``) are stored as given,
    interpreted relative to the JSON file's directory when read back.
    """
    layers = []
    for i, layer in enumerate(net.layers):
        entry = {
            "weights": str(weight_paths[i]),
            "width": layer.width,
            "height": layer.height,
            "shifts": list(layer.shifts),
            "acc_bits": layer.quant.acc_bits,
            "out_shift": layer.quant.out_shift,
        }
        if grouping_paths is not None and grouping_paths[i] is not None:
            entry["grouping"] = str(grouping_paths[i])
        layers.append(entry)
    with open(path, "w") as f:
        json.dump({"layers": layers}, f, indent=1)
        f.write("\n")


def read_network(path) -> Tuple[NetworkDef, List[Optional[ColumnGrouping]]]:
    """Read a network JSON plus its referenced weight (and grouping) files."""
    base = Path(path).parent
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise DataFormatError(f"network file is not valid JSON: {e}")
    if "layers" not in doc or not isinstance(doc["layers"], list):
        raise DataFormatError("network JSON must contain a 'layers' list")
    layers = []
    groupings: List[Optional[ColumnGrouping]] = []
    for i, entry in enumerate(doc["layers"]):
        try:
            weights = read_filter_matrix(base / entry["weights"])
            layer = LayerDef(
                filter=weights,
                width=int(entry["width"]),
                height=int(entry["height"]),
                shifts=tuple(entry["shifts"]),
                quant=QuantParams(acc_bits=int(entry["acc_bits"]),
                                  out_shift=int(entry["out_shift"])),
            )
        except KeyError as e:
            raise DataFormatError(f"layer {i} is missing field {e}")
        except FileNotFoundError as e:
            raise DataFormatError(f"layer {i}: missing weight file ({e})")
        layers.append(layer)
        if "grouping" in entry:
            groupings.append(read_grouping(base / entry["grouping"]))
        else:
            groupings.append(None)
    return NetworkDef(tuple(layers)), groupings


HISTORY_FIELDS = ("epoch", "nnz", "accuracy")


def write_history(path, history) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(HISTORY_FIELDS)
        for entry in history:
            w.writerow([entry[0], entry[1], f"{entry[2]:.6f}"])


def read_history(path):
    out = []
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r, None)
        if tuple(header or ()) != HISTORY_FIELDS:
            raise DataFormatError(f"unexpected history header {header}")
        for row in r:
            out.append((int(row[0]), int(row[1]), float(row[2])))
    return out
