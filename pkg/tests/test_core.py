"""Core types, density/conflict counting, network validation, file formats."""

import numpy as np
import pytest

import colcombine as cc
from colcombine import fileio
from colcombine.exceptions import DataFormatError, GroupingError
from colcombine.synth import random_sparse_matrix, random_sparse_network


def test_density_single_column():
    F = cc.SparseFilterMatrix(np.array([[1], [0], [2], [0]]))
    assert cc.density(F, {0}) == 0.5


def test_density_disjoint_full_coverage():
    F = cc.SparseFilterMatrix(np.array([[1, 0], [0, 2], [3, 0], [0, 4]]))
    assert cc.density(F, {0, 1}) == 1.0


def test_density_matches_row_scan_oracle():
    F = random_sparse_matrix(96, 2, 0.16, seed=7)
    covered = 0
    for r in range(96):
        if F.values[r, 0] != 0 or F.values[r, 1] != 0:
            covered += 1
    assert cc.density(F, [0, 1]) == covered / 96


def test_density_invalid_index():
    F = cc.SparseFilterMatrix(np.array([[1, 2]]))
    with pytest.raises(GroupingError):
        cc.density(F, [5])
    with pytest.raises(GroupingError):
        cc.density(F, [])
    with pytest.raises(GroupingError):
        cc.density(F, [0, 0])


def test_count_conflicts_shared_row():
    F = cc.SparseFilterMatrix(np.array([[1, 2], [0, 3]]))
    assert cc.count_conflicts(F, [0, 1]) == 1


def test_count_conflicts_disjoint():
    F = cc.SparseFilterMatrix(np.array([[1, 0], [0, 3]]))
    assert cc.count_conflicts(F, [0, 1]) == 0


def test_count_conflicts_three_full_columns():
    F = cc.SparseFilterMatrix(np.array([[1, 2, 3], [4, 5, 6]]))
    assert cc.count_conflicts(F, [0, 1, 2]) == 4


def test_conflicts_equal_weights_pruned():
    # Summed per-group conflicts equal exactly the nnz removed by pruning.
    rng = np.random.default_rng(3)
    for trial in range(20):
        F = random_sparse_matrix(24, 18, rng.uniform(0.05, 0.5), seed=trial)
        grouping, _ = cc.group_columns(F, 8, 1.0)
        total = sum(cc.count_conflicts(F, g) for g in grouping.groups)
        pruned = cc.group_prune(F, grouping)
        assert F.nnz - pruned.nnz == total


def test_density_times_rows_equals_packed_occupancy():
    rng = np.random.default_rng(4)
    for trial in range(20):
        F = random_sparse_matrix(32, 12, rng.uniform(0.05, 0.5), seed=100 + trial)
        grouping, _ = cc.group_columns(F, 8, 1.0)
        packed = cc.pack(cc.group_prune(F, grouping), grouping)
        for gi, g in enumerate(grouping.groups):
            occupied = int(np.count_nonzero(packed.weights[:, gi]))
            assert round(cc.density(F, g) * F.rows) == occupied


def test_validate_network_ok():
    net = random_sparse_network([4, 8, 8], 6, 6, 0.3, seed=0)
    assert cc.validate_network(net) is None


def test_validate_network_dimension_mismatch():
    a = cc.LayerDef(filter=random_sparse_matrix(16, 4, 0.5), width=4, height=4,
                    shifts=tuple(c % 9 for c in range(4)))
    b = cc.LayerDef(filter=random_sparse_matrix(4, 8, 0.5), width=4, height=4,
                    shifts=tuple(c % 9 for c in range(8)))
    diag = cc.validate_network(cc.NetworkDef((a, b)))
    assert diag is not None and diag.layer == 0
    with pytest.raises(cc.NetworkError):
        cc.require_valid_network(cc.NetworkDef((a, b)))


def test_validate_network_empty():
    assert cc.validate_network(cc.NetworkDef(())) is not None


def test_validate_network_shift_length():
    layer = cc.LayerDef(filter=random_sparse_matrix(4, 4, 0.5), width=4, height=4,
                        shifts=(0, 1))
    diag = cc.validate_network(cc.NetworkDef((layer,)))
    assert diag is not None and "shift" in diag.message


def test_filter_matrix_invariants():
    with pytest.raises(ValueError):
        cc.SparseFilterMatrix(np.zeros((0, 3), dtype=np.int8))
    with pytest.raises(ValueError):
        cc.SparseFilterMatrix(np.array([[200]]))
    F = cc.SparseFilterMatrix(np.array([[1, -128, 0]]))
    assert F.nnz == 2
    with pytest.raises(ValueError):
        F.values[0, 0] = 3  # stored read-only


def test_sfm_round_trip(tmp_path):
    F = random_sparse_matrix(33, 17, 0.3, seed=5)
    p = tmp_path / "m.sfm"
    fileio.write_filter_matrix(p, F)
    back = fileio.read_filter_matrix(p)
    assert np.array_equal(back.values, F.values)
    raw = p.read_bytes()
    assert raw[:4] == b"SFM1"
    assert int.from_bytes(raw[4:8], "little") == 33
    assert int.from_bytes(raw[8:12], "little") == 17


def test_sfm_bad_magic(tmp_path):
    p = tmp_path / "bad.sfm"
    p.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(DataFormatError):
        fileio.read_filter_matrix(p)


def test_sfm_truncated(tmp_path):
    F = random_sparse_matrix(8, 8, 0.3, seed=6)
    p = tmp_path / "t.sfm"
    fileio.write_filter_matrix(p, F)
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(DataFormatError):
        fileio.read_filter_matrix(p)


def test_tensor_round_trip(tmp_path):
    t = np.random.default_rng(0).integers(-128, 128, size=(3, 5, 4)).astype(np.int8)
    p = tmp_path / "x.tns"
    fileio.write_tensor(p, t)
    back = fileio.read_tensor(p)
    assert back.shape == t.shape and np.array_equal(back, t)
    assert p.read_bytes()[:4] == b"TNS1"


def test_grouping_round_trip(tmp_path):
    g = cc.ColumnGrouping(((0, 2), (1, 3)), alpha=8, gamma=0.5)
    p = tmp_path / "g.json"
    fileio.write_grouping(p, g)
    back = fileio.read_grouping(p)
    assert back.groups == g.groups and back.alpha == 8 and back.gamma == 0.5


def test_network_round_trip(tmp_path):
    net = random_sparse_network([4, 8, 6], 5, 5, 0.4, seed=9, out_shift=3)
    paths = [f"w{i}.sfm" for i in range(net.num_layers)]
    for pth, layer in zip(paths, net.layers):
        fileio.write_filter_matrix(tmp_path / pth, layer.filter)
    fileio.write_network(tmp_path / "net.json", net, paths)
    back, groupings = fileio.read_network(tmp_path / "net.json")
    assert back.num_layers == net.num_layers
    for a, b in zip(back.layers, net.layers):
        assert np.array_equal(a.filter.values, b.filter.values)
        assert a.shifts == b.shifts and a.quant == b.quant
        assert (a.width, a.height) == (b.width, b.height)
    assert groupings == [None] * net.num_layers


def test_mask_round_trip(tmp_path):
    mask = np.random.default_rng(1).random((6, 7)) < 0.5
    fileio.write_mask(tmp_path / "m.sfm", mask)
    assert np.array_equal(fileio.read_mask(tmp_path / "m.sfm"), mask)


def test_grouping_rejects_duplicates():
    with pytest.raises(GroupingError):
        cc.ColumnGrouping(((0, 1), (1, 2)))
    with pytest.raises(GroupingError):
        cc.ColumnGrouping(((0,), ()))
    g = cc.ColumnGrouping(((0, 2), (1,)))
    with pytest.raises(GroupingError):
        g.validate_partition(4)


def test_history_round_trip(tmp_path):
    hist = [(1, 480, 0.5), (2, 400, 0.75)]
    fileio.write_history(tmp_path / "h.csv", hist)
    assert fileio.read_history(tmp_path / "h.csv") == hist
