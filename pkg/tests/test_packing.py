"""Grouping, conflict pruning, packing, row permutation, and the estimator."""

import numpy as np
import pytest
from sklearn.base import clone

import colcombine as cc
from colcombine.exceptions import GroupingError, IntegrityError
from colcombine.packing import GroupingTrace, renumber_contiguous
from colcombine.synth import random_sparse_matrix, random_sparse_network


def reference_greedy(values, alpha, gamma):
    """Straightforward reimplementation of the grouping policy using plain
    python sets and per-row loops; kept independent of the vectorized code."""
    n_rows, n_cols = values.shape
    groups = []
    for c in range(n_cols):
        pattern_c = {r for r in range(n_rows) if values[r, c] != 0}
        best, best_density = None, -1.0
        for gi, (members, rows) in enumerate(groups):
            if len(members) + 1 > alpha:
                continue
            union = rows | pattern_c
            conflicts = 0
            for r in union:
                in_row = sum(1 for m in members + [c] if values[r, m] != 0)
                conflicts += max(0, in_row - 1)
            if conflicts > gamma * n_rows:
                continue
            d = len(union) / n_rows
            if d > best_density:
                best, best_density = gi, d
        if best is None:
            groups.append(([c], set(pattern_c)))
        else:
            groups[best][0].append(c)
            groups[best] = (groups[best][0], groups[best][1] | pattern_c)
    return tuple(tuple(g) for g, _ in groups)


def test_alpha_one_is_identity():
    F = random_sparse_matrix(16, 9, 0.3, seed=0)
    grouping, _ = cc.group_columns(F, 1, 0.5)
    assert grouping.groups == tuple((c,) for c in range(9))
    packed = cc.pack(cc.group_prune(F, grouping), grouping)
    assert np.array_equal(packed.weights, F.values)
    assert np.all(packed.channel_slots[packed.weights != 0] == 0)


def test_disjoint_columns_one_group():
    F = cc.SparseFilterMatrix(np.array([
        [1, 0, 0],
        [0, 2, 0],
        [0, 0, 3],
        [4, 0, 0],
    ]))
    grouping, _ = cc.group_columns(F, 8, 0.0)
    assert grouping.groups == ((0, 1, 2),)


def test_grouping_matches_reference_greedy():
    F = random_sparse_matrix(96, 95, 0.16, seed=11)
    grouping, _ = cc.group_columns(F, 8, 0.5)
    assert grouping.groups == reference_greedy(F.values, 8, 0.5)
    assert grouping.max_group_size <= 8
    for g in grouping.groups:
        assert cc.count_conflicts(F, g) <= 0.5 * 96


@pytest.mark.parametrize("seed,alpha,gamma", [(1, 4, 0.25), (2, 8, 0.0), (3, 2, 1.0)])
def test_grouping_matches_reference_greedy_small(seed, alpha, gamma):
    F = random_sparse_matrix(20, 15, 0.3, seed=seed)
    grouping, _ = cc.group_columns(F, alpha, gamma)
    assert grouping.groups == reference_greedy(F.values, alpha, gamma)


def test_group_prune_magnitude_example():
    F = cc.SparseFilterMatrix(np.array([[-3, 7, -8]]))
    grouping = cc.ColumnGrouping(((0, 1, 2),))
    assert cc.group_prune(F, grouping).values.tolist() == [[0, 0, -8]]
    F2 = cc.SparseFilterMatrix(np.array([[-3, -7, -8]]))
    assert cc.group_prune(F2, grouping).values.tolist() == [[0, 0, -8]]


def test_group_prune_no_conflicts_unchanged():
    F = cc.SparseFilterMatrix(np.array([[5, 0], [0, -6]]))
    grouping = cc.ColumnGrouping(((0, 1),))
    assert np.array_equal(cc.group_prune(F, grouping).values, F.values)


def test_group_prune_tie_keeps_leftmost():
    F = cc.SparseFilterMatrix(np.array([[4, -4]]))
    grouping = cc.ColumnGrouping(((0, 1),))
    assert cc.group_prune(F, grouping).values.tolist() == [[4, 0]]


def test_group_prune_idempotent():
    rng = np.random.default_rng(5)
    for trial in range(10):
        F = random_sparse_matrix(24, 16, rng.uniform(0.1, 0.5), seed=40 + trial)
        grouping, _ = cc.group_columns(F, 6, 0.75)
        once = cc.group_prune(F, grouping)
        twice = cc.group_prune(once, grouping)
        assert np.array_equal(once.values, twice.values)


def test_pack_three_groups_example():
    # Eight columns in three groups combine into a three-column packed matrix.
    F = cc.SparseFilterMatrix(np.array([
        [-3, 0, 7, 0, -8, 0, 0, 0],
        [0, 2, 0, 0, 0, 1, 0, 0],
        [5, 0, 0, 0, 0, 0, 4, 0],
        [0, 0, 0, 6, 0, 0, 0, -2],
    ]))
    grouping = cc.ColumnGrouping(((0, 2, 4), (1, 3, 5), (6, 7)))
    packed = cc.pack(cc.group_prune(F, grouping), grouping)
    assert packed.packed_cols == 3
    assert packed.weights[0].tolist() == [-8, 0, 0]
    assert packed.source_cols[0, 0] == 4 and packed.channel_slots[0, 0] == 2


def test_pack_requires_pruning():
    F = cc.SparseFilterMatrix(np.array([[1, 2]]))
    with pytest.raises(IntegrityError):
        cc.pack(F, cc.ColumnGrouping(((0, 1),)))


def test_unpack_is_scatter_inverse():
    rng = np.random.default_rng(6)
    for trial in range(10):
        F = random_sparse_matrix(20, 14, rng.uniform(0.1, 0.5), seed=60 + trial)
        grouping, _ = cc.group_columns(F, 8, 0.5)
        pruned = cc.group_prune(F, grouping)
        packed = cc.pack(pruned, grouping)
        assert np.array_equal(packed.unpack(14).values, pruned.values)
        assert packed.nnz == pruned.nnz


def test_packing_efficiency_dense():
    F = cc.SparseFilterMatrix(np.arange(1, 13).reshape(3, 4).astype(np.int8))
    grouping, _ = cc.group_columns(F, 1, 0.0)
    packed = cc.pack(F, grouping)
    assert cc.packing_efficiency(packed) == 1.0


def test_packing_efficiency_monotone_in_gamma():
    F = random_sparse_matrix(96, 95, 0.16, seed=13)
    effs = {}
    for gamma in (0.1, 0.5):
        grouping, _ = cc.group_columns(F, 8, gamma)
        packed = cc.pack(cc.group_prune(F, grouping), grouping)
        effs[gamma] = cc.packing_efficiency(packed)
    assert effs[0.5] > effs[0.1]


def test_row_permutation_identity():
    perm = cc.row_permutation(cc.ColumnGrouping(((0, 1), (2, 3))))
    assert perm.is_identity()


def test_row_permutation_interleaved():
    g = cc.ColumnGrouping(((0, 2), (1, 3)))
    perm = cc.row_permutation(g)
    assert perm.order.tolist() == [0, 2, 1, 3]
    assert renumber_contiguous(g).groups == ((0, 1), (2, 3))
    inv = perm.inverse()
    assert inv.apply_to_rows(perm.apply_to_rows(np.arange(4))).tolist() == [0, 1, 2, 3]


def test_row_permutation_commutes_with_packing():
    # Packing the renumbered matrix equals the relabeled packing of the original.
    rng = np.random.default_rng(8)
    for trial in range(10):
        F = random_sparse_matrix(18, 12, rng.uniform(0.15, 0.45), seed=80 + trial)
        grouping, _ = cc.group_columns(F, 4, 0.5)
        perm = cc.row_permutation(grouping)
        packed_before = cc.pack(cc.group_prune(F, grouping), grouping)

        renum = renumber_contiguous(grouping)
        F_perm = cc.SparseFilterMatrix(perm.apply_to_cols(F.values))
        packed_after = cc.pack(cc.group_prune(F_perm, renum), renum)

        assert np.array_equal(packed_before.weights, packed_after.weights)
        assert np.array_equal(packed_before.channel_slots, packed_after.channel_slots)
        occ = packed_after.source_cols >= 0
        mapped = np.full_like(packed_after.source_cols, -1)
        mapped[occ] = perm.order[packed_after.source_cols[occ]]
        assert np.array_equal(mapped, packed_before.source_cols)


def test_permute_network_rows_contiguous():
    net = random_sparse_network([6, 12, 10], 4, 4, 0.35, seed=17)
    groupings = [cc.group_columns(l.filter, 4, 0.5)[0] for l in net.layers]
    new_net, new_groupings, input_order = cc.permute_network_rows(net, groupings)
    assert cc.validate_network(new_net) is None
    for g in new_groupings:
        assert g.is_contiguous()
    assert sorted(input_order.tolist()) == list(range(6))
    # packed efficiency is unchanged by the permutation
    for layer, g, old_layer, old_g in zip(new_net.layers, new_groupings,
                                          net.layers, groupings):
        new_p = cc.pack(cc.group_prune(layer.filter, g), g)
        old_p = cc.pack(cc.group_prune(old_layer.filter, old_g), old_g)
        assert new_p.nnz == old_p.nnz
        assert new_p.packed_cols == old_p.packed_cols


def test_trace_replay_and_json():
    F = random_sparse_matrix(24, 20, 0.25, seed=21)
    grouping, trace = cc.group_columns(F, 6, 0.5)
    assert trace.replay().groups == grouping.groups
    back = GroupingTrace.from_json(trace.to_json())
    assert back.grouping.groups == grouping.groups
    assert back.replay().groups == grouping.groups


def test_grouping_determinism():
    F = random_sparse_matrix(48, 30, 0.2, seed=23)
    a, _ = cc.group_columns(F, 8, 0.5)
    b, _ = cc.group_columns(F, 8, 0.5)
    assert a.groups == b.groups


def test_invariant_suite_random_matrices():
    rng = np.random.default_rng(99)
    for trial in range(60):
        rows = int(rng.integers(8, 48))
        cols = int(rng.integers(4, 40))
        density = float(rng.uniform(0.05, 0.5))
        alpha = int(rng.integers(1, 10))
        gamma = float(rng.choice([0.0, 0.1, 0.25, 0.5, 1.0]))
        F = random_sparse_matrix(rows, cols, density, seed=1000 + trial)
        grouping, _ = cc.group_columns(F, alpha, gamma)
        grouping.validate_partition(cols)
        assert grouping.max_group_size <= alpha
        pruned = cc.group_prune(F, grouping)
        for g in grouping.groups:
            assert cc.count_conflicts(F, g) <= gamma * rows
            sub = np.abs(F.values[:, list(g)].astype(np.int64))
            kept = np.abs(pruned.values[:, list(g)].astype(np.int64))
            # survivor magnitude dominates everything pruned in its row
            surviving = kept.max(axis=1)
            covered = sub.max(axis=1) > 0
            assert np.all(surviving[covered] == sub.max(axis=1)[covered])
        packed = cc.pack(pruned, grouping)
        assert packed.nnz == pruned.nnz


def test_column_combiner_estimator():
    F = random_sparse_matrix(32, 24, 0.25, seed=31)
    est = cc.ColumnCombiner(alpha=4, gamma=0.5)
    assert clone(est).get_params() == {"alpha": 4, "gamma": 0.5}
    out = est.fit_transform(F.values)
    assert out.shape == (32, est.n_groups_)
    assert est.grouping_.max_group_size <= 4
    assert 0 < est.packing_efficiency_ <= 1
    details = est.pack_details(F.values)
    assert np.array_equal(details.weights, out)
    with pytest.raises(ValueError):
        est.pack_details(np.zeros((4, 7), dtype=np.int8))
    est2 = cc.ColumnCombiner().set_params(alpha=1, gamma=0.0).fit(F.values)
    assert est2.n_groups_ == 24
