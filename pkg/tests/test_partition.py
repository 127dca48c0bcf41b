import numpy as np
import pytest
from hypothesis import given, strategies as st

from marglik import partition as part
from marglik.errors import BadLabels
from marglik.nn import Network

sizes = st.tuples(st.integers(1, 12), st.integers(1, 4))
seeds = st.integers(0, 2 ** 32 - 1)


def test_param_partitions():
    net = Network((1, 2, 1))
    assert net.layer_param_counts == (4, 3)
    assert part.layerwise_param_partition(net).ranges == ((0, 4), (4, 7))
    assert part.diagonal_param_partition(3).cells() == [{0}, {1}, {2}]
    assert part.full_param_partition(9).ranges == ((0, 9),)


def test_param_partition_validation():
    with pytest.raises(ValueError):
        part.ParamPartition(((0, 2), (3, 4)))
    with pytest.raises(ValueError):
        part.ParamPartition(((0, 2), (2, 2)))


def test_param_refinement_chain():
    net = Network((2, 3, 2))
    P = net.param_count
    diag, layer, full = part.diagonal_param_partition(P), part.layerwise_param_partition(net), part.full_param_partition(P)
    for p in (diag, layer, full):
        assert part.validate(p)
    assert part.is_refinement(diag, layer) and part.is_refinement(layer, full)
    assert not part.is_refinement(full, layer)


def test_pairs_enumeration_is_n_major():
    assert part.all_pairs(2, 3).tolist() == [[0, 0], [0, 1], [0, 2], [1, 0], [1, 1], [1, 2]]


@given(sizes, st.data(), seeds)
def test_random_partition_valid(nc, data, seed):
    N, C = nc
    bs = data.draw(st.integers(1, N * C))
    dp = part.random_data_partition(N, C, bs, seed)
    assert part.validate(dp)
    assert len(dp) == int(np.ceil(N * C / bs))
    assert all(len(b) == bs for b in dp.batches[:-1])
    assert dp.cells() == part.random_data_partition(N, C, bs, seed).cells()


def test_random_partition_examples():
    full = part.random_data_partition(3, 2, 6, 0)
    assert len(full) == 1 and part.validate(full)
    two = part.random_data_partition(2, 1, 1, 0)
    assert sorted(map(sorted, two.cells())) == [[0], [1]]
    with pytest.raises(ValueError):
        part.random_data_partition(2, 1, 3, 0)


@given(sizes, st.data())
def test_output_wise_partition(nc, data):
    N, C = nc
    bs = data.draw(st.integers(1, N))
    dp = part.output_wise_partition(N, C, bs)
    assert part.validate(dp)
    assert all(len(np.unique(b[:, 1])) == 1 for b in dp.batches)


def test_output_wise_examples():
    dp = part.output_wise_partition(2, 3, 2)
    assert dp.batch_sizes == [2, 2, 2]
    assert len(part.output_wise_partition(5, 4, 5)) == 4
    single = part.single_batch_partition(5, 4)
    singletons = part.singleton_partition(5, 4)
    dp = part.output_wise_partition(5, 4, 5)
    assert part.is_refinement(dp, single) and part.is_refinement(singletons, dp)


@given(sizes, st.data(), seeds)
def test_class_grouped_partition(nc, data, seed):
    N, C = nc
    labels = np.array(data.draw(st.lists(st.integers(0, 2), min_size=N, max_size=N)))
    bs = data.draw(st.integers(1, N * C))
    dp = part.class_grouped_partition(N, C, labels, bs, seed)
    assert part.validate(dp)
    assert all(len(np.unique(labels[b[:, 0]])) == 1 for b in dp.batches)


def test_class_grouped_examples():
    N, C = 6, 2
    same = part.class_grouped_partition(N, C, np.zeros(N, int), 4, 3)
    assert same.cells() == part.random_data_partition(N, C, 4, 3).cells()
    two = part.class_grouped_partition(N, C, np.array([0, 1, 0, 1, 0, 1]), 12, 3)
    assert len(two) == 2
    with pytest.raises(BadLabels):
        part.class_grouped_partition(N, C, np.zeros(5), 2, 0)


def test_is_refinement_examples():
    a = part.DataPartition(([[0, 0]], [[1, 0]]), 2, 1)
    b = part.DataPartition(([[0, 0], [1, 0]],), 2, 1)
    assert part.is_refinement(a, b)
    assert not part.is_refinement(b, a)
    assert part.is_refinement(a, a) and part.is_refinement(b, b)


@given(sizes, seeds, st.integers(1, 3))
def test_refine_partition_nests(nc, seed, splits):
    N, C = nc
    coarse = part.random_data_partition(N, C, max(1, (N * C + 1) // 2), seed)
    fine = part.refine_partition(coarse, splits, seed + 1)
    assert part.validate(fine) and part.is_refinement(fine, coarse)


def test_input_batches_keep_outputs_together():
    dp = part.input_batch_partition(5, 3, 2, seed=1)
    assert part.validate(dp)
    for b in dp.batches:
        for n in np.unique(b[:, 0]):
            assert sorted(b[b[:, 0] == n, 1]) == [0, 1, 2]


def test_validate_detects_overlap_and_gaps():
    overlap = part.DataPartition(([[0, 0], [1, 0]], [[1, 0]]), 2, 1)
    gap = part.DataPartition(([[0, 0]],), 2, 1)
    empty = part.DataPartition(([[0, 0], [1, 0]], np.zeros((0, 2))), 2, 1)
    assert not part.validate(overlap) and not part.validate(gap) and not part.validate(empty)
