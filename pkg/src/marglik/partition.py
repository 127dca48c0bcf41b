"""Parameter partitions and input-output (data) partitions.

Input-output pairs ``(n, c)`` are enumerated n-major, c-minor; pair ``(n, c)``
has linear id ``n * C + c``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadLabels


@dataclass(frozen=True)
class ParamPartition:
    ranges: tuple

    def __post_init__(self):
        ranges = tuple((int(a), int(b)) for a, b in self.ranges)
        object.__setattr__(self, "ranges", ranges)
        prev = 0
        for a, b in ranges:
            if a != prev or b <= a:
                raise ValueError(f"ranges must be contiguous, ordered and non-empty: {ranges}")
            prev = b

    @property
    def size(self) -> int:
        return self.ranges[-1][1] if self.ranges else 0

    @property
    def is_diagonal(self) -> bool:
        return all(b - a == 1 for a, b in self.ranges)

    def cells(self) -> list:
        return [frozenset(range(a, b)) for a, b in self.ranges]


@dataclass(frozen=True)
class DataPartition:
    """Batches of ``(n, c)`` pairs, each stored as an int array of shape (k, 2)."""

    batches: tuple
    n_inputs: int
    n_outputs: int

    def __post_init__(self):
        batches = tuple(np.asarray(b, dtype=np.int64).reshape(-1, 2) for b in self.batches)
        for b in batches:
            b.setflags(write=False)
        object.__setattr__(self, "batches", batches)

    def __len__(self) -> int:
        return len(self.batches)

    def cells(self) -> list:
        return [frozenset((b[:, 0] * self.n_outputs + b[:, 1]).tolist()) for b in self.batches]

    @property
    def batch_sizes(self) -> list:
        return [len(b) for b in self.batches]


def layerwise_param_partition(net) -> ParamPartition:
    return ParamPartition(tuple((s.start, s.stop) for s in net.layer_slices))


def diagonal_param_partition(P: int) -> ParamPartition:
    return ParamPartition(tuple((i, i + 1) for i in range(P)))


def full_param_partition(P: int) -> ParamPartition:
    return ParamPartition(((0, P),))


def all_pairs(N: int, C: int) -> np.ndarray:
    n, c = np.divmod(np.arange(N * C), C)
    return np.stack([n, c], axis=1)


def _chunk(pairs: np.ndarray, batch_size: int) -> list:
    return [pairs[i:i + batch_size] for i in range(0, len(pairs), batch_size)]


def _check_batch_size(N: int, C: int, batch_size: int):
    if not 1 <= batch_size <= max(N * C, 1):
        raise ValueError(f"batch_size must lie in [1, {N * C}], got {batch_size}")


def single_batch_partition(N: int, C: int) -> DataPartition:
    return DataPartition((all_pairs(N, C),), N, C)


def singleton_partition(N: int, C: int) -> DataPartition:
    return DataPartition(tuple(p[None] for p in all_pairs(N, C)), N, C)


def random_data_partition(N: int, C: int, batch_size: int, seed: int) -> DataPartition:
    _check_batch_size(N, C, batch_size)
    pairs = all_pairs(N, C)
    rng = np.random.default_rng(seed)
    return DataPartition(tuple(_chunk(pairs[rng.permutation(len(pairs))], batch_size)), N, C)


def input_batch_partition(N: int, C: int, inputs_per_batch: int, seed: int | None = None) -> DataPartition:
    """Batches of whole inputs: every output of an input lands in the same batch."""
    if not 1 <= inputs_per_batch <= max(N, 1):
        raise ValueError(f"inputs_per_batch must lie in [1, {N}], got {inputs_per_batch}")
    order = np.arange(N) if seed is None else np.random.default_rng(seed).permutation(N)
    batches = []
    for i in range(0, N, inputs_per_batch):
        ns = order[i:i + inputs_per_batch]
        batches.append(np.stack([np.repeat(ns, C), np.tile(np.arange(C), len(ns))], axis=1))
    return DataPartition(tuple(batches), N, C)


def output_wise_partition(N: int, C: int, batch_size: int, seed: int | None = None) -> DataPartition:
    """One output per batch. With a seed, inputs are shuffled within each output."""
    if not 1 <= batch_size <= max(N, 1):
        raise ValueError(f"batch_size must lie in [1, {N}], got {batch_size}")
    rng = None if seed is None else np.random.default_rng(seed)
    batches = []
    for c in range(C):
        ns = np.arange(N) if rng is None else rng.permutation(N)
        pairs = np.stack([ns, np.full(N, c)], axis=1)
        batches += _chunk(pairs, batch_size)
    return DataPartition(tuple(batches), N, C)


def class_grouped_partition(N: int, C: int, labels, batch_size: int, seed: int) -> DataPartition:
    """Pairs grouped by the label of their input, shuffled within groups, then chunked."""
    labels = np.asarray(labels)
    if labels.shape != (N,):
        raise BadLabels(f"expected {N} labels, got shape {labels.shape}")
    _check_batch_size(N, C, batch_size)
    pairs = all_pairs(N, C)
    pair_labels = labels[pairs[:, 0]]
    rng = np.random.default_rng(seed)
    batches = []
    for lab in np.unique(labels):
        group = pairs[pair_labels == lab]
        batches += _chunk(group[rng.permutation(len(group))], batch_size)
    return DataPartition(tuple(batches), N, C)


def validate(partition, universe_size: int | None = None) -> bool:
    """True iff cells are non-empty, pairwise disjoint and cover the index set."""
    if isinstance(partition, DataPartition):
        universe_size = partition.n_inputs * partition.n_outputs
        sizes = [len(b) for b in partition.batches]
    else:
        universe_size = partition.size if universe_size is None else universe_size
        sizes = [b - a for a, b in partition.ranges]
    cells = partition.cells()
    if any(len(c) == 0 for c in cells) or [len(c) for c in cells] != sizes:
        return False
    union = set().union(*cells) if cells else set()
    return sum(sizes) == len(union) == universe_size and union == set(range(universe_size))


def is_refinement(fine, coarse) -> bool:
    lookup = {}
    for i, cell in enumerate(coarse.cells()):
        for idx in cell:
            lookup[idx] = i
    for cell in fine.cells():
        owners = {lookup.get(idx) for idx in cell}
        if len(owners) != 1 or None in owners:
            return False
    return True


def refine_partition(dp: DataPartition, splits: int, seed: int) -> DataPartition:
    """Split every batch into ``splits`` random, nearly equal sub-batches."""
    rng = np.random.default_rng(seed)
    out = []
    for b in dp.batches:
        perm = b[rng.permutation(len(b))]
        out += [part for part in np.array_split(perm, splits) if len(part)]
    return DataPartition(tuple(out), dp.n_inputs, dp.n_outputs)


def inputs_of(batch: np.ndarray) -> np.ndarray:
    return np.unique(np.asarray(batch)[:, 0])

