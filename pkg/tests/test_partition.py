import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pale.partition import (
    PartitionSpec,
    build_groups,
    gather_groups,
    pad_to_divisible,
    pale_token_count,
    pale_token_index,
    scatter_groups,
    unpad,
)
from pale.tensor import Tensor


def rows_of(groups):
    return [sorted({r for r, _ in g}) for g in groups.groups]


def test_interlaced_rows_small():
    assert rows_of(build_groups(4, 4, PartitionSpec(2, 2), "row")) == [[0, 2], [1, 3]]
    assert rows_of(build_groups(6, 6, PartitionSpec(3, 3), "row")) == [[0, 2, 4], [1, 3, 5]]


def test_contiguous_rows_small():
    spec = PartitionSpec(2, 2, interlaced=False)
    assert rows_of(build_groups(4, 4, spec, "row")) == [[0, 1], [2, 3]]


def test_column_groups_cover_full_columns():
    g = build_groups(4, 6, PartitionSpec(2, 3), "column")
    assert g.group_count == 2
    cols = [sorted({c for _, c in grp}) for grp in g.groups]
    assert cols == [[0, 2, 4], [1, 3, 5]]
    assert all(len(grp) == 4 * 3 for grp in g.groups)


def test_build_groups_rejects_indivisible_and_bad_axis():
    with pytest.raises(ValueError):
        build_groups(5, 4, PartitionSpec(2, 2), "row")
    with pytest.raises(ValueError):
        build_groups(4, 4, PartitionSpec(2, 2), "diag")
    with pytest.raises(ValueError):
        PartitionSpec(0, 1)


def test_pale_token_count_examples():
    assert pale_token_count(56, 56, 7, 7) == 735
    assert pale_token_count(4, 4, 1, 1) == 7
    assert pale_token_count(7, 9, 7, 9) == 63
    assert pale_token_count(4, 3, 1, 1) == 4 + 3 - 1
    with pytest.raises(ValueError):
        pale_token_count(8, 8, 3, 3)


def test_pale_token_index_whole_map_and_count():
    idx = pale_token_index(14, 14, PartitionSpec(7, 7))
    assert idx.shape == (2, 147)
    assert all(len(set(r.tolist())) == 147 for r in idx)
    whole = pale_token_index(4, 4, PartitionSpec(4, 4))
    assert sorted(whole[0].tolist()) == list(range(16))


def test_pale_token_index_requires_equal_group_counts():
    with pytest.raises(ValueError):
        pale_token_index(8, 4, PartitionSpec(2, 2))


def test_padding_examples():
    x = Tensor(np.ones((1, 8, 8, 2), np.float32))
    p = pad_to_divisible(x, PartitionSpec(7, 7))
    assert p.x.shape == (1, 14, 14, 2)
    assert p.pad_count == 14 * 14 - 64 == 132
    assert np.all(p.x.data[:, 8:] == 0) and np.all(p.x.data[:, :, 8:] == 0)
    q = pad_to_divisible(Tensor(np.ones((1, 14, 14, 2))), PartitionSpec(7, 7))
    assert q.pad_count == 0


def test_padded_extents_square():
    assert PartitionSpec(2, 2).padded_extents(6, 3) == (6, 4)
    assert PartitionSpec(2, 2).padded_extents(6, 3, square=True) == (6, 6)


def test_pad_unpad_round_trip_bitwise(rng):
    x = Tensor(rng.standard_normal((2, 9, 5, 3)).astype(np.float32))
    p = pad_to_divisible(x, PartitionSpec(4, 3))
    assert unpad(p, p.x).data.tobytes() == x.data.tobytes()


def test_gather_row_index_field():
    h = w = 4
    field = np.broadcast_to(np.arange(h, dtype=float)[None, :, None, None], (1, h, w, 1)).copy()
    g = gather_groups(Tensor(field), build_groups(h, w, PartitionSpec(2, 2), "row")).data
    assert [sorted(set(g[0, i, :, 0].tolist())) for i in range(2)] == [[0.0, 2.0], [1.0, 3.0]]


def test_axial_is_pale_of_one():
    g = build_groups(5, 6, PartitionSpec(1, 1), "row")
    assert g.group_count == 5
    assert rows_of(g) == [[i] for i in range(5)]


@settings(max_examples=60, deadline=None)
@given(
    st.integers(1, 4),
    st.integers(1, 4),
    st.integers(1, 4),
    st.integers(1, 4),
    st.booleans(),
    st.sampled_from(["row", "column"]),
)
def test_groups_partition_the_map(nr, nc, s_r, s_c, interlaced, axis):
    h, w = nr * s_r, nc * s_c
    g = build_groups(h, w, PartitionSpec(s_r, s_c, interlaced), axis)
    idx = g.token_index()
    assert sorted(idx.ravel().tolist()) == list(range(h * w))
    assert g.group_count == (nr if axis == "row" else nc)
    x = Tensor(np.random.default_rng(0).standard_normal((2, h, w, 3)))
    back = scatter_groups(gather_groups(x, g), g)
    assert back.data.tobytes() == x.data.tobytes()


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 4))
def test_interlaced_members_are_evenly_spaced(n, s, seed):
    h = n * s
    for grp in build_groups(h, 2, PartitionSpec(s, 1), "row").lines:
        assert np.all(np.diff(grp) == n)
