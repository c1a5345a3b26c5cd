import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from elf.alignment import (
    InfeasibleAlignmentError,
    alignment_score,
    batch_mas,
    durations,
    monotonic_alignment_search,
    path_from_durations,
)

from helpers import brute_force_alignment, monotonic_paths


def check_valid(path):
    L, T = path.shape
    assert np.all(path.sum(0) == 1)
    rows = path.argmax(0)
    assert rows[0] == 0 and rows[-1] == L - 1
    assert np.all(np.diff(rows) >= 0) and np.all(np.diff(rows) <= 1)


def test_single_row():
    p = monotonic_alignment_search(np.random.default_rng(0).standard_normal((1, 7)))
    assert np.all(p == 1)


def test_square_is_diagonal():
    p = monotonic_alignment_search(np.random.default_rng(0).standard_normal((5, 5)))
    np.testing.assert_array_equal(p, np.eye(5, dtype=np.int8))


def test_infeasible():
    with pytest.raises(InfeasibleAlignmentError):
        monotonic_alignment_search(np.zeros((4, 3)))


def test_enumerator_count():
    assert len(list(monotonic_paths(3, 5))) == 6


def test_3x5_matches_enumeration():
    v = np.random.default_rng(42).standard_normal((3, 5))
    best, _ = brute_force_alignment(v)
    np.testing.assert_array_equal(durations(monotonic_alignment_search(v)), best)


def test_ties_stay_on_current_row():
    # all-equal scores: every path ties, backtracking stays until forced to move,
    # so earlier rows get one frame each and the last row absorbs the rest
    p = monotonic_alignment_search(np.zeros((3, 6)))
    np.testing.assert_array_equal(durations(p), [1, 1, 4])


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 4).flatmap(lambda L: st.tuples(st.just(L), st.integers(L, 6))).flatmap(
    lambda lt: hnp.arrays(np.float64, lt, elements=st.floats(-20, 20))))
def test_matches_brute_force(v):
    p = monotonic_alignment_search(v)
    check_valid(p)
    _, best = brute_force_alignment(v)
    assert alignment_score(v, p) == pytest.approx(best, abs=1e-9)


def test_durations_roundtrip():
    d = np.array([2, 1, 3])
    p = path_from_durations(d)
    np.testing.assert_array_equal(durations(p), d)
    check_valid(p)


def test_batch_respects_lengths():
    rng = np.random.default_rng(0)
    ll = torch.from_numpy(rng.standard_normal((2, 4, 9)))
    out = batch_mas(ll, [4, 2], [9, 5])
    assert out[1, 2:].sum() == 0 and out[1, :, 5:].sum() == 0
    for b, (lt, lf) in enumerate([(4, 9), (2, 5)]):
        assert int(out[b].sum()) == lf
        np.testing.assert_array_equal(out[b, :lt, :lf].numpy(), monotonic_alignment_search(ll[b, :lt, :lf].numpy()))
