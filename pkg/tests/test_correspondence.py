import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from radepth.correspondence import (
    CorrespondenceSet,
    MatchConfig,
    MatchFileError,
    TokenMatchMap,
    expand_matching_tokens,
    load_matches,
    match_desk,
    pixels_to_tokens,
    save_matches,
)
from radepth.structures import InputError


def test_match_file_round_trip(tmp_path):
    m = CorrespondenceSet(np.array([[1.5, 2, 3, 4.25, 0.9], [0, 0, 7, 7, 1]]), (8, 8), (8, 8))
    save_matches(m, tmp_path / "m.json")
    back = load_matches(tmp_path / "m.json")
    assert np.array_equal(back.pairs, m.pairs) and back.image_a_size == (8, 8)


def test_minimal_interchange_file(tmp_path):
    (tmp_path / "m.json").write_text(json.dumps({"pairs": [[1, 2, 3, 4, 0.5]]}))
    assert len(load_matches(tmp_path / "m.json", (10, 10), (10, 10))) == 1


@pytest.mark.parametrize("doc", [
    "not json",
    json.dumps([1, 2]),
    json.dumps({"pairs": [[1, 2, 3]]}),
    json.dumps({"pairs": [[1, 2, 3, 4, 1.5]]}),
    json.dumps({"pairs": [[1, 2, 30, 4, 0.5]], "image_a_size": [8, 8], "image_b_size": [8, 8]}),
    json.dumps({"pairs": [[1, 2, 3, 4, True]]}),
])
def test_malformed_match_files(tmp_path, doc):
    (tmp_path / "m.json").write_text(doc)
    with pytest.raises(MatchFileError):
        load_matches(tmp_path / "m.json")


def test_out_of_bounds_pairs_rejected():
    with pytest.raises(InputError):
        CorrespondenceSet(np.array([[8, 0, 0, 0, 1]]), (8, 8), (8, 8))


def _textured(rng, h=48, w=48):
    base = rng.random((h // 4, w // 4, 3))
    return np.kron(base, np.ones((4, 4, 1)))


def test_desk_matcher_recovers_a_shift(rng):
    a = _textured(rng)
    b = np.roll(a, (3, 5), axis=(0, 1))
    m = match_desk(a, b)
    assert len(m) >= 20
    ok = (m.pairs[:, 2] - m.pairs[:, 0] == 5) & (m.pairs[:, 3] - m.pairs[:, 1] == 3)
    assert ok.mean() > 0.9


def test_desk_matcher_mutual_and_ratio(rng):
    a = _textured(rng)
    b = np.roll(a, (2, 2), axis=(0, 1))
    assert len(match_desk(a, b, MatchConfig(ratio=0.0))) == 0
    m = match_desk(a, b)
    assert len({(u, v) for u, v in m.pairs[:, :2]}) == len(m)
    assert len({(u, v) for u, v in m.pairs[:, 2:4]}) == len(m)
    assert np.all((m.pairs[:, 4] >= 0) & (m.pairs[:, 4] <= 1))


def test_flat_image_has_no_matches():
    flat = np.full((32, 32, 3), 0.5)
    assert len(match_desk(flat, flat)) == 0


pair_rows = st.lists(st.tuples(st.floats(0, 31.99), st.floats(0, 23.99), st.floats(0, 15.99),
                               st.floats(0, 15.99), st.floats(0, 1)), max_size=30)


@given(rows=pair_rows, patch=st.sampled_from([4, 8]))
def test_pixels_to_tokens_matches_loop_oracle(rows, patch):
    m = CorrespondenceSet(np.array(rows).reshape(-1, 5), (24, 32), (16, 16))
    expected = sorted({(int(v // patch), int(u // patch), int(vb // patch), int(ub // patch))
                       for u, v, ub, vb, _ in rows})
    assert [tuple(r) for r in pixels_to_tokens(m, patch).tolist()] == expected


def _expand_oracle(raw, radius, in_grid, ctx_grid, m_total):
    sets = [set() for _ in range(in_grid[0] * in_grid[1])]
    for m, pairs in enumerate(raw):
        for ra, ca, rb, cb in pairs:
            for dr in range(-radius, radius + 1):
                for dc in range(-radius, radius + 1):
                    r, c = rb + dr, cb + dc
                    if 0 <= r < ctx_grid[0] and 0 <= c < ctx_grid[1]:
                        sets[ra * in_grid[1] + ca].add((m, r * ctx_grid[1] + c))
    return sets


token_pairs = st.lists(st.tuples(st.integers(0, 3), st.integers(0, 4), st.integers(0, 5), st.integers(0, 2)),
                       max_size=12)


@given(raw=st.lists(token_pairs, min_size=0, max_size=3), radius=st.integers(0, 2))
def test_expand_matches_loop_oracle(raw, radius):
    arrays = [np.array(p, dtype=np.int64).reshape(-1, 4) for p in raw]
    out = expand_matching_tokens(arrays, radius, (4, 5), (6, 3), max(len(raw), 1))
    assert out.sets == _expand_oracle(raw, radius, (4, 5), (6, 3), max(len(raw), 1))


@given(raw=st.lists(token_pairs, min_size=1, max_size=3), radius=st.integers(0, 2))
def test_expansion_is_monotone_in_radius(raw, radius):
    arrays = [np.array(p, dtype=np.int64).reshape(-1, 4) for p in raw]
    small = expand_matching_tokens(arrays, radius, (4, 5), (6, 3))
    big = expand_matching_tokens(arrays, radius + 1, (4, 5), (6, 3))
    assert all(a <= b for a, b in zip(small.sets, big.sets))


def test_expansion_examples():
    pairs = [np.array([[0, 0, 2, 2]])]
    exact = expand_matching_tokens(pairs, 0, (2, 2), (4, 4))
    assert exact.sets[0] == {(0, 10)} and exact.total() == 1
    corner = expand_matching_tokens([np.array([[1, 1, 0, 0]])], 1, (2, 2), (4, 4))
    assert len(corner.sets[3]) == 4
    with pytest.raises(InputError):
        expand_matching_tokens(pairs, -1, (2, 2), (4, 4))


def test_token_map_validation_and_padding():
    tm = TokenMatchMap.empty(3, (2, 2), 1)
    tm.sets[0] = {(0, 3), (0, 1)}
    index, mask = tm.to_padded()
    assert index[0].tolist() == [1, 3] and mask.sum() == 2
    tm.sets[1] = {(1, 0)}
    with pytest.raises(InputError):
        tm.validate()
    full = TokenMatchMap.full(2, (2, 2), 2)
    assert full.total() == 2 * 8
