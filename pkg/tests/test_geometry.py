"""Region layout invariants, checked against brute-force enumeration."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regionmix.geometry import (
    GridTransform,
    RegionSpec,
    TokenAddress,
    address_of,
    canonical_index,
    grid_transform_permutation,
    level_weights,
    permute_tokens,
    sequence_length,
    subregion_indices,
)


def brute_force_length(t: int, l: int) -> int:
    return sum((t * 2 ** (i - 1)) ** 2 for i in range(1, l + 1))


def all_small_specs(max_s: int = 2000):
    """Every (t, l) whose sequence length stays below max_s."""
    specs = []
    t = 1
    while sequence_length(t, 1) <= max_s:
        l = 1
        while sequence_length(t, l) <= max_s:
            specs.append(RegionSpec(t=t, l=l, d=1))
            l += 1
        t += 1
    return specs


class TestSequenceLength:
    def test_reference_geometry(self):
        assert sequence_length(3, 3) == 189

    def test_single_tile(self):
        assert sequence_length(1, 1) == 1

    def test_two_by_two_two_levels(self):
        assert sequence_length(2, 2) == 20  # 4 * (1 + 4)

    def test_matches_per_level_summation(self):
        for t in range(1, 8):
            for l in range(1, 6):
                assert sequence_length(t, l) == brute_force_length(t, l)

    @pytest.mark.parametrize("t,l", [(0, 1), (1, 0), (-3, 2), (2, -1)])
    def test_rejects_non_positive_arguments(self, t, l):
        with pytest.raises(ValueError):
            sequence_length(t, l)

    def test_level_decomposition(self):
        spec = RegionSpec(t=3, l=3, d=1280)
        assert spec.level_sizes == (9, 36, 144)
        assert sum(spec.level_sizes) == spec.s == 189


class TestCanonicalIndexing:
    def test_layout_origin(self):
        spec = RegionSpec(t=3, l=3, d=8)
        assert canonical_index(TokenAddress(1, 0, 0), spec) == 0

    def test_second_level_offset(self):
        spec = RegionSpec(t=3, l=3, d=8)
        assert canonical_index(TokenAddress(2, 0, 0), spec) == 9

    def test_last_token_address(self):
        spec = RegionSpec(t=3, l=3, d=8)
        assert address_of(188, spec) == TokenAddress(level=3, row=11, col=11)

    def test_bijection_exhaustive_small_specs(self):
        # Round trip over every index of every spec with s <= 2000.
        for spec in all_small_specs():
            seen = set()
            for idx in range(spec.s):
                addr = address_of(idx, spec)
                assert canonical_index(addr, spec) == idx
                seen.add((addr.level, addr.row, addr.col))
            assert len(seen) == spec.s

    @given(
        t=st.integers(min_value=1, max_value=6),
        l=st.integers(min_value=1, max_value=4),
        data=st.data(),
    )
    @settings(max_examples=200, deadline=None)
    def test_roundtrip_random_addresses(self, t, l, data):
        spec = RegionSpec(t=t, l=l, d=4)
        level = data.draw(st.integers(min_value=1, max_value=l))
        g = spec.grid_side(level)
        row = data.draw(st.integers(min_value=0, max_value=g - 1))
        col = data.draw(st.integers(min_value=0, max_value=g - 1))
        addr = TokenAddress(level, row, col)
        assert address_of(canonical_index(addr, spec), spec) == addr

    def test_out_of_range_rejected(self):
        spec = RegionSpec(t=2, l=2, d=4)
        with pytest.raises(ValueError):
            canonical_index(TokenAddress(1, 2, 0), spec)
        with pytest.raises(ValueError):
            canonical_index(TokenAddress(3, 0, 0), spec)
        with pytest.raises(ValueError):
            address_of(spec.s, spec)
        with pytest.raises(ValueError):
            address_of(-1, spec)


class TestLevelWeights:
    def test_reference_values(self):
        spec = RegionSpec(t=3, l=3, d=8)
        w = level_weights(spec)
        assert w[spec.level_slice(1)] == pytest.approx(7.0)
        assert w[spec.level_slice(2)] == pytest.approx(1.75)
        assert w[spec.level_slice(3)] == pytest.approx(0.4375)
        for level in (1, 2, 3):
            assert w[spec.level_slice(level)].sum() == pytest.approx(63.0)

    def test_single_token(self):
        spec = RegionSpec(t=1, l=1, d=8)
        np.testing.assert_array_equal(level_weights(spec), [1.0])

    def test_total_is_sequence_length(self):
        for t, l in [(1, 1), (2, 3), (3, 3), (5, 2), (4, 4)]:
            spec = RegionSpec(t=t, l=l, d=2)
            assert level_weights(spec).sum() == pytest.approx(spec.s, rel=1e-14)

    def test_per_level_totals_equal(self):
        for t, l in [(2, 2), (3, 3), (1, 5)]:
            spec = RegionSpec(t=t, l=l, d=2)
            w = level_weights(spec)
            totals = [w[spec.level_slice(i)].sum() for i in range(1, l + 1)]
            np.testing.assert_allclose(totals, totals[0], rtol=1e-14)


class TestGridTransform:
    def test_identity(self):
        spec = RegionSpec(t=3, l=3, d=8)
        perm = grid_transform_permutation(GridTransform(), spec)
        np.testing.assert_array_equal(perm, np.arange(spec.s))

    def test_quarter_turn_order_four(self):
        spec = RegionSpec(t=3, l=2, d=8)
        perm = grid_transform_permutation(GridTransform(rotation=1), spec)
        composed = np.arange(spec.s)
        for _ in range(4):
            composed = perm[composed]
        np.testing.assert_array_equal(composed, np.arange(spec.s))

    def test_quarter_turn_two_by_two(self):
        spec = RegionSpec(t=2, l=1, d=8)
        perm = grid_transform_permutation(GridTransform(rotation=1), spec)
        np.testing.assert_array_equal(perm, [1, 3, 0, 2])

    def test_every_transform_is_permutation_within_levels(self):
        spec = RegionSpec(t=2, l=3, d=8)
        for rotation in range(4):
            for flip in (False, True):
                perm = grid_transform_permutation(
                    GridTransform(rotation=rotation, flip=flip), spec
                )
                assert sorted(perm.tolist()) == list(range(spec.s))
                for level in range(1, spec.l + 1):
                    sl = spec.level_slice(level)
                    block = perm[sl]
                    assert block.min() >= sl.start and block.max() < sl.stop

    def test_composition_law(self):
        # perm(a.compose(b)) must equal applying b's permutation then a's.
        spec = RegionSpec(t=3, l=2, d=8)
        elements = [
            GridTransform(rotation=r, flip=f) for r in range(4) for f in (False, True)
        ]
        for a in elements:
            for b in elements:
                pa = grid_transform_permutation(a, spec)
                pb = grid_transform_permutation(b, spec)
                pc = grid_transform_permutation(a.compose(b), spec)
                np.testing.assert_array_equal(pc, pa[pb])

    def test_inverse(self):
        spec = RegionSpec(t=3, l=2, d=8)
        for rotation in range(4):
            for flip in (False, True):
                tf = GridTransform(rotation=rotation, flip=flip)
                perm = grid_transform_permutation(tf, spec)
                inv = grid_transform_permutation(tf.inverse(), spec)
                np.testing.assert_array_equal(inv[perm], np.arange(spec.s))

    def test_dihedral_group_is_reachable(self):
        spec = RegionSpec(t=2, l=1, d=8)
        perms = {
            tuple(grid_transform_permutation(GridTransform(r, f), spec))
            for r in range(4)
            for f in (False, True)
        }
        assert len(perms) == 8

    def test_invalid_rotation_rejected(self):
        with pytest.raises(ValueError):
            GridTransform(rotation=4)

    def test_permute_tokens_moves_content(self):
        spec = RegionSpec(t=2, l=1, d=3)
        values = np.arange(spec.s * 3, dtype=np.float64).reshape(spec.s, 3)
        perm = grid_transform_permutation(GridTransform(rotation=1), spec)
        moved = permute_tokens(values, perm)
        for src in range(spec.s):
            np.testing.assert_array_equal(moved[perm[src]], values[src])


class TestSubregionIndices:
    def test_full_window_is_identity(self):
        s = sequence_length(3, 3)
        idx = subregion_indices(3, 3, 0, 0, 3)
        np.testing.assert_array_equal(idx, np.arange(s))

    def test_cardinality_and_distinctness(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            c = int(rng.integers(1, 9))
            t = int(rng.integers(1, c + 1))
            l = int(rng.integers(1, 4))
            orow = int(rng.integers(0, c - t + 1))
            ocol = int(rng.integers(0, c - t + 1))
            idx = subregion_indices(c, t, orow, ocol, l)
            assert len(idx) == sequence_length(t, l)
            assert len(np.unique(idx)) == len(idx)

    def test_single_level_window(self):
        idx = subregion_indices(7, 3, 2, 1, 1)
        expected = [7 * r + c for r in range(2, 5) for c in range(1, 4)]
        np.testing.assert_array_equal(idx, expected)

    def test_cross_level_consistency(self):
        # A finest-level token is selected iff its coarsest ancestor tile
        # lies inside the window.  Exhaustive for small source contexts.
        for c in range(1, 8):
            for t in range(1, c + 1):
                for l in (2, 3):
                    source = RegionSpec(t=c, l=l, d=1)
                    for orow in range(c - t + 1):
                        for ocol in range(c - t + 1):
                            idx = set(
                                subregion_indices(c, t, orow, ocol, l).tolist()
                            )
                            scale = 2 ** (l - 1)
                            off = source.level_offsets[l - 1]
                            g = source.grid_side(l)
                            for row in range(g):
                                for col in range(g):
                                    anc_in = (
                                        orow <= row // scale < orow + t
                                        and ocol <= col // scale < ocol + t
                                    )
                                    token = off + row * g + col
                                    assert (token in idx) == anc_in

    def test_gathered_window_is_canonical_for_target(self):
        # Selecting a window and re-deriving addresses must land on the
        # target's own canonical layout.
        c, t, l = 5, 2, 3
        source = RegionSpec(t=c, l=l, d=1)
        target = RegionSpec(t=t, l=l, d=1)
        orow, ocol = 1, 3
        idx = subregion_indices(c, t, orow, ocol, l)
        for tgt_index, src_index in enumerate(idx.tolist()):
            src = address_of(src_index, source)
            tgt = address_of(tgt_index, target)
            scale = 2 ** (src.level - 1)
            assert src.level == tgt.level
            assert src.row == tgt.row + orow * scale
            assert src.col == tgt.col + ocol * scale

    def test_offset_out_of_range(self):
        with pytest.raises(ValueError):
            subregion_indices(5, 3, 3, 0, 2)
        with pytest.raises(ValueError):
            subregion_indices(5, 3, 0, -1, 2)
        with pytest.raises(ValueError):
            subregion_indices(2, 3, 0, 0, 2)
