"""Tests for the symbolic encoding of the unstable manifold.

The 12-symbol sequences frozen here were generated by branch integration
at tight tolerance and cross-checked against the attractor structure:
all-zero capture by the negative superradiant sink on the left of the
transitional window, the alternating lasing pattern on its right.
"""

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lmglab.kneading import (
    KneadingRecord,
    detect_plateaus,
    kneading_invariant,
    kneading_sequence,
    limit_invariant,
    negate_map,
    negate_sequence,
    parity_branch,
    sweep,
    unstable_branch,
)
from lmglab.model import ModelParams


def p_mix(lp, lm=1.5):
    return ModelParams(omega=0.5, omega0=0.2, kappa=4.0, lambda_minus=lm,
                       lambda_plus=lp, gamma_down=0.02)


@pytest.fixture(scope="module")
def branch_traj():
    return unstable_branch(p_mix(1.532895))


class TestInvariant:
    def test_reference_sequence(self):
        assert kneading_invariant("010110000000", 12) == Fraction(11, 32)

    def test_zero_then_ones(self):
        K = kneading_invariant("0" + "1" * 11, 12)
        assert K == Fraction(1, 2) - Fraction(1, 4096)

    def test_alternating(self):
        K = kneading_invariant("010101010101")
        assert K == Fraction(1365, 4096)
        assert abs(float(K) - 1.0 / 3.0) < 1e-3

    def test_empty(self):
        assert kneading_invariant("") == Fraction(0)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            kneading_invariant("0101", 12)

    def test_non_bit(self):
        with pytest.raises(ValueError):
            kneading_invariant("01x1", 4)

    @given(st.text(alphabet="01", min_size=1, max_size=20))
    @settings(max_examples=200, deadline=None)
    def test_range_denominator_and_negation(self, s):
        n = len(s)
        K = kneading_invariant(s, n)
        assert 0 <= K < 1
        assert (2 ** n) % K.denominator == 0
        assert K + kneading_invariant(negate_sequence(s), n) == \
            1 - Fraction(1, 2 ** n)


class TestLimitInvariant:
    @pytest.mark.parametrize("symbols,expected", [
        ("011111111111", Fraction(1, 2)),
        ("011000000000", Fraction(3, 8)),
        ("010111111111", Fraction(3, 8)),
        ("010010101010", Fraction(7, 24)),
        ("010101010101", Fraction(1, 3)),
        ("010110000000", Fraction(11, 32)),
    ])
    def test_known_tails(self, symbols, expected):
        assert limit_invariant(symbols) == expected

    def test_no_periodic_tail(self):
        assert limit_invariant("001011010001") is None


class TestNegateMap:
    def test_plateau_pair(self):
        assert negate_map("011000000000", 2) == "010111111111"

    def test_suffix_negation_involutive(self):
        s = "0110010111"
        assert negate_sequence(negate_sequence(s)) == s

    def test_prefix_preserved(self):
        out = negate_map("011010", 2)
        assert out[:2] == "01"

    def test_requires_one_after_prefix(self):
        with pytest.raises(ValueError):
            negate_map("010111111111", 2)

    def test_prefix_out_of_range(self):
        with pytest.raises(ValueError):
            negate_map("0110", 7)


class TestBranch:
    def test_reference_point(self, branch_traj):
        assert kneading_sequence(branch_traj) == "010110000000"
        assert branch_traj.stopped    # captured by a superradiant sink

    def test_parity_branch_negates(self, branch_traj):
        s_minus = kneading_sequence(branch_traj)
        s_plus = kneading_sequence(parity_branch(branch_traj))
        assert s_plus == negate_sequence(s_minus)
        assert kneading_invariant(s_minus) + kneading_invariant(s_plus) == \
            1 - Fraction(1, 4096)

    def test_seed_halving_keeps_sequence(self, branch_traj):
        tr = unstable_branch(p_mix(1.532895), delta1=5e-7)
        assert kneading_sequence(tr) == kneading_sequence(branch_traj)

    def test_exclusion_zone_robustness(self, branch_traj):
        for w in (0.18, 0.22):
            assert kneading_sequence(branch_traj, w=w) == "010110000000"

    def test_rejects_stable_normal_state(self):
        with pytest.raises(ValueError):
            unstable_branch(p_mix(1.3))

    def test_rejects_complex_unstable_pair(self):
        with pytest.raises(ValueError):
            unstable_branch(p_mix(1.0, lm=0.5))


class TestSweep:
    def test_window_landmarks(self):
        recs = sweep(p_mix(1.0), [1.526, 1.532895, 1.534])
        assert [r.symbols for r in recs] == [
            "000000000000", "010110000000", "010101010101"]
        assert [r.K_n for r in recs] == [
            Fraction(0), Fraction(11, 32), Fraction(1365, 4096)]
        assert all(r.terminal == "completed" for r in recs)

    def test_parallel_matches_serial(self):
        grid = [1.526, 1.534]
        assert sweep(p_mix(1.0), grid, workers=2) == sweep(p_mix(1.0), grid)

    def test_horizon_exhausted(self):
        # far too short for the manifold to even leave the saddle
        rec = sweep(p_mix(1.0), [1.532895], horizon=40.0)[0]
        assert rec.terminal == "horizon-exhausted"
        assert rec.symbols == ""
        assert rec.K_n is None

    def test_escape_flagged(self):
        # a fat stop ball truncates the branch before any symbol forms
        rec = sweep(p_mix(1.0), [1.526], stop_radius=0.25)[0]
        assert rec.terminal == "escaped-to-attractor"
        assert rec.K_n is None


def _fake(lp, K, symbols="s"):
    return KneadingRecord(lambda_plus=lp, symbols=symbols, K_n=K,
                          n=12, terminal="completed")


class TestPlateaus:
    def test_merge_single_point_spike(self):
        half, third, spike = Fraction(1, 2), Fraction(1, 3), Fraction(7, 24)
        recs = [_fake(1.0 + 0.01 * i, half, f"L{i}") for i in range(11)]
        recs[5] = _fake(1.05, spike, "SPIKE")
        recs += [_fake(1.11 + 0.01 * i, third, f"R{i}") for i in range(10)]
        plats = detect_plateaus(recs)
        assert len(plats) == 2
        left, right = plats
        assert left.K_value == half
        assert left.lambda_range == (1.0, 1.10)
        assert left.spike_centers == (1.05,)
        assert left.spike_center_estimate == 1.05
        assert left.left_sequence == "L0"
        assert left.right_sequence == "L10"
        assert right.K_value == third
        assert right.spike_centers == ()

    def test_wide_departure_is_its_own_plateau(self):
        half, mid = Fraction(1, 2), Fraction(3, 8)
        recs = ([_fake(1.0 + 0.01 * i, half) for i in range(3)]
                + [_fake(1.03 + 0.01 * i, mid) for i in range(3)]
                + [_fake(1.06 + 0.01 * i, half) for i in range(3)])
        plats = detect_plateaus(recs)
        assert [pl.K_value for pl in plats] == [half, mid, half]
        assert all(pl.spike_centers == () for pl in plats)

    def test_skips_incomplete_records(self):
        half = Fraction(1, 2)
        recs = [_fake(1.0, half),
                KneadingRecord(1.01, "", None, 12, "failed"),
                _fake(1.02, half)]
        plats = detect_plateaus(recs)
        assert len(plats) == 1
        assert plats[0].lambda_range == (1.0, 1.02)

    def test_boundary_refinement(self):
        half, third = Fraction(1, 2), Fraction(1, 3)
        cut = 1.1037

        def evaluator(lp):
            return _fake(lp, half if lp < cut else third,
                         "H" if lp < cut else "T")

        recs = [evaluator(1.0 + 0.01 * i) for i in range(21)]
        plats = detect_plateaus(recs, evaluator=evaluator, resolution=1e-7)
        left, right = plats
        assert left.lambda_range[1] < cut <= right.lambda_range[0]
        assert right.lambda_range[0] - left.lambda_range[1] <= 1e-7 * 1.001
        assert left.right_sequence == "H"
        assert right.left_sequence == "T"
