"""Unit and property tests for the step-profile algebra."""

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shearflow.profiles import (
    Collide,
    Refine,
    StepProfile,
    Transpose,
    apply_move,
    apply_moves,
    collide_values,
    discretize,
    energy,
    l2_distance,
    momentum,
    moves_from_jsonable,
    moves_to_jsonable,
    normalize,
)


def two_thirds_profile() -> StepProfile:
    return StepProfile((0.0, 2.0 / 3.0, 1.0), (0.0, 3.0))


def halves(a: float, b: float) -> StepProfile:
    return StepProfile((0.0, 0.5, 1.0), (a, b))


# ---------------------------------------------------------------------------
# strategies


@st.composite
def profiles(draw, max_segments: int = 8, value_scale: float = 3.0):
    k = draw(st.integers(min_value=1, max_value=max_segments))
    if k == 1:
        bp = (0.0, 1.0)
    else:
        interior = draw(
            st.lists(
                st.floats(min_value=0.02, max_value=0.98),
                min_size=k - 1,
                max_size=k - 1,
                unique=True,
            )
        )
        bp = tuple([0.0] + sorted(interior) + [1.0])
        if min(np.diff(bp)) < 1e-4:
            # keep the geometry well conditioned
            bp = tuple(np.linspace(0.0, 1.0, k + 1))
    vals = draw(
        st.lists(
            st.floats(min_value=-value_scale, max_value=value_scale),
            min_size=len(bp) - 1,
            max_size=len(bp) - 1,
        )
    )
    return StepProfile(bp, tuple(vals))


def random_move(rng: np.random.Generator, p: StepProfile):
    kinds = ["refine"] if p.n_segments == 1 else ["refine", "transpose", "collide"]
    kind = kinds[rng.integers(len(kinds))]
    if kind == "refine":
        return Refine(int(rng.integers(p.n_segments)), float(rng.uniform(0.1, 0.9)))
    k = int(rng.integers(p.n_segments - 1))
    return Transpose(k) if kind == "transpose" else Collide(k)


# ---------------------------------------------------------------------------
# constructors and validation


class TestStepProfile:
    def test_rejects_bad_breakpoints(self):
        with pytest.raises(ValueError):
            StepProfile((0.0, 0.5), (1.0, 2.0))
        with pytest.raises(ValueError):
            StepProfile((0.1, 1.0), (1.0,))
        with pytest.raises(ValueError):
            StepProfile((0.0, 0.5, 0.5, 1.0), (1.0, 2.0, 3.0))
        with pytest.raises(ValueError):
            StepProfile((0.0, 1.0), (float("nan"),))

    def test_evaluation(self):
        p = halves(1.0, -1.0)
        assert p(0.25) == 1.0
        assert p(0.75) == -1.0
        assert p(0.5) == -1.0  # right-continuous
        assert p(1.0) == -1.0

    def test_json_round_trip(self):
        p = two_thirds_profile()
        q = StepProfile.from_json(p.to_json())
        assert q == p

    def test_json_rejects_extra_keys(self):
        with pytest.raises(ValueError):
            StepProfile.from_json(json.dumps({"breakpoints": [0, 1], "values": [1], "x": 2}))


# ---------------------------------------------------------------------------
# functionals: hand-computed values


class TestFunctionals:
    def test_momentum_constant(self):
        assert momentum(StepProfile((0.0, 1.0), (2.5,))) == pytest.approx(2.5, abs=1e-15)

    def test_momentum_antisymmetric(self):
        assert momentum(halves(1.0, -1.0)) == pytest.approx(0.0, abs=1e-15)

    def test_momentum_two_thirds(self):
        # 0 * (2/3) + 3 * (1/3) = 1
        assert momentum(two_thirds_profile()) == pytest.approx(1.0, abs=1e-12)

    def test_energy_zero(self):
        assert energy(StepProfile((0.0, 1.0), (0.0,))) == 0.0

    def test_energy_halves(self):
        assert energy(halves(1.0, -1.0)) == pytest.approx(0.5, abs=1e-15)

    def test_energy_two_thirds(self):
        # (1/2) * 9 * (1/3) = 1.5
        assert energy(two_thirds_profile()) == pytest.approx(1.5, abs=1e-12)

    def test_l2_distance_self(self):
        p = two_thirds_profile()
        assert l2_distance(p, p) == 0.0

    def test_l2_distance_to_rest(self):
        zero = StepProfile((0.0, 1.0), (0.0,))
        assert l2_distance(halves(1.0, -1.0), zero) == pytest.approx(1.0, abs=1e-14)

    def test_l2_distance_swap(self):
        assert l2_distance(halves(1.0, -1.0), halves(-1.0, 1.0)) == pytest.approx(
            2.0, abs=1e-14
        )

    def test_l2_distance_refinement_invariant(self):
        p = halves(1.0, -1.0)
        q = apply_move(p, Refine(0, 0.3))
        assert l2_distance(p, q) == 0.0


# ---------------------------------------------------------------------------
# discretize


class TestDiscretize:
    def test_constant(self):
        x = np.linspace(0.0, 1.0, 11)
        p = discretize(x, np.full_like(x, 2.0), 4)
        assert p.values == (2.0, 2.0, 2.0, 2.0)

    def test_linear_ramp_two_cells(self):
        p = discretize(np.array([0.0, 1.0]), np.array([0.0, 1.0]), 2)
        assert p.values[0] == pytest.approx(0.25, abs=1e-15)
        assert p.values[1] == pytest.approx(0.75, abs=1e-15)

    def test_momentum_matches_integral(self):
        x = np.linspace(0.0, 1.0, 257)
        u = np.sin(2.0 * np.pi * x) + 0.3
        p = discretize(x, u, 7)
        integral = np.trapezoid(u, x)
        assert momentum(p) == pytest.approx(integral, abs=1e-13)

    def test_l2_error_non_increasing_in_resolution(self):
        x = np.linspace(0.0, 1.0, 2001)
        u = np.sin(2.0 * np.pi * x)

        def fine_error(p: StepProfile) -> float:
            # independent dense midpoint quadrature of (u - p)^2
            xm = 0.5 * (x[:-1] + x[1:])
            um = np.interp(xm, x, u)
            return float(np.sqrt(np.sum((um - p(xm)) ** 2 * np.diff(x))))

        errors = [fine_error(discretize(x, u, k)) for k in (2, 4, 8, 16)]
        assert all(e2 <= e1 + 1e-12 for e1, e2 in zip(errors, errors[1:]))

    def test_rejects_partial_cover(self):
        with pytest.raises(ValueError):
            discretize(np.array([0.2, 1.0]), np.array([1.0, 1.0]), 2)


# ---------------------------------------------------------------------------
# moves: hand-derived examples


class TestMoves:
    def test_refine_preserves_function(self):
        p = two_thirds_profile()
        q = apply_move(p, Refine(1, 0.25))
        assert q.n_segments == 3
        assert l2_distance(p, q) == 0.0
        assert q.values[1] == q.values[2] == 3.0

    def test_refine_rejects_degenerate_ratio(self):
        p = two_thirds_profile()
        for lam in (0.0, 1.0, -0.2, 1.7):
            with pytest.raises(ValueError):
                apply_move(p, Refine(0, lam))

    def test_transpose_swaps_segments_with_lengths(self):
        p = two_thirds_profile()
        q = apply_move(p, Transpose(0))
        assert q.breakpoints == pytest.approx((0.0, 1.0 / 3.0, 1.0))
        assert q.values == (3.0, 0.0)

    def test_transpose_involution(self):
        p = two_thirds_profile()
        q = apply_moves(p, [Transpose(0), Transpose(0)])
        assert np.allclose(q.breakpoints, p.breakpoints, atol=1e-15)
        assert np.allclose(q.values, p.values, atol=1e-15)

    def test_collide_two_thirds_example(self):
        # masses (2/3, 1/3), values (0, 3):
        #   u0 = (0 + 1) / 1 = 1, v1 = 2 - 0 = 2, v2 = 2 - 3 = -1
        p = two_thirds_profile()
        q = apply_move(p, Collide(0))
        assert q.values[0] == pytest.approx(2.0, abs=1e-15)
        assert q.values[1] == pytest.approx(-1.0, abs=1e-15)
        assert momentum(q) == pytest.approx(momentum(p), abs=1e-14)
        assert energy(q) == pytest.approx(energy(p), abs=1e-14)

    def test_collide_equal_mass_is_swap(self):
        p = halves(1.25, -0.5)
        q = apply_move(p, Collide(0))
        assert q.values[0] == pytest.approx(-0.5, abs=1e-15)
        assert q.values[1] == pytest.approx(1.25, abs=1e-15)

    def test_collide_involution(self):
        p = two_thirds_profile()
        q = apply_moves(p, [Collide(0), Collide(0)])
        assert np.allclose(q.values, p.values, atol=1e-12)

    def test_out_of_range_indices(self):
        p = two_thirds_profile()
        with pytest.raises(ValueError):
            apply_move(p, Transpose(1))
        with pytest.raises(ValueError):
            apply_move(p, Collide(-1))
        with pytest.raises(ValueError):
            apply_move(p, Refine(2, 0.5))


# ---------------------------------------------------------------------------
# normalize


class TestNormalize:
    def test_merges_close_values(self):
        eps = 1e-6
        p = halves(1.0, 1.0 + eps / 2.0)
        q = normalize(p, tol=eps)
        assert q.n_segments == 1
        assert q.values[0] == pytest.approx(1.0 + eps / 4.0, abs=1e-18)
        assert momentum(q) == pytest.approx(momentum(p), abs=1e-16)

    def test_merges_exact_duplicates_at_zero_tol(self):
        p = halves(1.0, 1.0)
        q = normalize(p, tol=0.0)
        assert q.n_segments == 1
        assert q.values == (1.0,)

    def test_idempotent(self):
        p = two_thirds_profile()
        q = normalize(p, tol=0.5)
        assert normalize(q, tol=0.5) == q

    def test_no_merge_passthrough(self):
        p = two_thirds_profile()
        assert normalize(p, tol=1e-9) is p


# ---------------------------------------------------------------------------
# property tests


drift_scale = lambda p: max(1.0, abs(momentum(p)), energy(p))


class TestMoveProperties:
    @settings(max_examples=200, deadline=None)
    @given(profiles(), st.randoms(use_true_random=False))
    def test_random_move_conserves_momentum_energy(self, p, pyrandom):
        rng = np.random.default_rng(pyrandom.randint(0, 2**32 - 1))
        move = random_move(rng, p)
        q = apply_move(p, move)
        scale = drift_scale(p)
        assert abs(momentum(q) - momentum(p)) <= 1e-12 * scale
        assert abs(energy(q) - energy(p)) <= 1e-12 * scale

    @settings(max_examples=100, deadline=None)
    @given(profiles())
    def test_transpose_collide_involutions(self, p):
        if p.n_segments < 2:
            return
        for move in (Transpose(0), Collide(0)):
            q = apply_moves(p, [move, move])
            assert np.allclose(q.breakpoints, p.breakpoints, atol=1e-12)
            assert np.allclose(q.values, p.values, atol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(profiles(), st.integers(min_value=0, max_value=2**31 - 1))
    def test_equal_mass_collide_equals_value_swap(self, p, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(p.n_segments))
        lam = 0.5
        refined = apply_move(p, Refine(k, lam))
        collided = apply_move(refined, Collide(k))
        assert collided.values[k] == pytest.approx(refined.values[k + 1], abs=1e-12)
        assert collided.values[k + 1] == pytest.approx(refined.values[k], abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(profiles())
    def test_moves_json_round_trip(self, p):
        rng = np.random.default_rng(0)
        moves = []
        q = p
        for _ in range(5):
            move = random_move(rng, q)
            moves.append(move)
            q = apply_move(q, move)
        recovered = moves_from_jsonable(json.loads(json.dumps(moves_to_jsonable(moves))))
        assert recovered == tuple(moves)
        r = apply_moves(p, recovered)
        assert r == q
