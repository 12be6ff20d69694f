"""Unit and property tests for the move-sequence planner."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shearflow.planning import (
    InvariantMismatchError,
    Plan,
    check_preconditions,
    plan,
    random_reachable_target,
    replay,
)
from shearflow.profiles import (
    Collide,
    StepProfile,
    Transpose,
    energy,
    l2_distance,
    momentum,
)


def halves(a: float, b: float) -> StepProfile:
    return StepProfile((0.0, 0.5, 1.0), (a, b))


# ---------------------------------------------------------------------------
# strategies


@st.composite
def instances(draw, max_segments: int = 6, max_moves: int = 6):
    """A random source profile and a target reachable from it by moves."""
    k = draw(st.integers(min_value=2, max_value=max_segments))
    seed = draw(st.integers(min_value=0, max_value=10_000))
    rng = np.random.default_rng(seed)
    interior = np.sort(rng.uniform(0.05, 0.95, size=k - 1))
    bp = tuple([0.0] + list(interior) + [1.0])
    vals = tuple(rng.normal(0.0, 1.5, size=k))
    source = StepProfile(bp, vals)
    n_moves = draw(st.integers(min_value=0, max_value=max_moves))
    target, _ = random_reachable_target(source, n_moves, seed=seed + 1)
    return source, target, seed


# ---------------------------------------------------------------------------
# worked examples


def test_adjacent_swap_needs_one_transposition():
    source = halves(1.0, -1.0)
    target = halves(-1.0, 1.0)
    result = plan(source, target, eps=1e-9)
    assert result.converged
    assert result.achieved_error == 0.0
    assert result.moves == (Transpose(0),)


def test_two_cell_merge_is_a_single_collision():
    source = StepProfile((0.0, 2.0 / 3.0, 1.0), (0.0, 3.0))
    target = StepProfile((0.0, 2.0 / 3.0, 1.0), (2.0, -1.0))
    result = plan(source, target, eps=1e-9)
    assert result.converged
    assert result.achieved_error == 0.0
    assert result.moves == (Collide(0),)


def test_identical_profiles_need_no_moves():
    p = StepProfile((0.0, 0.3, 0.8, 1.0), (0.5, -0.25, 1.5))
    result = plan(p, p, eps=1e-9)
    assert result.converged
    assert result.moves == ()
    assert result.achieved_error == 0.0


def test_mismatched_momentum_is_a_typed_error():
    source = halves(1.0, -1.0)
    target = halves(1.0, 1.0)
    with pytest.raises(InvariantMismatchError):
        plan(source, target)
    with pytest.raises(ValueError):
        # the typed error is still a ValueError for generic callers
        check_preconditions(source, target)


def test_mismatched_energy_is_a_typed_error():
    source = halves(1.0, -1.0)
    target = halves(np.sqrt(2.0), 0.0)
    # momenta are unequal here too, so build an equal-momentum pair instead
    target = halves(-1.0, 1.0)
    assert momentum(source) == pytest.approx(momentum(target))
    skewed = StepProfile((0.0, 0.5, 1.0), (-2.0, 2.0))
    with pytest.raises(InvariantMismatchError):
        plan(source, skewed)


def test_non_positive_eps_rejected():
    p = halves(1.0, -1.0)
    with pytest.raises(ValueError):
        plan(p, p, eps=0.0)


# ---------------------------------------------------------------------------
# replay and plan-object round trips


def test_replay_includes_source_and_every_intermediate():
    source = halves(1.0, -1.0)
    target = halves(-1.0, 1.0)
    result = plan(source, target, eps=1e-9)
    states = replay(source, result.moves)
    assert len(states) == len(result.moves) + 1
    assert states[0] == source
    assert l2_distance(states[-1], target) == result.achieved_error


def test_plan_json_round_trip():
    source = StepProfile((0.0, 0.25, 0.5, 1.0), (2.0, -1.0, 0.5))
    target, _ = random_reachable_target(source, 5, seed=3)
    result = plan(source, target, eps=1e-3)
    again = Plan.from_json(result.to_json())
    assert again == Plan(result.moves, result.achieved_error, result.converged)
    assert again.intermediate_profiles is None


def test_recorded_profiles_match_replay():
    source = StepProfile((0.0, 0.4, 1.0), (1.0, -0.5))
    target, _ = random_reachable_target(source, 4, seed=11)
    result = plan(source, target, eps=1e-3, record_profiles=True)
    assert result.intermediate_profiles is not None
    assert list(result.intermediate_profiles) == replay(source, result.moves)


def test_budget_caps_the_move_count():
    source = StepProfile((0.0, 0.3, 0.6, 1.0), (1.5, -1.0, 0.25))
    target, _ = random_reachable_target(source, 8, seed=7)
    result = plan(source, target, eps=1e-12, budget=5)
    assert len(result.moves) <= 5


# ---------------------------------------------------------------------------
# reachable-target generator


def test_random_reachable_target_is_deterministic():
    source = StepProfile((0.0, 0.2, 0.7, 1.0), (0.0, 1.0, -1.0))
    t1, p1 = random_reachable_target(source, 6, seed=42)
    t2, p2 = random_reachable_target(source, 6, seed=42)
    assert t1 == t2
    assert p1 == p2
    t3, _ = random_reachable_target(source, 6, seed=43)
    assert t3 != t1 or True  # different seed may coincide, but must not crash


def test_random_reachable_target_zero_moves_is_identity():
    source = StepProfile((0.0, 0.5, 1.0), (1.0, 2.0))
    target, generating = random_reachable_target(source, 0, seed=0)
    assert target == source
    assert generating.moves == ()


def test_random_reachable_target_conserves_invariants():
    source = StepProfile((0.0, 0.1, 0.6, 1.0), (3.0, 0.0, -1.0))
    target, _ = random_reachable_target(source, 12, seed=5)
    assert momentum(target) == pytest.approx(momentum(source), rel=1e-12, abs=1e-12)
    assert energy(target) == pytest.approx(energy(source), rel=1e-12, abs=1e-12)


# ---------------------------------------------------------------------------
# properties


@settings(max_examples=15, deadline=None)
@given(instances())
def test_plan_solves_reachable_instances(instance):
    source, target, seed = instance
    result = plan(source, target, eps=1e-3, seed=seed)
    states = replay(source, result.moves)
    # replaying the plan reproduces the reported error exactly
    assert l2_distance(states[-1], target) == result.achieved_error
    if result.converged:
        assert result.achieved_error <= 1e-3


@settings(max_examples=15, deadline=None)
@given(instances(max_segments=5, max_moves=5))
def test_plan_intermediates_conserve_momentum_and_energy(instance):
    source, target, seed = instance
    result = plan(source, target, eps=1e-3, seed=seed)
    m0, e0 = momentum(source), energy(source)
    m_scale = max(1.0, abs(m0))
    e_scale = max(1.0, e0)
    for state in replay(source, result.moves):
        assert abs(momentum(state) - m0) <= 1e-10 * m_scale
        assert abs(energy(state) - e0) <= 1e-10 * e_scale


@settings(max_examples=10, deadline=None)
@given(instances(max_segments=5, max_moves=4))
def test_plan_is_deterministic_in_its_seed(instance):
    source, target, seed = instance
    a = plan(source, target, eps=1e-3, seed=seed)
    b = plan(source, target, eps=1e-3, seed=seed)
    assert a == b
