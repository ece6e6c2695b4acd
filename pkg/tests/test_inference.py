from dataclasses import dataclass

import numpy as np
import pytest

from src.exceptions import ShapeError
from src.schemas.dynamics import ControlBounds, DynamicsKind, EgoState
from src.schemas.inference import AggregationConfig
from src.services.inference import (
    Ensemble,
    aggregate,
    aggregate_rows,
    candidate_controls,
    ensemble_select,
    select_control,
    trace_frame,
)


@dataclass(frozen=True)
class DistanceBarrier:
    """Positive outside a unit disc around the obstacle's latest relative position"""

    offset: float = 0.0
    kind: DynamicsKind = DynamicsKind.SINGLE_INTEGRATOR
    history_length: int = 3
    dt: float = 0.1
    arch: str = "distance"

    def values(self, states, windows):
        return np.linalg.norm(windows[:, -1, :2], axis=1) - 1.0 + self.offset


def static_window(x: float, y: float, k: int = 3) -> np.ndarray:
    return np.tile(np.array([x, y, 0.0, 0.0]), (1, k, 1))


@pytest.fixture
def origin():
    return EgoState(kind=DynamicsKind.SINGLE_INTEGRATOR, components=(0.0, 0.0))


@pytest.fixture
def si_bounds():
    return ControlBounds.default_for(DynamicsKind.SINGLE_INTEGRATOR)


@pytest.mark.parametrize("values,expected", [
    ([0.7, 0.9], 1.0),
    ([0.25, -0.1], 0.0),
    ([0.25, 0.4], 0.4),
    ([], 1.0),
])
def test_aggregate_examples(values, expected):
    assert aggregate(values, AggregationConfig(clip=0.5)) == pytest.approx(expected)


def test_aggregate_rows_matches_scalar():
    values = np.array([[0.7, 0.9], [0.25, -0.1], [0.25, 0.4]])
    np.testing.assert_allclose(aggregate_rows(values, 0.5), [1.0, 0.0, 0.4])
    np.testing.assert_allclose(aggregate_rows(np.zeros((4, 0)), 0.5), np.ones(4))


def test_nominal_replaces_first_candidate(si_bounds):
    controls = candidate_controls(si_bounds, 8, 7, nominal=np.array([3.0, -0.2]))
    np.testing.assert_allclose(controls[0], [1.0, -0.2])
    assert np.all(controls >= -1.0) and np.all(controls <= 1.0)


def test_no_obstacles_picks_best_scoring_candidate(origin, si_bounds, si_dynamics):
    goal = np.array([4.0, 0.0])
    decision = select_control(origin, np.zeros((0, 3, 4)), DistanceBarrier(), si_dynamics, si_bounds,
                              32, goal, rng_seed=11)
    controls = candidate_controls(si_bounds, 32, 11)
    successors = si_dynamics.step(np.zeros((32, 2)), controls)
    best = int(np.argmin(np.linalg.norm(successors - goal, axis=1)))
    assert decision.feasible_count == 32
    np.testing.assert_allclose(decision.chosen.array, controls[best])


def test_chosen_candidate_keeps_clear_of_obstacle(origin, si_bounds, si_dynamics):
    decision = select_control(origin, static_window(1.05, 0.0), DistanceBarrier(), si_dynamics, si_bounds,
                              64, (4.0, 0.0), rng_seed=3, trace=True)
    assert decision.chosen is not None
    assert 0 < decision.feasible_count < 64
    successor = si_dynamics.step(origin.array[None, :], decision.chosen.array[None, :])[0]
    assert np.linalg.norm(np.array([1.05, 0.0]) - successor) > 1.0
    tr = decision.trace
    assert tr.aggregated[tr.chosen_index] > 0
    assert np.all(tr.scores[tr.aggregated > 0] <= tr.scores[tr.chosen_index])


def test_all_candidates_infeasible_gives_empty_decision(origin, si_bounds, si_dynamics):
    decision = select_control(origin, static_window(0.2, 0.0), DistanceBarrier(), si_dynamics, si_bounds,
                              16, (4.0, 0.0))
    assert decision.chosen is None
    assert decision.feasible_count == 0
    assert decision.candidates_evaluated == 16


def test_history_shape_is_checked(origin, si_bounds, si_dynamics):
    with pytest.raises(ShapeError):
        select_control(origin, np.zeros((1, 5, 4)), DistanceBarrier(), si_dynamics, si_bounds, 4, (1.0, 0.0))


def test_state_kind_must_match_model(si_bounds, si_dynamics):
    dubins = EgoState(kind=DynamicsKind.DUBINS, components=(0.0, 0.0, 0.0, 0.0))
    with pytest.raises(ShapeError):
        select_control(dubins, np.zeros((0, 3, 4)), DistanceBarrier(), si_dynamics, si_bounds, 4, (1.0, 0.0))


def test_selection_is_deterministic_for_a_seed(origin, si_bounds, si_dynamics):
    args = (origin, static_window(1.5, 0.3), DistanceBarrier(), si_dynamics, si_bounds, 32, (4.0, 4.0))
    a = select_control(*args, rng_seed=[5, 2, 5])
    b = select_control(*args, rng_seed=[5, 2, 5])
    assert a.chosen == b.chosen


def test_ensemble_needs_two_compatible_members():
    with pytest.raises(ValueError):
        Ensemble((DistanceBarrier(),))
    with pytest.raises(ValueError):
        Ensemble((DistanceBarrier(), DistanceBarrier(arch="other")))
    with pytest.raises(ValueError):
        Ensemble((DistanceBarrier(), DistanceBarrier()), mode="median")


def test_agreeing_ensemble_matches_single_model(origin, si_bounds, si_dynamics):
    windows = static_window(1.05, 0.0)
    single = select_control(origin, windows, DistanceBarrier(), si_dynamics, si_bounds, 32, (4.0, 0.0), rng_seed=9)
    ens = ensemble_select(origin, windows, Ensemble((DistanceBarrier(), DistanceBarrier())), si_dynamics,
                          si_bounds, 32, (4.0, 0.0), rng_seed=9)
    assert ens.chosen == single.chosen
    assert ens.feasible_count == single.feasible_count


def test_disagreeing_ensemble_rejects_every_candidate(origin, si_bounds, si_dynamics):
    ens = Ensemble((DistanceBarrier(), DistanceBarrier(offset=0.8)), variance_threshold=0.05)
    decision = ensemble_select(origin, static_window(3.0, 0.0), ens, si_dynamics, si_bounds, 16, (4.0, 0.0))
    assert decision.chosen is None


def test_all_mode_is_stricter_than_mean(origin, si_bounds, si_dynamics):
    members = (DistanceBarrier(), DistanceBarrier(offset=0.3))
    windows = static_window(1.05, 0.0)
    mean = ensemble_select(origin, windows, Ensemble(members, 1.0, "mean"), si_dynamics, si_bounds, 64,
                           (4.0, 0.0), rng_seed=4)
    strict = ensemble_select(origin, windows, Ensemble(members, 1.0, "all"), si_dynamics, si_bounds, 64,
                             (4.0, 0.0), rng_seed=4)
    assert strict.feasible_count <= mean.feasible_count


def test_trace_frame_is_long_format(origin, si_bounds, si_dynamics):
    windows = np.concatenate([static_window(2.0, 0.0), static_window(0.0, 2.0)])
    decision = select_control(origin, windows, DistanceBarrier(), si_dynamics, si_bounds, 5, (4.0, 0.0), trace=True)
    frame = trace_frame([(7, decision.trace)])
    assert len(frame) == 10
    assert set(frame["obstacle"]) == {0, 1}
    assert frame["chosen"].sum() == 2
    assert list(frame.columns[:4]) == ["step", "candidate", "u_0", "u_1"]


def test_trace_frame_marks_empty_scene(origin, si_bounds, si_dynamics):
    decision = select_control(origin, np.zeros((0, 3, 4)), DistanceBarrier(), si_dynamics, si_bounds, 3,
                              (4.0, 0.0), trace=True)
    frame = trace_frame([(0, decision.trace)])
    assert list(frame["obstacle"]) == [-1, -1, -1]
    assert frame["barrier_value"].isna().all()


def test_real_model_selection_runs(si_model, si_bounds, si_dynamics, origin):
    k = si_model.history_length
    decision = select_control(origin, static_window(1.0, 1.0, k), si_model, si_dynamics, si_bounds, 8, (4.0, 4.0))
    assert decision.candidates_evaluated == 8
