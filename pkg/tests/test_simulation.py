import numpy as np
import pytest

from src.exceptions import OverDensityError, SimulationError
from src.schemas.dynamics import Control, DynamicsKind
from src.schemas.inference import ControllerDecision
from src.schemas.sim import EpisodeOutcome, Scenario
from src.services.baselines import GoalSeekerController
from src.services.orca import ConstantVelocityModel
from src.services.simulation import (
    collision_rate,
    read_trajectory_csv,
    run_episode,
    run_episodes,
    spawn_scenario,
    step_clearance,
    write_trajectory_csv,
)
from src.telemetry import counter_value


class FrozenController:
    name = "frozen"
    kind = DynamicsKind.SINGLE_INTEGRATOR

    def decide(self, obs):
        return ControllerDecision(candidates_evaluated=4)


class BrokenController:
    name = "broken"
    kind = DynamicsKind.SINGLE_INTEGRATOR

    def decide(self, obs):
        raise RuntimeError("no plan")


class RecordingController:
    """Stands still and keeps every observation it was shown"""

    name = "recording"
    kind = DynamicsKind.SINGLE_INTEGRATOR

    def __init__(self):
        self.seen = []

    def decide(self, obs):
        self.seen.append(obs)
        return ControllerDecision(chosen=Control(kind=self.kind, components=(0.0, 0.0)), candidates_evaluated=1,
                                  feasible_count=1)


def open_scenario(**kw) -> Scenario:
    base = dict(obstacle_count=0, ego_dynamics_kind=DynamicsKind.SINGLE_INTEGRATOR, arena_half_extent=5.0,
                ego_start=(-1.0, -1.0), ego_goal=(1.0, 1.0), max_steps=200, seed=1)
    base.update(kw)
    return Scenario(**base)


def test_spawn_respects_clearances(small_scenario):
    world = spawn_scenario(small_scenario)
    pos = world.crowd.positions
    assert pos.shape == (3, 2)
    assert np.all(np.abs(pos) <= small_scenario.arena_half_extent)
    start = np.asarray(small_scenario.ego_start)
    assert np.all(np.linalg.norm(pos - start, axis=1) >= 1.0)
    gaps = np.linalg.norm(pos[:, None] - pos[None], axis=2) + np.eye(3) * 10
    assert gaps.min() >= 0.6


def test_spawn_is_seeded(small_scenario):
    a = spawn_scenario(small_scenario).crowd
    b = spawn_scenario(small_scenario).crowd
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(a.goals, b.goals)
    c = spawn_scenario(small_scenario.model_copy(update={"seed": 4})).crowd
    assert not np.array_equal(a.positions, c.positions)


def test_spawn_over_density_raises():
    cfg = open_scenario(obstacle_count=200, arena_half_extent=2.0, spawn_budget=5000)
    with pytest.raises(OverDensityError) as err:
        spawn_scenario(cfg)
    assert err.value.requested == 200
    assert "lower the density" in str(err.value)


def test_goal_seeker_reaches_goal_in_empty_arena():
    result = run_episode(open_scenario(), GoalSeekerController(DynamicsKind.SINGLE_INTEGRATOR))
    assert result.outcome is EpisodeOutcome.REACHED_GOAL
    assert np.linalg.norm(result.ego_states[-1] - [1.0, 1.0]) <= 0.3
    assert len(result.ego_states) == result.steps_taken + 1
    assert result.controls.shape == (result.steps_taken, 2)
    assert result.obstacle_positions.shape == (len(result.ego_states), 0, 2)


def test_frozen_controller_ends_episode():
    before = counter_value("episodes_total", {"method": "frozen", "outcome": "frozen"})
    result = run_episode(open_scenario(), FrozenController())
    assert result.outcome is EpisodeOutcome.FROZEN
    assert result.steps_taken == 0
    assert result.candidates_evaluated == 4
    assert result.failed
    assert counter_value("episodes_total", {"method": "frozen", "outcome": "frozen"}) == before + 1


def test_controller_exception_counts_as_frozen():
    assert run_episode(open_scenario(), BrokenController()).outcome is EpisodeOutcome.FROZEN


def test_timeout_when_standing_still():
    result = run_episode(open_scenario(max_steps=5), RecordingController())
    assert result.outcome is EpisodeOutcome.TIMED_OUT
    assert result.steps_taken == 5


def test_controller_kind_must_match_scenario():
    with pytest.raises(SimulationError):
        run_episode(open_scenario(), GoalSeekerController(DynamicsKind.DUBINS))


def test_observation_windows_grow_then_cap(small_scenario):
    controller = RecordingController()
    run_episode(small_scenario.model_copy(update={"max_steps": 8}), controller, history_window=3)
    first, last = controller.seen[0], controller.seen[-1]
    assert first.obstacle_positions.shape == (1, 3, 2)
    assert last.obstacle_positions.shape == (3, 3, 2)
    assert len(last.ego_positions) == 4
    np.testing.assert_array_equal(first.ego_velocity, [0.0, 0.0])
    assert first.rng(5).random() == first.rng(5).random()
    assert first.rng(5).random() != first.rng(6).random()


def test_step_clearance_catches_pass_through():
    ego_before, ego_after = np.array([-0.6, 0.0]), np.array([0.6, 0.0])
    obs = np.array([[0.0, 0.0]])
    assert step_clearance(ego_before, ego_after, obs, obs) == pytest.approx(0.0)
    assert step_clearance(ego_before, ego_after, obs + [0.0, 2.0], obs + [0.0, 2.0]) == pytest.approx(2.0)
    assert step_clearance(ego_before, ego_after, np.zeros((0, 2)), np.zeros((0, 2))) == np.inf


def test_standing_in_the_crowd_path_collides():
    cfg = Scenario(obstacle_count=25, ego_dynamics_kind=DynamicsKind.SINGLE_INTEGRATOR, arena_half_extent=3.0,
                   ego_start=(0.0, 0.0), ego_goal=(2.5, 2.5), max_steps=300, seed=2)
    result = run_episode(cfg, RecordingController(), stop_on_collision=False)
    assert result.outcome is EpisodeOutcome.COLLIDED
    assert result.collision_steps == tuple(sorted(result.collision_steps))
    assert len(result.step_clearances) == result.steps_taken
    below = tuple(t + 1 for t, c in enumerate(result.step_clearances) if c < cfg.collision_radius)
    assert below == result.collision_steps


def test_threaded_episodes_match_sequential(small_scenario):
    controller = GoalSeekerController(DynamicsKind.SINGLE_INTEGRATOR)
    seeds = [0, 1, 2, 3]
    seq = run_episodes(small_scenario, controller, seeds, threads=1)
    par = run_episodes(small_scenario, controller, seeds, threads=4)
    assert [r.seed for r in par] == seeds
    for a, b in zip(seq, par):
        assert a.outcome == b.outcome
        np.testing.assert_array_equal(a.ego_states, b.ego_states)


def test_collision_rate_counts_every_failure():
    ok = run_episode(open_scenario(), GoalSeekerController(DynamicsKind.SINGLE_INTEGRATOR))
    stuck = run_episode(open_scenario(), FrozenController())
    assert collision_rate([ok, stuck, stuck, ok]) == 0.5
    with pytest.raises(ValueError):
        collision_rate([])


def test_trajectory_csv_roundtrip(small_scenario, tmp_path):
    result = run_episode(small_scenario.model_copy(update={"max_steps": 10}),
                         GoalSeekerController(DynamicsKind.SINGLE_INTEGRATOR), ConstantVelocityModel())
    path = write_trajectory_csv(result, tmp_path / "traj.csv")
    header = path.read_text().splitlines()[0].split(",")
    assert header[:3] == ["step", "ego_p_x", "ego_p_y"]
    back = read_trajectory_csv(path)
    assert back.kind is DynamicsKind.SINGLE_INTEGRATOR
    np.testing.assert_allclose(back.ego_states, result.ego_states, rtol=1e-8, atol=1e-8)
    np.testing.assert_allclose(back.obstacle_positions, result.obstacle_positions, rtol=1e-8, atol=1e-8)


def test_missing_trajectory_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_trajectory_csv(tmp_path / "nope.csv")
