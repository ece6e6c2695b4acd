import numpy as np
import pytest

from src.schemas.sim import OrcaParams
from src.services.orca import ConstantVelocityModel, Crowd, OrcaCrowdModel, neighbor_lists, orca_step, solve_velocity
from src.telemetry import counter_value


def crowd(positions, goals, velocities=None, radius=0.3, speed=1.0) -> Crowd:
    positions = np.asarray(positions, dtype=float)
    n = len(positions)
    return Crowd(positions=positions,
                 velocities=np.zeros((n, 2)) if velocities is None else np.asarray(velocities, dtype=float),
                 radii=np.full(n, radius), goals=np.asarray(goals, dtype=float), pref_speeds=np.full(n, speed))


def test_lone_agent_walks_to_goal_at_preferred_speed():
    c = orca_step(crowd([[0.0, 0.0]], [[5.0, 0.0]]), 0.1)
    np.testing.assert_allclose(c.velocities[0], [1.0, 0.0], atol=1e-9)
    np.testing.assert_allclose(c.positions[0], [0.1, 0.0], atol=1e-9)


def test_preferred_velocity_does_not_overshoot_goal():
    c = crowd([[0.0, 0.0]], [[0.05, 0.0]])
    np.testing.assert_allclose(c.preferred_velocities(0.1)[0], [0.5, 0.0])


def test_empty_crowd_is_returned_unchanged():
    empty = Crowd.empty()
    assert orca_step(empty, 0.1) is empty


def test_speed_never_exceeds_limit():
    c = crowd([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], [[5.0, 5.0], [-5.0, 0.0], [0.0, -5.0]], speed=3.0)
    params = OrcaParams(max_speed=1.5)
    for _ in range(20):
        c = orca_step(c, 0.1, params)
        assert np.all(np.linalg.norm(c.velocities, axis=1) <= 1.5 + 1e-9)


def test_head_on_agents_from_rest_pass_each_other():
    c = crowd([[-3.0, 0.0], [3.0, 0.0]], [[3.0, 0.0], [-3.0, 0.0]])
    closest = np.inf
    for _ in range(400):
        c = orca_step(c, 0.1)
        closest = min(closest, float(np.linalg.norm(c.positions[0] - c.positions[1])))
    assert closest >= 0.6 - 1e-6
    assert c.positions[0, 0] > 0.0 and c.positions[1, 0] < 0.0


def test_head_on_agents_at_speed_keep_clearance():
    c = crowd([[-2.0, 0.0], [2.0, 0.0]], [[8.0, 0.0], [-8.0, 0.0]], velocities=[[1.0, 0.0], [-1.0, 0.0]])
    closest = np.inf
    for _ in range(300):
        c = orca_step(c, 0.1, OrcaParams(time_horizon=2.0))
        closest = min(closest, float(np.linalg.norm(c.positions[0] - c.positions[1])))
    assert closest >= 0.6 - 1e-6


def test_head_on_tie_break_is_point_symmetric():
    c = crowd([[-3.0, 0.0], [3.0, 0.0]], [[3.0, 0.0], [-3.0, 0.0]])
    for _ in range(20):
        c = orca_step(c, 0.1)
        np.testing.assert_allclose(c.positions[1], -c.positions[0], atol=1e-15)
        np.testing.assert_allclose(c.velocities[1], -c.velocities[0], atol=1e-15)
    # each agent sidesteps to its own right
    assert c.velocities[0, 1] < 0.0 < c.velocities[1, 1]


@pytest.mark.parametrize("offset", [0.2, -0.35, 1.0])
def test_mirror_symmetric_pair_stays_mirror_symmetric_up_to_the_tie_break(offset):
    c = crowd([[-2.0, offset], [2.0, offset]], [[2.0, -offset], [-2.0, -offset]],
              velocities=[[0.8, 0.1], [-0.8, 0.1]])
    for _ in range(5):
        c = orca_step(c, 0.1)
        np.testing.assert_allclose(c.positions[1], [-c.positions[0, 0], c.positions[0, 1]], atol=1e-5)
        np.testing.assert_allclose(c.velocities[1], [-c.velocities[0, 0], c.velocities[0, 1]], atol=1e-5)


def test_step_is_deterministic():
    rng = np.random.default_rng(0)
    pos = rng.uniform(-4, 4, size=(8, 2))
    goals = rng.uniform(-4, 4, size=(8, 2))
    a = orca_step(crowd(pos, goals), 0.1)
    b = orca_step(crowd(pos, goals), 0.1)
    np.testing.assert_array_equal(a.positions, b.positions)


def test_coincident_agents_are_counted_as_faults():
    before = counter_value("orca_faults_total")
    c = orca_step(crowd([[1.0, 1.0], [1.0, 1.0]], [[5.0, 1.0], [-5.0, 1.0]]), 0.1)
    assert np.all(np.isfinite(c.positions))
    assert counter_value("orca_faults_total") > before


def test_neighbor_lists_are_nearest_first_and_capped():
    positions = np.array([[0.0, 0.0], [3.0, 0.0], [1.0, 0.0], [10.0, 0.0]])
    lists = neighbor_lists(positions, OrcaParams(neighbor_dist=5.0, max_neighbors=2))
    assert lists[0] == [2, 1]
    assert lists[3] == []
    assert neighbor_lists(positions, OrcaParams(max_neighbors=0)) == [[], [], [], []]


def test_solver_returns_preferred_when_unconstrained():
    velocity, feasible = solve_velocity([], (0.3, -0.4), 1.0)
    assert feasible
    assert velocity == pytest.approx((0.3, -0.4))


def test_solver_clamps_to_speed_disc():
    velocity, _ = solve_velocity([], (3.0, 4.0), 1.0)
    assert velocity == pytest.approx((0.6, 0.8))


def test_model_wrappers():
    c = crowd([[0.0, 0.0]], [[1.0, 0.0]], velocities=[[0.0, 1.0]])
    np.testing.assert_allclose(ConstantVelocityModel().step(c, 0.5).positions[0], [0.0, 0.5])
    np.testing.assert_allclose(OrcaCrowdModel().step(c, 0.1).positions, orca_step(c, 0.1).positions)


def test_states_roundtrip():
    c = crowd([[0.0, 1.0], [2.0, 3.0]], [[1.0, 1.0], [0.0, 0.0]])
    back = Crowd.from_states(c.to_states())
    np.testing.assert_array_equal(back.positions, c.positions)
    assert len(Crowd.from_states([])) == 0
