"""
World simulation: scenario spawning, collision checks, the episode loop and
trajectory recording.

Obstacles never see the ego robot. Each episode owns its state and random
generators, so episodes can run concurrently against shared read-only
controllers.
"""
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ..exceptions import OverDensityError, SimulationError
from ..schemas.dynamics import STATE_LABELS, DynamicsKind, EgoState, control_dim
from ..schemas.inference import ControllerDecision
from ..schemas.sim import EpisodeOutcome, ObstacleState, Scenario
from ..telemetry import telemetry
from ..telemetry_decorators import trace_method
from .ego_dynamics import initial_ego_state, step_batch
from .orca import ConstantVelocityModel, Crowd, OrcaCrowdModel

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.9g"


@dataclass(frozen=True)
class WorldState:
    time_step: int
    ego: EgoState
    crowd: Crowd

    @property
    def obstacles(self) -> List[ObstacleState]:
        return self.crowd.to_states()


@dataclass(frozen=True)
class Observation:
    """
    What a controller sees at one step. Windows are oldest first and end at
    the current step; early in an episode they are shorter than the window.
    ``ego_positions`` carries one row more than the obstacle windows.
    """

    step: int
    ego: EgoState
    goal: np.ndarray
    crowd: Crowd
    ego_positions: np.ndarray
    obstacle_positions: np.ndarray
    obstacle_velocities: np.ndarray
    dt: float
    seed: Tuple[int, ...]

    @property
    def ego_velocity(self) -> np.ndarray:
        """Planar ego velocity from its last displacement; zero on the first step"""
        if len(self.ego_positions) < 2:
            return np.zeros(2)
        return (self.ego_positions[-1] - self.ego_positions[-2]) / self.dt

    def rng(self, salt: int = 0) -> np.random.Generator:
        return np.random.default_rng([*self.seed, salt])


class Controller(Protocol):
    name: str
    kind: Optional[DynamicsKind]

    def decide(self, obs: Observation) -> ControllerDecision:
        ...


class ObstacleModel(Protocol):
    name: str

    def step(self, crowd: Crowd, dt: float) -> Crowd:
        ...


def obstacle_model_for(name: str, scenario: Scenario) -> ObstacleModel:
    if name == "orca":
        return OrcaCrowdModel(scenario.orca)
    if name == "constant_velocity":
        return ConstantVelocityModel()
    raise SimulationError(f"unknown obstacle model {name!r}")


@dataclass(frozen=True)
class EpisodeResult:
    """Recorded episode; row t of every array is the world after t steps"""

    outcome: EpisodeOutcome
    steps_taken: int
    kind: DynamicsKind
    ego_states: np.ndarray
    obstacle_positions: np.ndarray
    obstacle_velocities: np.ndarray
    obstacle_goals: np.ndarray
    obstacle_radii: np.ndarray
    pref_speeds: np.ndarray
    controls: np.ndarray
    collision_steps: Tuple[int, ...] = ()
    # entry t-1 is the closest approach during step t, midpoint included
    step_clearances: Tuple[float, ...] = ()
    candidates_evaluated: int = 0
    leaves_evaluated: int = 0
    seed: int = 0
    traces: Tuple[Tuple[int, object], ...] = ()

    @property
    def ego_trajectory(self) -> List[EgoState]:
        return [EgoState.from_array(self.kind, row) for row in self.ego_states]

    @property
    def obstacle_trajectories(self) -> List[List[ObstacleState]]:
        return [
            Crowd(self.obstacle_positions[t], self.obstacle_velocities[t], self.obstacle_radii,
                  self.obstacle_goals[t], self.pref_speeds).to_states()
            for t in range(len(self.ego_states))
        ]

    @property
    def failed(self) -> bool:
        return self.outcome is not EpisodeOutcome.REACHED_GOAL


def _uniform_in_arena(rng: np.random.Generator, half_extent: float, margin: float, size=None) -> np.ndarray:
    lim = max(half_extent - margin, 0.0)
    shape = (2,) if size is None else (size, 2)
    return rng.uniform(-lim, lim, size=shape)


def spawn_scenario(cfg: Scenario) -> WorldState:
    """
    Place ``cfg.obstacle_count`` pedestrians by seeded rejection sampling.

    Pairwise clearance is twice the pedestrian radius and clearance from the
    ego start is ``collision_radius + spawn_clearance_margin``. Raises
    OverDensityError once ``spawn_budget`` draws are spent.
    """
    rng = np.random.default_rng(cfg.seed)
    radius = cfg.pedestrian.radius
    pair_clearance = 2.0 * radius
    start_clearance = cfg.collision_radius + cfg.spawn_clearance_margin
    start = np.asarray(cfg.ego_start, dtype=np.float64)

    placed = np.empty((cfg.obstacle_count, 2))
    count = 0
    draws = 0
    while count < cfg.obstacle_count:
        if draws >= cfg.spawn_budget:
            raise OverDensityError(cfg.obstacle_count, count, cfg.spawn_budget)
        draws += 1
        candidate = _uniform_in_arena(rng, cfg.arena_half_extent, radius)
        if np.linalg.norm(candidate - start) < start_clearance:
            continue
        if count and np.min(np.linalg.norm(placed[:count] - candidate, axis=1)) < pair_clearance:
            continue
        placed[count] = candidate
        count += 1

    goals = _uniform_in_arena(rng, cfg.arena_half_extent, radius, size=cfg.obstacle_count)
    crowd = Crowd(
        positions=placed,
        velocities=np.zeros((cfg.obstacle_count, 2)),
        radii=np.full(cfg.obstacle_count, radius),
        goals=goals,
        pref_speeds=np.full(cfg.obstacle_count, cfg.pedestrian.pref_speed),
    )
    logger.debug(f"spawn_scenario: placed {count} obstacles in {draws} draws (seed={cfg.seed})")
    ego = initial_ego_state(cfg.ego_dynamics_kind, cfg.ego_start, cfg.ego_goal)
    return WorldState(time_step=0, ego=ego, crowd=crowd)


def min_obstacle_distance(ego_position: np.ndarray, positions: np.ndarray) -> float:
    if len(positions) == 0:
        return math.inf
    return float(np.min(np.linalg.norm(positions - ego_position, axis=1)))


def detect_collision(w: WorldState, collision_radius: float) -> bool:
    return min_obstacle_distance(w.ego.position, w.crowd.positions) < collision_radius


def step_clearance(ego_before: np.ndarray, ego_after: np.ndarray, obs_before: np.ndarray,
                   obs_after: np.ndarray) -> float:
    """Closest ego-obstacle distance over a step: its end and the linearly interpolated midpoint"""
    mid = min_obstacle_distance(0.5 * (ego_before + ego_after), 0.5 * (obs_before + obs_after))
    return min(min_obstacle_distance(ego_after, obs_after), mid)


def resample_goals(crowd: Crowd, rng: np.random.Generator, half_extent: float) -> Crowd:
    """Obstacles that arrived get a fresh random goal so dense scenes keep moving"""
    if len(crowd) == 0:
        return crowd
    arrived = np.linalg.norm(crowd.goals - crowd.positions, axis=1) <= crowd.radii
    if not np.any(arrived):
        return crowd
    goals = crowd.goals.copy()
    margin = float(np.max(crowd.radii))
    goals[arrived] = _uniform_in_arena(rng, half_extent, margin, size=int(arrived.sum()))
    return crowd.with_goals(goals)


def _window(rows: List[np.ndarray], length: int) -> np.ndarray:
    return np.stack(rows[-length:])


@trace_method("run_episode")
def run_episode(cfg: Scenario, controller: Controller, world_model: Optional[ObstacleModel] = None,
                history_window: int = 5, stop_on_collision: bool = True) -> EpisodeResult:
    """
    Step the crowd and the ego until the goal is reached, a collision occurs,
    the controller freezes (or raises) or ``max_steps`` run out.

    With ``stop_on_collision=False`` the episode keeps rolling through
    collisions (used for demonstrations); the outcome is still ``collided``
    if any step collided.
    """
    if controller.kind is not None and controller.kind != cfg.ego_dynamics_kind:
        raise SimulationError(
            f"controller {controller.name} drives {controller.kind.value}, scenario uses "
            f"{cfg.ego_dynamics_kind.value}")
    world_model = world_model or OrcaCrowdModel(cfg.orca)
    kind = cfg.ego_dynamics_kind
    goal = np.asarray(cfg.ego_goal, dtype=np.float64)
    goal_rng = np.random.default_rng([cfg.seed, 11])

    world = spawn_scenario(cfg)
    crowd = world.crowd
    ego = world.ego.array

    ego_rows = [ego]
    pos_rows = [crowd.positions]
    vel_rows = [crowd.velocities]
    goal_rows = [crowd.goals]
    controls: List[np.ndarray] = []
    collision_steps: List[int] = []
    clearances: List[float] = []
    candidates = 0
    leaves = 0
    traces: list = []
    outcome = EpisodeOutcome.TIMED_OUT

    for t in range(cfg.max_steps):
        obs = Observation(
            step=t,
            ego=EgoState.from_array(kind, ego),
            goal=goal,
            crowd=crowd,
            ego_positions=np.stack([r[:2] for r in ego_rows[-(history_window + 1):]]),
            obstacle_positions=_window(pos_rows, history_window),
            obstacle_velocities=_window(vel_rows, history_window),
            dt=cfg.dt,
            seed=(cfg.seed, t),
        )
        started = time.perf_counter()
        try:
            decision = controller.decide(obs)
        except Exception as e:
            logger.error(f"run_episode: controller {controller.name} failed at step {t}: {e}")
            outcome = EpisodeOutcome.FROZEN
            break
        finally:
            telemetry.record_decision_duration(controller.name, time.perf_counter() - started)
        candidates += decision.candidates_evaluated
        leaves += decision.leaves_evaluated
        if decision.trace is not None:
            traces.append((t, decision.trace))
        if decision.frozen:
            logger.debug(f"run_episode: {controller.name} found no feasible control at step {t}")
            outcome = EpisodeOutcome.FROZEN
            break

        u = decision.chosen.array
        next_ego = step_batch(kind, ego[None, :], u[None, :], cfg.dt, cfg.dynamics)[0]
        next_crowd = resample_goals(world_model.step(crowd, cfg.dt), goal_rng, cfg.arena_half_extent)

        clearance = step_clearance(ego[:2], next_ego[:2], crowd.positions, next_crowd.positions)
        collided = clearance < cfg.collision_radius
        clearances.append(clearance)

        ego, crowd = next_ego, next_crowd
        ego_rows.append(ego)
        pos_rows.append(crowd.positions)
        vel_rows.append(crowd.velocities)
        goal_rows.append(crowd.goals)
        controls.append(u)

        if collided:
            collision_steps.append(t + 1)
            if stop_on_collision:
                outcome = EpisodeOutcome.COLLIDED
                break
        if np.linalg.norm(ego[:2] - goal) <= cfg.goal_tolerance:
            outcome = EpisodeOutcome.REACHED_GOAL
            break

    if collision_steps:
        outcome = EpisodeOutcome.COLLIDED

    telemetry.record_episode(controller.name, outcome.value)
    telemetry.record_candidates(controller.name, candidates)
    telemetry.record_leaves(controller.name, leaves)

    n = len(crowd)
    return EpisodeResult(
        outcome=outcome,
        steps_taken=len(controls),
        kind=kind,
        ego_states=np.stack(ego_rows),
        obstacle_positions=np.stack(pos_rows) if n else np.zeros((len(ego_rows), 0, 2)),
        obstacle_velocities=np.stack(vel_rows) if n else np.zeros((len(ego_rows), 0, 2)),
        obstacle_goals=np.stack(goal_rows) if n else np.zeros((len(ego_rows), 0, 2)),
        obstacle_radii=crowd.radii,
        pref_speeds=crowd.pref_speeds,
        controls=np.stack(controls) if controls else np.zeros((0, control_dim(kind))),
        collision_steps=tuple(collision_steps),
        step_clearances=tuple(clearances),
        candidates_evaluated=candidates,
        leaves_evaluated=leaves,
        seed=cfg.seed,
        traces=tuple(traces),
    )


def run_episodes(cfg: Scenario, controller: Controller, seeds: Sequence[int],
                 world_model: Optional[ObstacleModel] = None, threads: int = 1,
                 **kwargs) -> List[EpisodeResult]:
    """One episode per seed (start and goal redrawn per seed); results ordered as ``seeds``"""
    scenarios = [cfg.with_seed(int(s)) for s in seeds]
    if threads <= 1 or len(scenarios) <= 1:
        return [run_episode(s, controller, world_model, **kwargs) for s in scenarios]

    results: Dict[int, EpisodeResult] = {}
    with ThreadPoolExecutor(max_workers=min(threads, len(scenarios))) as executor:
        future_to_index = {
            executor.submit(run_episode, s, controller, world_model, **kwargs): i
            for i, s in enumerate(scenarios)
        }
        for future in as_completed(future_to_index):
            results[future_to_index[future]] = future.result()
    return [results[i] for i in range(len(scenarios))]


def collision_rate(results: Sequence[EpisodeResult]) -> float:
    """Fraction of episodes that did not reach the goal"""
    if not results:
        raise ValueError("collision_rate needs at least one episode")
    return sum(1 for r in results if r.failed) / len(results)


# -- trajectory CSV -------------------------------------------------------------


def trajectory_frame(result: EpisodeResult) -> pd.DataFrame:
    columns: Dict[str, np.ndarray] = {"step": np.arange(len(result.ego_states))}
    for i, label in enumerate(STATE_LABELS[result.kind]):
        columns[f"ego_{label}"] = result.ego_states[:, i]
    for j in range(result.obstacle_positions.shape[1]):
        columns[f"obs{j}_px"] = result.obstacle_positions[:, j, 0]
        columns[f"obs{j}_py"] = result.obstacle_positions[:, j, 1]
        columns[f"obs{j}_vx"] = result.obstacle_velocities[:, j, 0]
        columns[f"obs{j}_vy"] = result.obstacle_velocities[:, j, 1]
    return pd.DataFrame(columns)


def write_trajectory_csv(result: EpisodeResult, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    trajectory_frame(result).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


@dataclass(frozen=True)
class RecordedTrajectory:
    kind: DynamicsKind
    ego_states: np.ndarray
    obstacle_positions: np.ndarray
    obstacle_velocities: np.ndarray


def read_trajectory_csv(path: Union[str, Path]) -> RecordedTrajectory:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"trajectory file not found: {path}")
    frame = pd.read_csv(path)
    ego_cols = tuple(c[len("ego_"):] for c in frame.columns if c.startswith("ego_"))
    matches = [k for k, labels in STATE_LABELS.items() if labels == ego_cols]
    if not matches:
        raise SimulationError(f"{path}: ego columns {ego_cols} match no dynamics kind")
    n_obs = sum(1 for c in frame.columns if c.startswith("obs") and c.endswith("_px"))
    steps = len(frame)
    positions = np.zeros((steps, n_obs, 2))
    velocities = np.zeros((steps, n_obs, 2))
    for j in range(n_obs):
        positions[:, j, 0] = frame[f"obs{j}_px"].to_numpy()
        positions[:, j, 1] = frame[f"obs{j}_py"].to_numpy()
        velocities[:, j, 0] = frame[f"obs{j}_vx"].to_numpy()
        velocities[:, j, 1] = frame[f"obs{j}_vy"].to_numpy()
    ego = frame[[f"ego_{c}" for c in ego_cols]].to_numpy(dtype=np.float64)
    return RecordedTrajectory(matches[0], ego, positions, velocities)
