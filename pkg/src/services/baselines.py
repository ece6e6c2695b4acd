"""
Comparison controllers built on an artificial potential field.

    U(s)  = U_att(s) + sum_obstacles U_rep(s)
    U_att = 0.5 * zeta * |s - goal|
    U_rep = 0.5 * eta * (1/d - 1/Q*)^2   for d <= Q*, else 0

Potentials are evaluated against obstacle positions predicted one step (or,
for S-MPC, H steps) ahead by constant-velocity extrapolation unless a
predictor is supplied.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from ..schemas.baselines import GpfmConfig, PotentialFieldParams, SmpcConfig, SpfmConfig
from ..schemas.dynamics import Control, ControlBounds, DynamicsKind, DynamicsParams, EgoState, wrap_angle
from ..schemas.inference import ControllerDecision
from .ego_dynamics import Stepper, TrueDynamics, sample_control_array
from .simulation import Observation

logger = logging.getLogger(__name__)

# salts for Observation.rng so controllers sharing a step draw reproducible streams
SPFM_SALT = 1
SMPC_SALT = 2
EPSILON_SALT = 3

ObstaclePredictor = Callable[[Observation], np.ndarray]


def constant_velocity_next(obs: Observation) -> np.ndarray:
    return obs.crowd.positions + obs.crowd.velocities * obs.dt


def potential_batch(points: np.ndarray, goal: np.ndarray, obstacles: np.ndarray,
                    p: PotentialFieldParams) -> np.ndarray:
    """
    Potential at each of ``points`` (n, 2). ``obstacles`` is (m, 2) shared by
    every point or (n, m, 2) per point; ``goal`` is (2,) or (n, 2).
    """
    points = np.atleast_2d(points)
    attractive = 0.5 * p.zeta * np.linalg.norm(points - goal, axis=-1)
    if obstacles.size == 0:
        return attractive
    if obstacles.ndim == 2:
        obstacles = obstacles[None, :, :]
    d = np.linalg.norm(points[:, None, :] - obstacles, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        rep = 0.5 * p.eta * (1.0 / d - 1.0 / p.influence_distance) ** 2
    rep = np.where(d <= p.influence_distance, np.minimum(np.nan_to_num(rep, nan=p.repulsive_cap,
                                                                       posinf=p.repulsive_cap),
                                                         p.repulsive_cap), 0.0)
    return attractive + rep.sum(axis=-1)


def potential(s, goal, obstacles_next, p: PotentialFieldParams = PotentialFieldParams()) -> float:
    obstacles = np.asarray(obstacles_next, dtype=np.float64).reshape(-1, 2)
    return float(potential_batch(np.asarray(s, dtype=np.float64)[None, :],
                                 np.asarray(goal, dtype=np.float64), obstacles, p)[0])


def potential_gradient(s: np.ndarray, goal: np.ndarray, obstacles: np.ndarray, p: PotentialFieldParams,
                       step: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of the potential at ``s``"""
    s = np.asarray(s, dtype=np.float64)
    points = np.array([s + [step, 0.0], s - [step, 0.0], s + [0.0, step], s - [0.0, step]])
    u = potential_batch(points, goal, obstacles, p)
    return np.array([(u[0] - u[1]) / (2 * step), (u[2] - u[3]) / (2 * step)])


# -- S-PFM ----------------------------------------------------------------------


def spfm_batch(stepper: Stepper, bounds: ControlBounds, states: np.ndarray, goals: np.ndarray,
               obstacles_next: np.ndarray, samples: int, rng: np.random.Generator,
               p: PotentialFieldParams) -> np.ndarray:
    """
    Sampling potential-field decision for every row of ``states``:
    ``samples`` uniform candidates each, one step through ``stepper``, the
    candidate with the lowest potential wins (lowest index on ties).
    ``obstacles_next`` is (m, 2) shared or (n, m, 2).
    """
    n = len(states)
    width = len(bounds.lower)
    candidates = sample_control_array(bounds, n * samples, rng).reshape(n, samples, width)
    successors = stepper.step(np.repeat(states, samples, axis=0), candidates.reshape(n * samples, width))
    goals = np.broadcast_to(goals, (n, 2))
    obstacles = obstacles_next if obstacles_next.ndim == 2 else np.repeat(obstacles_next, samples, axis=0)
    scores = potential_batch(successors[:, :2], np.repeat(goals, samples, axis=0), obstacles, p)
    best = np.argmin(scores.reshape(n, samples), axis=1)
    return candidates[np.arange(n), best]


def spfm_control(x: EgoState, obstacles_next: np.ndarray, goal, p: PotentialFieldParams,
                 bounds: ControlBounds, l: int, stepper: Stepper, rng) -> Control:
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    chosen = spfm_batch(stepper, bounds, x.array[None, :], np.asarray(goal, dtype=np.float64),
                        np.asarray(obstacles_next, dtype=np.float64).reshape(-1, 2), l, rng, p)
    return Control.from_array(x.kind, chosen[0])


def spfm_policy(stepper: Stepper, bounds: ControlBounds, p: PotentialFieldParams, samples: int, dt: float):
    """
    S-PFM over stored (x, window) samples, used as the refinement nominal.
    The window's latest relative state locates the obstacle, which moves on
    at constant velocity.
    """

    def policy(x: np.ndarray, h: np.ndarray, goals: np.ndarray, ego_vel: np.ndarray,
               rng: np.random.Generator) -> np.ndarray:
        obstacles = x[:, None, :2] + h[:, -1:, :2]
        velocities = h[:, -1:, 2:] + ego_vel[:, None, :]
        return spfm_batch(stepper, bounds, x, goals, obstacles + velocities * dt, samples, rng, p)

    return policy


class SpfmController:
    name = "spfm"

    def __init__(self, kind: DynamicsKind, stepper: Stepper, bounds: Optional[ControlBounds] = None,
                 params: PotentialFieldParams = PotentialFieldParams(), cfg: SpfmConfig = SpfmConfig(),
                 predictor: ObstaclePredictor = constant_velocity_next):
        self.kind = kind
        self.stepper = stepper
        self.bounds = bounds or ControlBounds.default_for(kind)
        self.params = params
        self.cfg = cfg
        self.predictor = predictor

    def decide(self, obs: Observation) -> ControllerDecision:
        chosen = spfm_control(obs.ego, self.predictor(obs), obs.goal, self.params, self.bounds,
                              self.cfg.samples, self.stepper, obs.rng(SPFM_SALT))
        return ControllerDecision(chosen=chosen, candidates_evaluated=self.cfg.samples,
                                  feasible_count=self.cfg.samples)


# -- direction tracking (G-PFM and the goal seeker) ---------------------------


def track_direction(kind: DynamicsKind, state: np.ndarray, direction: np.ndarray, speed: float,
                    bounds: ControlBounds, cfg: GpfmConfig = GpfmConfig(),
                    dyn: DynamicsParams = DynamicsParams()) -> np.ndarray:
    """
    Control that moves the ego along ``direction`` at ``speed``.

    Holonomic models command the planar velocity (single integrator) or
    accelerate toward it (double integrator). Dubins and bicycle steer on
    the heading error with gain ``heading_gain`` and track
    speed * max(cos(error), 0).
    """
    norm = float(np.linalg.norm(direction))
    if norm <= cfg.plateau_tolerance or speed <= 0:
        return bounds.clip(np.zeros(len(bounds.lower)))
    unit = direction / norm

    if kind is DynamicsKind.SINGLE_INTEGRATOR:
        u = unit * speed
        # shrink rather than clip so the direction survives
        with np.errstate(divide="ignore", invalid="ignore"):
            limits = np.where(u > 0, bounds.high / u, np.where(u < 0, bounds.low / u, np.inf))
        return u * min(1.0, float(np.min(limits)))

    if kind is DynamicsKind.DOUBLE_INTEGRATOR:
        return bounds.clip(cfg.speed_gain * (unit * speed - state[2:4]))

    heading = state[3] if kind is DynamicsKind.DUBINS else state[2]
    error = float(wrap_angle(math.atan2(unit[1], unit[0]) - heading))
    target_speed = speed * max(math.cos(error), 0.0)
    if kind is DynamicsKind.DUBINS:
        u = np.array([cfg.speed_gain * (target_speed - state[2]), cfg.heading_gain * error])
    else:
        steer = float(np.clip(cfg.heading_gain * error, -dyn.steer_limit, dyn.steer_limit))
        u = np.array([target_speed, cfg.heading_gain * (steer - state[3])])
    return bounds.clip(u)


def gpfm_control(x: EgoState, obstacles_next: np.ndarray, goal, p: PotentialFieldParams,
                 cfg: GpfmConfig, bounds: ControlBounds, dyn: DynamicsParams = DynamicsParams()) -> Control:
    """Follow -grad U; speed scales with the gradient relative to the pure attractive pull"""
    goal = np.asarray(goal, dtype=np.float64)
    obstacles = np.asarray(obstacles_next, dtype=np.float64).reshape(-1, 2)
    descent = -potential_gradient(x.position, goal, obstacles, p, cfg.gradient_step)
    strength = float(np.linalg.norm(descent)) / (0.5 * p.zeta)
    speed = cfg.cruise_speed * min(1.0, strength)
    return Control.from_array(x.kind, track_direction(x.kind, x.array, descent, speed, bounds, cfg, dyn))


class GpfmController:
    name = "gpfm"

    def __init__(self, kind: DynamicsKind, bounds: Optional[ControlBounds] = None,
                 params: PotentialFieldParams = PotentialFieldParams(), cfg: GpfmConfig = GpfmConfig(),
                 dyn: DynamicsParams = DynamicsParams(),
                 predictor: ObstaclePredictor = constant_velocity_next):
        self.kind = kind
        self.bounds = bounds or ControlBounds.default_for(kind)
        self.params = params
        self.cfg = cfg
        self.dyn = dyn
        self.predictor = predictor

    def decide(self, obs: Observation) -> ControllerDecision:
        chosen = gpfm_control(obs.ego, self.predictor(obs), obs.goal, self.params, self.cfg, self.bounds,
                              self.dyn)
        return ControllerDecision(chosen=chosen, candidates_evaluated=1, feasible_count=1)


def goal_seeking_control(x: EgoState, goal, bounds: ControlBounds, cfg: GpfmConfig = GpfmConfig(),
                         dyn: DynamicsParams = DynamicsParams(), slowdown_radius: float = 1.0) -> Control:
    offset = np.asarray(goal, dtype=np.float64) - x.position
    speed = cfg.cruise_speed * min(1.0, float(np.linalg.norm(offset)) / slowdown_radius)
    return Control.from_array(x.kind, track_direction(x.kind, x.array, offset, speed, bounds, cfg, dyn))


class GoalSeekerController:
    """Straight-line goal seeking that ignores obstacles"""

    name = "goal-seeker"

    def __init__(self, kind: DynamicsKind, bounds: Optional[ControlBounds] = None,
                 cfg: GpfmConfig = GpfmConfig(), dyn: DynamicsParams = DynamicsParams()):
        self.kind = kind
        self.bounds = bounds or ControlBounds.default_for(kind)
        self.cfg = cfg
        self.dyn = dyn

    def decide(self, obs: Observation) -> ControllerDecision:
        chosen = goal_seeking_control(obs.ego, obs.goal, self.bounds, self.cfg, self.dyn)
        return ControllerDecision(chosen=chosen, candidates_evaluated=1, feasible_count=1)


# -- S-MPC ----------------------------------------------------------------------


@dataclass(frozen=True)
class SmpcTree:
    """
    Expanded tree, level by level. ``controls[l]`` and ``states[l + 1]`` hold
    the S^(l+1) children in breadth-first order: the children of node i at
    level l are rows i*S .. i*S + S - 1.
    """

    controls: List[np.ndarray]
    states: List[np.ndarray]
    leaf_scores: np.ndarray
    best_leaf: int
    first_action: np.ndarray

    @property
    def leaf_count(self) -> int:
        return len(self.leaf_scores)


def nominal_sigma(cfg: SmpcConfig, bounds: ControlBounds) -> np.ndarray:
    if cfg.nominal_sigma is not None:
        return np.asarray(cfg.nominal_sigma, dtype=np.float64)
    return cfg.sigma_fraction * bounds.half_width


def smpc_plan(x: EgoState, obstacle_positions: np.ndarray, obstacle_velocities: np.ndarray, goal,
              dt: float, cfg: SmpcConfig, p: PotentialFieldParams, stepper: Stepper, bounds: ControlBounds,
              root_rng: np.random.Generator, tree_rng: np.random.Generator) -> SmpcTree:
    """
    Depth-H sampling tree. Each node draws ``samples_per_step`` Gaussian
    perturbations of its own S-PFM nominal control (potential against
    obstacles extrapolated to the child's time); leaves are scored by the
    potential with obstacles extrapolated H steps.
    """
    goal = np.asarray(goal, dtype=np.float64)
    sigma = nominal_sigma(cfg, bounds)
    s = cfg.samples_per_step
    width = len(bounds.lower)

    states = [x.array[None, :]]
    controls: List[np.ndarray] = []
    for level in range(cfg.horizon):
        parents = states[-1]
        obstacles_next = obstacle_positions + obstacle_velocities * dt * (level + 1)
        rng = root_rng if level == 0 else tree_rng
        nominal = spfm_batch(stepper, bounds, parents, goal, obstacles_next, cfg.nominal_samples, rng, p)
        noise = tree_rng.normal(size=(len(parents), s, width)) * sigma
        children = bounds.clip(nominal[:, None, :] + noise).reshape(len(parents) * s, width)
        controls.append(children)
        states.append(stepper.step(np.repeat(parents, s, axis=0), children))

    leaves = states[-1]
    obstacles_final = obstacle_positions + obstacle_velocities * dt * cfg.horizon
    scores = potential_batch(leaves[:, :2], goal, obstacles_final, p)
    best = int(np.argmin(scores))
    root_child = best // s ** (cfg.horizon - 1)
    return SmpcTree(controls, states, scores, best, controls[0][root_child])


def smpc_control(x: EgoState, obstacle_positions: np.ndarray, obstacle_velocities: np.ndarray, goal, dt: float,
                 cfg: SmpcConfig, p: PotentialFieldParams, stepper: Stepper, bounds: ControlBounds,
                 seed: int = 0) -> Control:
    root_rng, tree_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    tree = smpc_plan(x, np.asarray(obstacle_positions, dtype=np.float64).reshape(-1, 2),
                     np.asarray(obstacle_velocities, dtype=np.float64).reshape(-1, 2), goal, dt, cfg, p, stepper,
                     bounds, root_rng, tree_rng)
    return Control.from_array(x.kind, tree.first_action)


class SmpcController:
    def __init__(self, kind: DynamicsKind, stepper: Stepper, bounds: Optional[ControlBounds] = None,
                 params: PotentialFieldParams = PotentialFieldParams(), cfg: SmpcConfig = SmpcConfig()):
        self.kind = kind
        self.stepper = stepper
        self.bounds = bounds or ControlBounds.default_for(kind)
        self.params = params
        self.cfg = cfg
        self.name = "smpc-true" if isinstance(stepper, TrueDynamics) else "smpc"

    def decide(self, obs: Observation) -> ControllerDecision:
        tree = smpc_plan(obs.ego, obs.crowd.positions, obs.crowd.velocities, obs.goal, obs.dt, self.cfg,
                         self.params, self.stepper, self.bounds, obs.rng(SPFM_SALT), obs.rng(SMPC_SALT))
        sampled = sum(len(c) for c in tree.controls)
        return ControllerDecision(chosen=Control.from_array(self.kind, tree.first_action),
                                  candidates_evaluated=sampled, feasible_count=sampled,
                                  leaves_evaluated=tree.leaf_count)
