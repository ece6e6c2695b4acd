"""
Optimal reciprocal collision avoidance for the pedestrian crowd.

Each agent turns every neighbor into a half-plane constraint on its own
velocity (taking half the responsibility for the avoidance), then picks the
admissible velocity closest to its preferred velocity with an incremental 2D
linear program. When the constraints leave no admissible velocity, a 3D
program finds the velocity that violates them least.
A line (point p, unit direction d) admits v iff det(d, p - v) <= 0.
"""
import logging
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from sklearn.neighbors import KDTree

from ..schemas.sim import ObstacleState, OrcaParams
from ..telemetry import telemetry

logger = logging.getLogger(__name__)

RVO_EPSILON = 1e-5
DEGENERATE_DIST_SQ = 1e-18
# exactly head-on pairs rotate the constraint normal by this much (counterclockwise)
HEAD_ON_ROTATION = 1e-6

Vec = Tuple[float, float]


@dataclass(frozen=True)
class OrcaLine:
    point: Vec
    direction: Vec


@dataclass(frozen=True)
class Crowd:
    """Struct-of-arrays view of the pedestrians; rows are obstacles"""

    positions: np.ndarray
    velocities: np.ndarray
    radii: np.ndarray
    goals: np.ndarray
    pref_speeds: np.ndarray

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def empty(cls) -> "Crowd":
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), np.zeros((0, 2)), np.zeros(0))

    @classmethod
    def from_states(cls, states: Sequence[ObstacleState]) -> "Crowd":
        if not states:
            return cls.empty()
        return cls(
            positions=np.array([s.position for s in states], dtype=np.float64),
            velocities=np.array([s.velocity for s in states], dtype=np.float64),
            radii=np.array([s.radius for s in states], dtype=np.float64),
            goals=np.array([s.goal for s in states], dtype=np.float64),
            pref_speeds=np.array([s.pref_speed for s in states], dtype=np.float64),
        )

    def to_states(self) -> List[ObstacleState]:
        return [
            ObstacleState(position=tuple(self.positions[i]), velocity=tuple(self.velocities[i]),
                          radius=float(self.radii[i]), goal=tuple(self.goals[i]),
                          pref_speed=float(self.pref_speeds[i]))
            for i in range(len(self))
        ]

    def with_goals(self, goals: np.ndarray) -> "Crowd":
        return replace(self, goals=goals)

    def preferred_velocities(self, dt: float) -> np.ndarray:
        """Toward the goal at preferred speed, shortened so the goal is not overshot"""
        offset = self.goals - self.positions
        dist = np.linalg.norm(offset, axis=1)
        speed = np.minimum(self.pref_speeds, dist / dt)
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(dist[:, None] > 0, offset / dist[:, None], 0.0)
        return unit * speed[:, None]


def _det(a: Vec, b: Vec) -> float:
    return a[0] * b[1] - a[1] * b[0]


def _dot(a: Vec, b: Vec) -> float:
    return a[0] * b[0] + a[1] * b[1]


def _sub(a: Vec, b: Vec) -> Vec:
    return (a[0] - b[0], a[1] - b[1])


def _add(a: Vec, b: Vec) -> Vec:
    return (a[0] + b[0], a[1] + b[1])


def _scale(a: Vec, s: float) -> Vec:
    return (a[0] * s, a[1] * s)


def _rotate(a: Vec, angle: float) -> Vec:
    c, s = math.cos(angle), math.sin(angle)
    return (c * a[0] - s * a[1], s * a[0] + c * a[1])


def line_violation(line: OrcaLine, velocity: Vec) -> float:
    """Signed distance of ``velocity`` into the forbidden side (<= 0 when admitted)"""
    return _det(line.direction, _sub(line.point, velocity))


def orca_lines(crowd: Crowd, i: int, neighbors: Sequence[int], params: OrcaParams,
               dt: float) -> Tuple[List[OrcaLine], int]:
    """Half-plane constraints for agent ``i``; also returns the count of skipped degenerate pairs"""
    lines: List[OrcaLine] = []
    faults = 0
    inv_tau = 1.0 / params.time_horizon
    pos_i = (float(crowd.positions[i, 0]), float(crowd.positions[i, 1]))
    vel_i = (float(crowd.velocities[i, 0]), float(crowd.velocities[i, 1]))
    r_i = float(crowd.radii[i])

    for j in neighbors:
        rel_pos = (float(crowd.positions[j, 0]) - pos_i[0], float(crowd.positions[j, 1]) - pos_i[1])
        rel_vel = (vel_i[0] - float(crowd.velocities[j, 0]), vel_i[1] - float(crowd.velocities[j, 1]))
        dist_sq = _dot(rel_pos, rel_pos)
        if dist_sq <= DEGENERATE_DIST_SQ:
            faults += 1
            continue
        combined_radius = r_i + float(crowd.radii[j])
        # same turn for every agent, so a collinear pair leaves point-symmetrically
        tilt = HEAD_ON_ROTATION if _det(rel_pos, rel_vel) == 0.0 else 0.0
        combined_radius_sq = combined_radius * combined_radius

        if dist_sq > combined_radius_sq:
            # no collision yet
            w = _sub(rel_vel, _scale(rel_pos, inv_tau))
            w_length_sq = _dot(w, w)
            dot1 = _dot(w, rel_pos)
            if dot1 < 0.0 and dot1 * dot1 > combined_radius_sq * w_length_sq:
                # project on the cut-off circle
                w_length = math.sqrt(w_length_sq)
                unit_w = _rotate(_scale(w, 1.0 / w_length), tilt)
                direction = (unit_w[1], -unit_w[0])
                u = _scale(unit_w, combined_radius * inv_tau - w_length)
            else:
                # project on a leg; collinear w takes the right leg
                leg = math.sqrt(dist_sq - combined_radius_sq)
                if _det(rel_pos, w) > 0.0:
                    direction = ((rel_pos[0] * leg - rel_pos[1] * combined_radius) / dist_sq,
                                 (rel_pos[0] * combined_radius + rel_pos[1] * leg) / dist_sq)
                else:
                    direction = (-(rel_pos[0] * leg + rel_pos[1] * combined_radius) / dist_sq,
                                 -(-rel_pos[0] * combined_radius + rel_pos[1] * leg) / dist_sq)
                direction = _rotate(direction, tilt)
                dot2 = _dot(rel_vel, direction)
                u = _sub(_scale(direction, dot2), rel_vel)
        else:
            # already overlapping: leave within one step
            inv_dt = 1.0 / dt
            w = _sub(rel_vel, _scale(rel_pos, inv_dt))
            w_length = math.sqrt(_dot(w, w))
            unit_w = _rotate(_scale(w, 1.0 / w_length) if w_length > 0 else (1.0, 0.0), tilt)
            direction = (unit_w[1], -unit_w[0])
            u = _scale(unit_w, combined_radius * inv_dt - w_length)

        lines.append(OrcaLine(point=_add(vel_i, _scale(u, 0.5)), direction=direction))
    return lines, faults


def _linear_program1(lines: Sequence[OrcaLine], line_no: int, radius: float, opt: Vec,
                     direction_opt: bool) -> Optional[Vec]:
    line = lines[line_no]
    dot = _dot(line.point, line.direction)
    discriminant = dot * dot + radius * radius - _dot(line.point, line.point)
    if discriminant < 0.0:
        # the speed circle misses this line
        return None
    sqrt_disc = math.sqrt(discriminant)
    t_left = -dot - sqrt_disc
    t_right = -dot + sqrt_disc

    for i in range(line_no):
        denominator = _det(line.direction, lines[i].direction)
        numerator = _det(lines[i].direction, _sub(line.point, lines[i].point))
        if abs(denominator) <= RVO_EPSILON:
            if numerator < 0.0:
                return None
            continue
        t = numerator / denominator
        if denominator >= 0.0:
            t_right = min(t_right, t)
        else:
            t_left = max(t_left, t)
        if t_left > t_right:
            return None

    if direction_opt:
        t = t_right if _dot(opt, line.direction) > 0.0 else t_left
    else:
        t = _dot(line.direction, _sub(opt, line.point))
        t = min(max(t, t_left), t_right)
    return _add(line.point, _scale(line.direction, t))


def _linear_program2(lines: Sequence[OrcaLine], radius: float, opt: Vec,
                     direction_opt: bool) -> Tuple[int, Vec]:
    if direction_opt:
        result = _scale(opt, radius)
    elif _dot(opt, opt) > radius * radius:
        result = _scale(opt, radius / math.sqrt(_dot(opt, opt)))
    else:
        result = opt

    for i, line in enumerate(lines):
        if line_violation(line, result) > 0.0:
            candidate = _linear_program1(lines, i, radius, opt, direction_opt)
            if candidate is None:
                return i, result
            result = candidate
    return len(lines), result


def _linear_program3(lines: Sequence[OrcaLine], begin_line: int, radius: float, result: Vec) -> Vec:
    distance = 0.0
    for i in range(begin_line, len(lines)):
        if line_violation(lines[i], result) > distance:
            projected: List[OrcaLine] = []
            for j in range(i):
                denominator = _det(lines[i].direction, lines[j].direction)
                if abs(denominator) <= RVO_EPSILON:
                    if _dot(lines[i].direction, lines[j].direction) > 0.0:
                        continue
                    point = _scale(_add(lines[i].point, lines[j].point), 0.5)
                else:
                    t = _det(lines[j].direction, _sub(lines[i].point, lines[j].point)) / denominator
                    point = _add(lines[i].point, _scale(lines[i].direction, t))
                diff = _sub(lines[j].direction, lines[i].direction)
                norm = math.sqrt(_dot(diff, diff))
                projected.append(OrcaLine(point=point, direction=_scale(diff, 1.0 / norm)))

            previous = result
            fail, candidate = _linear_program2(projected, radius,
                                               (-lines[i].direction[1], lines[i].direction[0]), True)
            # a failure here is only floating-point noise; keep the old result
            result = candidate if fail >= len(projected) else previous
            distance = line_violation(lines[i], result)
    return result


def solve_velocity(lines: Sequence[OrcaLine], preferred: Vec, max_speed: float) -> Tuple[Vec, bool]:
    """Admissible velocity closest to ``preferred``; the flag says whether the 2D program was feasible"""
    fail, result = _linear_program2(lines, max_speed, preferred, False)
    if fail < len(lines):
        return _linear_program3(lines, fail, max_speed, result), False
    return result, True


def neighbor_lists(positions: np.ndarray, params: OrcaParams) -> List[List[int]]:
    """Indices of each agent's nearest neighbors within range, nearest first, self excluded"""
    n = len(positions)
    if n < 2 or params.max_neighbors == 0:
        return [[] for _ in range(n)]
    tree = KDTree(positions)
    indices, distances = tree.query_radius(positions, r=params.neighbor_dist,
                                           return_distance=True, sort_results=True)
    lists = []
    for i in range(n):
        # stable tie order: by distance, then by index
        order = np.lexsort((indices[i], distances[i]))
        ordered = [int(j) for j in indices[i][order] if j != i]
        lists.append(ordered[:params.max_neighbors])
    return lists


def orca_step(crowd: Crowd, dt: float, params: OrcaParams = OrcaParams()) -> Crowd:
    """Advance every pedestrian one step; the ego robot is not part of the neighbor set"""
    n = len(crowd)
    if n == 0:
        return crowd
    preferred = crowd.preferred_velocities(dt)
    neighbors = neighbor_lists(crowd.positions, params)

    new_velocities = np.empty_like(crowd.velocities)
    total_faults = 0
    for i in range(n):
        lines, faults = orca_lines(crowd, i, neighbors[i], params, dt)
        total_faults += faults
        velocity, _ = solve_velocity(lines, (float(preferred[i, 0]), float(preferred[i, 1])),
                                     params.max_speed)
        new_velocities[i] = velocity

    if total_faults:
        logger.warning(f"orca_step: {total_faults} coincident neighbor pair(s) skipped; "
                       f"preferred velocity used for those pairs")
        telemetry.record_orca_fault(total_faults)

    return replace(crowd, positions=crowd.positions + new_velocities * dt, velocities=new_velocities)


class OrcaCrowdModel:
    """Pedestrians driven by reciprocal collision avoidance"""

    name = "orca"

    def __init__(self, params: OrcaParams = OrcaParams()):
        self.params = params

    def step(self, crowd: Crowd, dt: float) -> Crowd:
        return orca_step(crowd, dt, self.params)


class ConstantVelocityModel:
    """Debug model: pedestrians keep their current velocity"""

    name = "constant_velocity"

    def step(self, crowd: Crowd, dt: float) -> Crowd:
        return replace(crowd, positions=crowd.positions + crowd.velocities * dt)
