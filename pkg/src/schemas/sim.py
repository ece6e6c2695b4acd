import math
from enum import Enum
from typing import Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .dynamics import DynamicsKind, DynamicsParams

Vec2 = Tuple[float, float]


class ObstacleState(BaseModel):
    model_config = ConfigDict(frozen=True)

    position: Vec2
    velocity: Vec2
    radius: float = Field(gt=0)
    goal: Vec2
    pref_speed: float = Field(gt=0)

    @model_validator(mode="after")
    def _finite(self):
        values = (*self.position, *self.velocity, *self.goal, self.radius, self.pref_speed)
        if not all(math.isfinite(v) for v in values):
            raise ValueError("obstacle state has non-finite components")
        return self


class OrcaParams(BaseModel):
    time_horizon: float = Field(default=2.0, gt=0)
    neighbor_dist: float = Field(default=5.0, gt=0)
    max_neighbors: int = Field(default=10, ge=0)
    max_speed: float = Field(default=1.5, gt=0)


class PedestrianParams(BaseModel):
    radius: float = Field(default=0.3, gt=0)
    pref_speed: float = Field(default=1.0, gt=0)


class EpisodeOutcome(str, Enum):
    REACHED_GOAL = "reached_goal"
    COLLIDED = "collided"
    FROZEN = "frozen"
    TIMED_OUT = "timed_out"


# every crowd size shares this arena, so density scales with the obstacle count alone
# (600 obstacles sit at 100x the areal density of 6)
BASE_HALF_EXTENT = 10.0


class Scenario(BaseModel):
    arena_half_extent: float = Field(default=BASE_HALF_EXTENT, gt=0)
    obstacle_count: int = Field(default=6, ge=0)
    ego_dynamics_kind: DynamicsKind = DynamicsKind.DUBINS
    ego_start: Vec2 = (-8.0, -8.0)
    ego_goal: Vec2 = (8.0, 8.0)
    dt: float = Field(default=0.1, gt=0)
    max_steps: int = Field(default=400, gt=0)
    seed: int = 0
    collision_radius: float = Field(default=0.5, gt=0)
    goal_tolerance: float = Field(default=0.3, gt=0)
    spawn_clearance_margin: float = Field(default=0.5, ge=0)
    spawn_budget: int = Field(default=200_000, gt=0)
    pedestrian: PedestrianParams = PedestrianParams()
    orca: OrcaParams = OrcaParams()
    dynamics: DynamicsParams = DynamicsParams()

    @model_validator(mode="after")
    def _distinct_endpoints(self):
        if tuple(self.ego_start) == tuple(self.ego_goal):
            raise ValueError("ego_start and ego_goal must differ")
        return self

    def with_seed(self, seed: int) -> "Scenario":
        """Copy with a fresh seed and start/goal drawn on opposite sides of the arena"""
        rng = np.random.default_rng([seed, 7])
        angle = rng.uniform(-math.pi, math.pi)
        reach = 0.8 * self.arena_half_extent
        start = (reach * math.cos(angle), reach * math.sin(angle))
        goal = (-start[0], -start[1])
        return self.model_copy(update={"seed": seed, "ego_start": start, "ego_goal": goal})
