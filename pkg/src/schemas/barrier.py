import math
from typing import Literal, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..ml.layers import LstmSpec, MlpSpec
from .dynamics import DynamicsKind, state_dim

RELATIVE_STATE_WIDTH = 4


class RelativeState(BaseModel):
    """One obstacle relative to the ego: position offset and velocity difference"""

    model_config = ConfigDict(frozen=True)

    rel_position: Tuple[float, float]
    rel_velocity: Tuple[float, float]

    @model_validator(mode="after")
    def _finite(self):
        if not all(math.isfinite(v) for v in (*self.rel_position, *self.rel_velocity)):
            raise ValueError("relative state has non-finite components")
        return self

    @classmethod
    def from_array(cls, values) -> "RelativeState":
        v = np.asarray(values, dtype=np.float64).reshape(-1)
        return cls(rel_position=(float(v[0]), float(v[1])), rel_velocity=(float(v[2]), float(v[3])))

    @property
    def array(self) -> np.ndarray:
        return np.asarray((*self.rel_position, *self.rel_velocity), dtype=np.float64)


class ObstacleHistory(BaseModel):
    """Oldest-first window of relative states for one obstacle"""

    model_config = ConfigDict(frozen=True)

    steps: Tuple[RelativeState, ...] = Field(min_length=1)

    @property
    def k(self) -> int:
        return len(self.steps)

    @property
    def array(self) -> np.ndarray:
        return np.stack([s.array for s in self.steps])

    @classmethod
    def from_array(cls, window) -> "ObstacleHistory":
        window = np.asarray(window, dtype=np.float64)
        return cls(steps=tuple(RelativeState.from_array(row) for row in window))

    @classmethod
    def padded(cls, observed, k: int) -> "ObstacleHistory":
        """Fill a short window by repeating its first observed state"""
        observed = list(observed)
        if not observed:
            raise ValueError("cannot pad an empty history")
        if len(observed) >= k:
            return cls(steps=tuple(observed[-k:]))
        return cls(steps=tuple([observed[0]] * (k - len(observed)) + observed))


class BarrierArch(BaseModel):
    """Widths of the sequential barrier network"""

    model_config = ConfigDict(frozen=True)

    history_length: int = Field(default=5, ge=1)
    lstm_hidden: int = Field(default=64, ge=1)
    ego_hidden: Tuple[int, ...] = (64, 64)
    head_hidden: Tuple[int, ...] = (128, 128)

    def lstm_spec(self) -> LstmSpec:
        return LstmSpec(input_width=RELATIVE_STATE_WIDTH, hidden_width=self.lstm_hidden)

    def ego_spec(self, kind: DynamicsKind) -> MlpSpec:
        return MlpSpec(widths=(state_dim(kind), *self.ego_hidden))

    def head_spec(self) -> MlpSpec:
        return MlpSpec(widths=(self.lstm_hidden + self.ego_hidden[-1], *self.head_hidden, 1))


class NonSeqArch(BaseModel):
    """Widths of the pooled (non-sequential) barrier network"""

    model_config = ConfigDict(frozen=True)

    obstacle_hidden: Tuple[int, ...] = (64, 64)
    ego_hidden: Tuple[int, ...] = (64, 64)
    head_hidden: Tuple[int, ...] = (128, 128)

    def obstacle_spec(self) -> MlpSpec:
        return MlpSpec(widths=(RELATIVE_STATE_WIDTH, *self.obstacle_hidden))

    def ego_spec(self, kind: DynamicsKind) -> MlpSpec:
        return MlpSpec(widths=(state_dim(kind), *self.ego_hidden))

    def head_spec(self) -> MlpSpec:
        return MlpSpec(widths=(self.obstacle_hidden[-1] + self.ego_hidden[-1], *self.head_hidden, 1))


class TrainConfig(BaseModel):
    iterations: int = Field(default=2000, ge=0)
    batch_size: int = Field(default=256, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0)
    gamma: float = Field(default=1e-2, gt=0)
    kappa: float = Field(default=0.1, gt=0)
    seed: int = 0
    log_every: int = Field(default=200, ge=1)


class RefineConfig(BaseModel):
    theta: float = Field(default=0.05, gt=0)
    samples_per_seed: int = Field(default=100, ge=0)
    jitter_sigma: float = Field(default=0.2, ge=0)
    max_seeds: int = Field(default=1000, ge=1)
    max_rounds: int = Field(default=10, ge=0)
    tolerance: float = Field(default=1e-3, gt=0)
    iterations_per_round: int = Field(default=2000, ge=0)
    successor_rule: Literal["random", "best_of_n"] = "random"
    best_of_n: int = Field(default=16, ge=1)
    seed: int = 0


class CollectionConfig(BaseModel):
    n_trajectories: int = Field(default=100, ge=0)
    history_length: int = Field(default=5, ge=1)
    sensing_range: float = Field(default=5.0, gt=0)
    label_horizon: int = Field(default=5, ge=0)
    epsilon_random: float = Field(default=0.3, ge=0, le=1)
    nominal_samples: int = Field(default=16, ge=1)
    stop_on_collision: bool = False
    seed: int = 0
