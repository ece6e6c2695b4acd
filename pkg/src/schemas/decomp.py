from enum import Enum
from typing import List

from pydantic import BaseModel, Field, field_validator


class PredictorKind(str, Enum):
    COSM = "cosm"
    CSM = "csm"
    ICSM = "icsm"


class PredictorTrainConfig(BaseModel):
    hidden: int = Field(default=64, ge=1)
    iterations: int = Field(default=1500, ge=0)
    batch_size: int = Field(default=128, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0)
    validation_fraction: float = Field(default=0.1, gt=0, lt=1)
    seed: int = 0
    log_every: int = Field(default=250, ge=1)


class DecompConfig(BaseModel):
    train_density: int = Field(default=6, ge=1)
    densities: List[int] = [6, 12, 24, 48]
    history_length: int = Field(default=5, ge=1)
    n_rollouts: int = Field(default=20, ge=1)
    rollout_steps: int = Field(default=60, ge=2)
    eval_episodes: int = Field(default=5, ge=1)
    quantile: float = Field(default=0.95, gt=0, le=1)
    seeds: List[int] = [0]
    train: PredictorTrainConfig = PredictorTrainConfig()

    @field_validator("densities", "seeds", mode="before")
    @classmethod
    def _as_list(cls, value):
        return value if isinstance(value, (list, tuple)) else [value]


class DecompRow(BaseModel):
    kind: PredictorKind
    density: int
    seed: int = 0
    mean_l2: float = Field(ge=0)
    mean_maxnorm: float = Field(ge=0)
    eps95: float = Field(ge=0)


class DecompEvalReport(BaseModel):
    densities: List[int]
    rows: List[DecompRow]

    def error(self, kind: PredictorKind, density: int, metric: str = "mean_l2") -> float:
        values = [getattr(r, metric) for r in self.rows if r.kind == kind and r.density == density]
        if not values:
            raise KeyError(f"no {kind.value} row at density {density}")
        return sum(values) / len(values)
