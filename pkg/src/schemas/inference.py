from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .dynamics import Control


class AggregationConfig(BaseModel):
    clip: float = Field(default=0.5, gt=0, le=1)


class InferenceConfig(BaseModel):
    candidates: int = Field(default=64, ge=1)
    sensing_range: float = Field(default=5.0, gt=0)
    inject_nominal: bool = False
    seed: int = 0


class EnsembleConfig(BaseModel):
    variance_threshold: float = Field(default=0.05, ge=0)
    mode: Literal["mean", "all"] = "mean"


@dataclass(frozen=True)
class DecisionTrace:
    """Everything a decision looked at; rows are candidates, columns of barrier_values are obstacles"""

    controls: np.ndarray
    scores: np.ndarray
    barrier_values: np.ndarray
    aggregated: np.ndarray
    chosen_index: int


class ControllerDecision(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    chosen: Optional[Control] = None
    candidates_evaluated: int = Field(default=0, ge=0)
    feasible_count: int = Field(default=0, ge=0)
    leaves_evaluated: int = Field(default=0, ge=0)
    trace: Optional[DecisionTrace] = None

    @model_validator(mode="after")
    def _chosen_iff_feasible(self):
        if (self.chosen is None) != (self.feasible_count == 0):
            raise ValueError("a decision has a chosen control exactly when some candidate is feasible")
        return self

    @property
    def frozen(self) -> bool:
        return self.chosen is None
