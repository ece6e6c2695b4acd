import math
from enum import Enum
from typing import Dict, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


class DynamicsKind(str, Enum):
    SINGLE_INTEGRATOR = "single_integrator"
    DOUBLE_INTEGRATOR = "double_integrator"
    DUBINS = "dubins"
    BICYCLE = "bicycle"


STATE_LABELS: Dict[DynamicsKind, Tuple[str, ...]] = {
    DynamicsKind.SINGLE_INTEGRATOR: ("p_x", "p_y"),
    DynamicsKind.DOUBLE_INTEGRATOR: ("p_x", "p_y", "v_x", "v_y"),
    DynamicsKind.DUBINS: ("p_x", "p_y", "v", "theta"),
    DynamicsKind.BICYCLE: ("p_x", "p_y", "theta", "delta"),
}

CONTROL_LABELS: Dict[DynamicsKind, Tuple[str, ...]] = {
    DynamicsKind.SINGLE_INTEGRATOR: ("v_x", "v_y"),
    DynamicsKind.DOUBLE_INTEGRATOR: ("a_x", "a_y"),
    DynamicsKind.DUBINS: ("a", "omega"),
    DynamicsKind.BICYCLE: ("v", "omega"),
}

# state components stored as angles in (-pi, pi]
ANGLE_INDICES: Dict[DynamicsKind, Tuple[int, ...]] = {
    DynamicsKind.SINGLE_INTEGRATOR: (),
    DynamicsKind.DOUBLE_INTEGRATOR: (),
    DynamicsKind.DUBINS: (3,),
    DynamicsKind.BICYCLE: (2,),
}


def state_dim(kind: DynamicsKind) -> int:
    return len(STATE_LABELS[kind])


def control_dim(kind: DynamicsKind) -> int:
    return len(CONTROL_LABELS[kind])


def wrap_angle(theta):
    """Map angles into (-pi, pi]"""
    return math.pi - np.mod(math.pi - np.asarray(theta, dtype=np.float64), 2.0 * math.pi)


class EgoState(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: DynamicsKind
    components: Tuple[float, ...]

    @model_validator(mode="after")
    def _check(self):
        if len(self.components) != state_dim(self.kind):
            raise ValueError(f"{self.kind.value} state needs {state_dim(self.kind)} components, got {len(self.components)}")
        if not all(math.isfinite(c) for c in self.components):
            raise ValueError(f"non-finite state components: {self.components}")
        if ANGLE_INDICES[self.kind]:
            comps = list(self.components)
            for i in ANGLE_INDICES[self.kind]:
                comps[i] = float(wrap_angle(comps[i]))
            object.__setattr__(self, "components", tuple(comps))
        return self

    @classmethod
    def from_array(cls, kind: DynamicsKind, values) -> "EgoState":
        return cls(kind=kind, components=tuple(float(v) for v in np.asarray(values).reshape(-1)))

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.components, dtype=np.float64)

    @property
    def position(self) -> np.ndarray:
        return np.asarray(self.components[:2], dtype=np.float64)


class Control(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: DynamicsKind
    components: Tuple[float, ...]

    @model_validator(mode="after")
    def _check(self):
        if len(self.components) != control_dim(self.kind):
            raise ValueError(f"{self.kind.value} control needs {control_dim(self.kind)} components, got {len(self.components)}")
        return self

    @classmethod
    def from_array(cls, kind: DynamicsKind, values) -> "Control":
        return cls(kind=kind, components=tuple(float(v) for v in np.asarray(values).reshape(-1)))

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.components, dtype=np.float64)


class ControlBounds(BaseModel):
    model_config = ConfigDict(frozen=True)

    lower: Tuple[float, ...]
    upper: Tuple[float, ...]

    @model_validator(mode="after")
    def _check(self):
        if len(self.lower) != len(self.upper):
            raise ValueError("lower and upper bounds differ in length")
        if any(lo > hi for lo, hi in zip(self.lower, self.upper)):
            raise ValueError(f"lower bound exceeds upper bound: {self.lower} vs {self.upper}")
        return self

    @classmethod
    def default_for(cls, kind: DynamicsKind) -> "ControlBounds":
        return cls(lower=DEFAULT_BOUNDS[kind][0], upper=DEFAULT_BOUNDS[kind][1])

    @property
    def low(self) -> np.ndarray:
        return np.asarray(self.lower, dtype=np.float64)

    @property
    def high(self) -> np.ndarray:
        return np.asarray(self.upper, dtype=np.float64)

    @property
    def half_width(self) -> np.ndarray:
        return 0.5 * (self.high - self.low)

    def clip(self, values: np.ndarray) -> np.ndarray:
        return np.clip(values, self.low, self.high)

    def contains(self, values: np.ndarray) -> bool:
        values = np.asarray(values)
        return bool(np.all(values >= self.low) and np.all(values <= self.high))


DEFAULT_BOUNDS: Dict[DynamicsKind, Tuple[Tuple[float, ...], Tuple[float, ...]]] = {
    DynamicsKind.SINGLE_INTEGRATOR: ((-1.0, -1.0), (1.0, 1.0)),
    DynamicsKind.DOUBLE_INTEGRATOR: ((-1.0, -1.0), (1.0, 1.0)),
    DynamicsKind.DUBINS: ((-0.5, -1.0), (0.5, 1.0)),
    DynamicsKind.BICYCLE: ((0.0, -1.0), (1.0, 1.0)),
}


class DynamicsParams(BaseModel):
    """State saturation limits and geometry of the analytic ego models"""

    bicycle_length: float = Field(default=1.0, gt=0)
    dubins_speed_min: float = 0.0
    dubins_speed_max: float = Field(default=1.5, gt=0)
    steer_limit: float = Field(default=0.6, gt=0)
    double_integrator_speed_max: float = Field(default=1.5, gt=0)
