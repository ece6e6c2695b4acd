from typing import Optional, Tuple

from pydantic import BaseModel, Field


class PotentialFieldParams(BaseModel):
    zeta: float = Field(default=1.0, gt=0)
    eta: float = Field(default=1.0, gt=0)
    influence_distance: float = Field(default=2.0, gt=0)
    repulsive_cap: float = Field(default=1e6, gt=0)


class SpfmConfig(BaseModel):
    samples: int = Field(default=64, ge=1)
    seed: int = 0


class GpfmConfig(BaseModel):
    heading_gain: float = Field(default=2.0, gt=0)
    cruise_speed: float = Field(default=1.0, gt=0)
    speed_gain: float = Field(default=1.0, gt=0)
    gradient_step: float = Field(default=1e-4, gt=0)
    plateau_tolerance: float = Field(default=1e-6, ge=0)


class SmpcConfig(BaseModel):
    horizon: int = Field(default=3, ge=1)
    samples_per_step: int = Field(default=10, ge=1)
    sigma_fraction: float = Field(default=0.2, ge=0)
    nominal_sigma: Optional[Tuple[float, ...]] = None
    nominal_samples: int = Field(default=64, ge=1)
    use_true_dynamics: bool = False
    seed: int = 0
