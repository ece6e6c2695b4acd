from pathlib import Path
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .baselines import GpfmConfig, PotentialFieldParams, SmpcConfig, SpfmConfig
from .barrier import BarrierArch, CollectionConfig, NonSeqArch, RefineConfig, TrainConfig
from .decomp import DecompConfig
from .inference import AggregationConfig, EnsembleConfig, InferenceConfig
from .sim import Scenario

CONTROLLER_NAMES: Tuple[str, ...] = (
    "sncbf", "sncbf-ensemble", "spfm", "gpfm", "smpc", "smpc-true", "nonseq-cbf", "goal-seeker",
)


def _as_list(value):
    return value if isinstance(value, (list, tuple)) else [value]


class DynamicsFitSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    hidden: Tuple[int, ...] = (64, 64)
    iterations: int = Field(default=3000, ge=0)
    batch_size: int = Field(default=256, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0)
    random_transitions: int = Field(default=20000, ge=0)

    @field_validator("hidden", mode="before")
    @classmethod
    def _coerce_lists(cls, value):
        return _as_list(value)


class TrainSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    ensemble_size: int = Field(default=1, ge=1)
    seeds: List[int] = [0]
    arch: BarrierArch = BarrierArch()
    nonseq_arch: NonSeqArch = NonSeqArch()
    collection: CollectionConfig = CollectionConfig()
    dynamics: DynamicsFitSection = DynamicsFitSection()
    initial: TrainConfig = TrainConfig()
    refine: RefineConfig = RefineConfig()
    train_nonseq: bool = True

    @field_validator("seeds", mode="before")
    @classmethod
    def _coerce_lists(cls, value):
        return _as_list(value)


class BenchSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    methods: List[str] = ["sncbf", "spfm", "gpfm"]
    densities: List[int] = [6, 24, 60]
    episodes: int = Field(default=100, ge=1)
    seeds: List[int] = [0, 1, 2]
    trace: bool = False

    @field_validator("methods", "densities", "seeds", mode="before")
    @classmethod
    def _coerce_lists(cls, value):
        return _as_list(value)

    @model_validator(mode="after")
    def _check(self):
        unknown = [m for m in self.methods if m not in CONTROLLER_NAMES]
        if unknown:
            raise ValueError(f"unregistered methods {unknown}; known: {', '.join(CONTROLLER_NAMES)}")
        if not self.seeds:
            raise ValueError("bench.seeds must not be empty")
        return self


class ReplayConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    grid_pitch: float = Field(default=0.1, gt=0)
    levels: List[float] = [0.0, 0.25, 0.5, 0.75]
    frames: List[int] = [0]
    max_cells: int = Field(default=250_000, ge=1)

    @field_validator("levels", "frames", mode="before")
    @classmethod
    def _coerce_lists(cls, value):
        return _as_list(value)


class ExperimentConfig(BaseModel):
    """Root of a ``key = value`` experiment file; section names are the dotted prefixes"""

    model_config = ConfigDict(extra="forbid")

    output_dir: Optional[Path] = None
    scenario: Scenario = Scenario()
    train: TrainSection = TrainSection()
    aggregation: AggregationConfig = AggregationConfig()
    inference: InferenceConfig = InferenceConfig()
    ensemble: EnsembleConfig = EnsembleConfig()
    potential: PotentialFieldParams = PotentialFieldParams()
    spfm: SpfmConfig = SpfmConfig()
    gpfm: GpfmConfig = GpfmConfig()
    smpc: SmpcConfig = SmpcConfig()
    bench: BenchSection = BenchSection()
    decomp: DecompConfig = DecompConfig()
    replay: ReplayConfig = ReplayConfig()


class BenchmarkRow(BaseModel):
    dynamics: str
    method: str
    obstacles: int = Field(ge=0)
    seed: int
    episodes: int = Field(ge=1)
    collision_rate: float = Field(ge=0, le=1)
    mean_steps: float = Field(ge=0)
    frozen_fraction: float = Field(ge=0, le=1)


BENCHMARK_COLUMNS = tuple(BenchmarkRow.model_fields)


class BenchmarkTable(BaseModel):
    rows: List[BenchmarkRow] = []

    def rate(self, method: str, obstacles: int) -> float:
        """Mean collision rate of ``method`` at ``obstacles`` over seeds"""
        values = [r.collision_rate for r in self.rows if r.method == method and r.obstacles == obstacles]
        if not values:
            raise KeyError(f"no rows for {method} at {obstacles} obstacles")
        return sum(values) / len(values)
