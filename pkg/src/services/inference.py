"""
Online safe-control selection with barrier models.

Per-obstacle barrier values combine into one landscape

    agg(x) = prod_i max(min(B(x, h_i), b) / b, 0)

which is zero exactly when some obstacle's value is non-positive and one
when every obstacle is far. Candidates are sampled from the control box,
unrolled one step through the learned dynamics, and tried in order of goal
progress; the first candidate with agg > 0 is applied.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ..exceptions import ShapeError
from ..models.barrier import BarrierModel, NonSeqBarrierModel
from ..schemas.barrier import ObstacleHistory
from ..schemas.dynamics import Control, ControlBounds, DynamicsKind, EgoState
from ..schemas.inference import (
    AggregationConfig,
    ControllerDecision,
    DecisionTrace,
    EnsembleConfig,
    InferenceConfig,
)
from .ego_dynamics import Stepper, sample_control_array
from .relative_states import advance_windows, observation_windows, predicted_successor_states, relative_states
from .simulation import Controller, Observation

logger = logging.getLogger(__name__)

CANDIDATE_SALT = 5
FLOAT_FORMAT = "%.9g"

Windows = Union[np.ndarray, Sequence[ObstacleHistory]]


def aggregate(values: Sequence[float], cfg: AggregationConfig = AggregationConfig()) -> float:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return 1.0
    return float(np.prod(np.maximum(np.minimum(values, cfg.clip) / cfg.clip, 0.0)))


def aggregate_rows(values: np.ndarray, clip: float) -> np.ndarray:
    """Row-wise aggregate of an (n, m) value matrix; m = 0 gives ones"""
    return np.prod(np.maximum(np.minimum(values, clip) / clip, 0.0), axis=-1)


def _as_windows(histories: Windows, k: int) -> np.ndarray:
    if isinstance(histories, np.ndarray):
        windows = histories
    elif len(histories) == 0:
        windows = np.zeros((0, k, 4))
    else:
        windows = np.stack([h.array for h in histories])
    if windows.ndim != 3 or windows.shape[1] != k or windows.shape[2] != 4:
        raise ShapeError(f"histories must be (m, {k}, 4), got {windows.shape}")
    return windows


@dataclass(frozen=True)
class CandidateSet:
    controls: np.ndarray
    successors: np.ndarray
    next_windows: np.ndarray
    scores: np.ndarray


def build_candidates(x: np.ndarray, windows: np.ndarray, ego_velocity: np.ndarray, controls: np.ndarray,
                     dyn: Stepper, goal: np.ndarray, dt: float) -> CandidateSet:
    """
    Unroll each candidate and advance every obstacle window by one predicted
    step: the obstacle moves on at its current velocity and the relative
    state is taken against the predicted ego successor.
    """
    l = len(controls)
    successors = dyn.step(np.repeat(x[None, :], l, axis=0), controls)
    obs_pos = x[:2] + windows[:, -1, :2]
    obs_vel = windows[:, -1, 2:] + ego_velocity
    rel_next = predicted_successor_states(np.repeat(x[None, :2], l, axis=0), successors[:, :2],
                                          obs_pos, obs_vel, dt)
    next_windows = advance_windows(np.broadcast_to(windows, (l, *windows.shape)), rel_next)
    scores = -np.linalg.norm(successors[:, :2] - goal, axis=1)
    return CandidateSet(controls, successors, next_windows, scores)


def _member_values(model: BarrierModel, cands: CandidateSet) -> np.ndarray:
    l, m, k, q = cands.next_windows.shape
    if m == 0:
        return np.zeros((l, 0))
    states = np.repeat(cands.successors, m, axis=0)
    return model.values(states, cands.next_windows.reshape(l * m, k, q)).reshape(l, m)


def _first_feasible(scores: np.ndarray, feasible: np.ndarray) -> int:
    """Index of the first feasible candidate in descending score order; -1 if none"""
    for i in np.argsort(-scores, kind="stable"):
        if feasible[i]:
            return int(i)
    return -1


def _decision(kind: DynamicsKind, cands: CandidateSet, values: np.ndarray, aggregated: np.ndarray,
              feasible: np.ndarray, trace: bool) -> ControllerDecision:
    chosen = _first_feasible(cands.scores, feasible)
    return ControllerDecision(
        chosen=Control.from_array(kind, cands.controls[chosen]) if chosen >= 0 else None,
        candidates_evaluated=len(cands.controls),
        feasible_count=int(np.count_nonzero(feasible)),
        trace=DecisionTrace(cands.controls, cands.scores, values, aggregated, chosen) if trace else None,
    )


def candidate_controls(bounds: ControlBounds, l: int, rng, nominal: Optional[np.ndarray] = None) -> np.ndarray:
    controls = sample_control_array(bounds, l, rng)
    if nominal is not None:
        controls[0] = bounds.clip(nominal)
    return controls


def select_control(x: EgoState, histories: Windows, model: BarrierModel, dyn: Stepper, bounds: ControlBounds,
                   l: int, goal, cfg: AggregationConfig = AggregationConfig(), rng_seed=0,
                   ego_velocity: Optional[np.ndarray] = None, nominal: Optional[np.ndarray] = None,
                   trace: bool = False) -> ControllerDecision:
    """
    Sample ``l`` controls, unroll each through ``dyn`` and return the first,
    by ascending predicted goal distance, whose aggregated barrier value is
    positive; an empty decision when none is.
    """
    if x.kind != model.kind:
        raise ShapeError(f"model for {model.kind.value} got a {x.kind.value} state")
    windows = _as_windows(histories, model.history_length)
    ego_velocity = np.zeros(2) if ego_velocity is None else np.asarray(ego_velocity, dtype=np.float64)
    controls = candidate_controls(bounds, l, rng_seed, nominal)
    cands = build_candidates(x.array, windows, ego_velocity, controls, dyn,
                             np.asarray(goal, dtype=np.float64), model.dt)
    values = _member_values(model, cands)
    aggregated = aggregate_rows(values, cfg.clip)
    return _decision(x.kind, cands, values, aggregated, aggregated > 0, trace)


@dataclass(frozen=True)
class Ensemble:
    members: Tuple[BarrierModel, ...]
    variance_threshold: float = 0.05
    mode: str = "mean"

    def __post_init__(self):
        if len(self.members) < 2:
            raise ValueError("an ensemble needs at least two members")
        first = self.members[0]
        if any(m.kind != first.kind or m.arch != first.arch for m in self.members[1:]):
            raise ValueError("ensemble members must share kind and architecture")
        if self.mode not in ("mean", "all"):
            raise ValueError(f"unknown ensemble mode {self.mode!r}")

    @classmethod
    def from_config(cls, members: Sequence[BarrierModel], cfg: EnsembleConfig) -> "Ensemble":
        return cls(tuple(members), cfg.variance_threshold, cfg.mode)

    @property
    def lead(self) -> BarrierModel:
        return self.members[0]


def ensemble_select(x: EgoState, histories: Windows, ens: Ensemble, dyn: Stepper, bounds: ControlBounds,
                    l: int, goal, cfg: AggregationConfig = AggregationConfig(), rng_seed=0,
                    ego_velocity: Optional[np.ndarray] = None, nominal: Optional[np.ndarray] = None,
                    trace: bool = False) -> ControllerDecision:
    """
    As select_control, but a candidate must pass the ensemble test (mean
    aggregated value > 0, or every member's in ``all`` mode) and the
    per-obstacle variance of raw values across members, maximized over
    obstacles, must not exceed the threshold.
    """
    lead = ens.lead
    if x.kind != lead.kind:
        raise ShapeError(f"ensemble for {lead.kind.value} got a {x.kind.value} state")
    windows = _as_windows(histories, lead.history_length)
    ego_velocity = np.zeros(2) if ego_velocity is None else np.asarray(ego_velocity, dtype=np.float64)
    controls = candidate_controls(bounds, l, rng_seed, nominal)
    cands = build_candidates(x.array, windows, ego_velocity, controls, dyn,
                             np.asarray(goal, dtype=np.float64), lead.dt)
    values = np.stack([_member_values(m, cands) for m in ens.members])
    per_member = aggregate_rows(values, cfg.clip)
    if ens.mode == "all":
        positive = np.all(per_member > 0, axis=0)
    else:
        positive = per_member.mean(axis=0) > 0
    spread = values.var(axis=0).max(axis=1) if values.shape[2] else np.zeros(len(controls))
    feasible = positive & (spread <= ens.variance_threshold)
    return _decision(x.kind, cands, values.mean(axis=0), per_member.mean(axis=0), feasible, trace)


# -- controllers --------------------------------------------------------------


def _in_range_windows(obs: Observation, k: int, sensing_range: float) -> np.ndarray:
    if len(obs.crowd) == 0:
        return np.zeros((0, k, 4))
    windows = observation_windows(obs.ego_positions, obs.obstacle_positions, obs.obstacle_velocities,
                                  obs.step, obs.dt, k)
    in_range = np.linalg.norm(windows[:, -1, :2], axis=1) <= sensing_range
    return windows[in_range]


class _SampledController:
    def __init__(self, kind: DynamicsKind, dyn: Stepper, bounds: Optional[ControlBounds],
                 inference: InferenceConfig, aggregation: AggregationConfig,
                 nominal: Optional[Controller], trace: bool):
        self.kind = kind
        self.dyn = dyn
        self.bounds = bounds or ControlBounds.default_for(kind)
        self.inference = inference
        self.aggregation = aggregation
        self.nominal = nominal
        self.trace = trace

    def _nominal(self, obs: Observation) -> Optional[np.ndarray]:
        if not self.inference.inject_nominal or self.nominal is None:
            return None
        decision = self.nominal.decide(obs)
        return None if decision.frozen else decision.chosen.array


class SncbfController(_SampledController):
    name = "sncbf"

    def __init__(self, model: BarrierModel, dyn: Stepper, bounds: Optional[ControlBounds] = None,
                 inference: InferenceConfig = InferenceConfig(), aggregation: AggregationConfig = AggregationConfig(),
                 nominal: Optional[Controller] = None, trace: bool = False):
        super().__init__(model.kind, dyn, bounds, inference, aggregation, nominal, trace)
        self.model = model

    def decide(self, obs: Observation) -> ControllerDecision:
        windows = _in_range_windows(obs, self.model.history_length, self.inference.sensing_range)
        return select_control(obs.ego, windows, self.model, self.dyn, self.bounds, self.inference.candidates,
                              obs.goal, self.aggregation, obs.rng(CANDIDATE_SALT), obs.ego_velocity,
                              self._nominal(obs), self.trace)


class SncbfEnsembleController(_SampledController):
    name = "sncbf-ensemble"

    def __init__(self, ensemble: Ensemble, dyn: Stepper, bounds: Optional[ControlBounds] = None,
                 inference: InferenceConfig = InferenceConfig(), aggregation: AggregationConfig = AggregationConfig(),
                 nominal: Optional[Controller] = None, trace: bool = False):
        super().__init__(ensemble.lead.kind, dyn, bounds, inference, aggregation, nominal, trace)
        self.ensemble = ensemble

    def decide(self, obs: Observation) -> ControllerDecision:
        windows = _in_range_windows(obs, self.ensemble.lead.history_length, self.inference.sensing_range)
        return ensemble_select(obs.ego, windows, self.ensemble, self.dyn, self.bounds, self.inference.candidates,
                               obs.goal, self.aggregation, obs.rng(CANDIDATE_SALT), obs.ego_velocity,
                               self._nominal(obs), self.trace)


def nonseq_select(x: EgoState, current: np.ndarray, model: NonSeqBarrierModel, dyn: Stepper,
                  bounds: ControlBounds, l: int, goal, cfg: AggregationConfig, rng_seed,
                  ego_velocity: np.ndarray, nominal: Optional[np.ndarray] = None,
                  trace: bool = False) -> ControllerDecision:
    """Candidate selection with the pooled model; the whole in-range set yields one value"""
    controls = candidate_controls(bounds, l, rng_seed, nominal)
    goal = np.asarray(goal, dtype=np.float64)
    successors = dyn.step(np.repeat(x.array[None, :], l, axis=0), controls)
    scores = -np.linalg.norm(successors[:, :2] - goal, axis=1)
    if len(current) == 0:
        values = np.zeros((l, 0))
        aggregated = np.ones(l)
    else:
        obs_pos = x.position + current[:, :2]
        obs_vel = current[:, 2:] + ego_velocity
        sets = predicted_successor_states(np.repeat(x.position[None, :], l, axis=0), successors[:, :2],
                                          obs_pos, obs_vel, model.dt)
        values = model.values(successors, sets)[:, None]
        aggregated = aggregate_rows(values, cfg.clip)
    cands = CandidateSet(controls, successors, np.zeros((l, 0, 1, 4)), scores)
    return _decision(x.kind, cands, values, aggregated, aggregated > 0, trace)


class NonSeqCbfController(_SampledController):
    name = "nonseq-cbf"

    def __init__(self, model: NonSeqBarrierModel, dyn: Stepper, bounds: Optional[ControlBounds] = None,
                 inference: InferenceConfig = InferenceConfig(), aggregation: AggregationConfig = AggregationConfig(),
                 nominal: Optional[Controller] = None, trace: bool = False):
        super().__init__(model.kind, dyn, bounds, inference, aggregation, nominal, trace)
        self.model = model

    def decide(self, obs: Observation) -> ControllerDecision:
        current = relative_states(obs.ego.position, obs.ego_velocity, obs.crowd.positions, obs.crowd.velocities)
        current = current[np.linalg.norm(current[:, :2], axis=1) <= self.inference.sensing_range]
        return nonseq_select(obs.ego, current, self.model, self.dyn, self.bounds, self.inference.candidates,
                             obs.goal, self.aggregation, obs.rng(CANDIDATE_SALT), obs.ego_velocity,
                             self._nominal(obs), self.trace)


# -- trace CSV ----------------------------------------------------------------


def trace_frame(traces: Sequence[Tuple[int, DecisionTrace]]) -> pd.DataFrame:
    """Long format: one row per (step, candidate, obstacle); obstacle -1 marks an empty scene"""
    rows: List[dict] = []
    for step, tr in traces:
        for c in range(len(tr.controls)):
            base = {"step": step, "candidate": c}
            base.update({f"u_{i}": v for i, v in enumerate(tr.controls[c])})
            base.update({"score": tr.scores[c], "aggregated": tr.aggregated[c],
                         "chosen": int(c == tr.chosen_index)})
            n_obs = tr.barrier_values.shape[1] if tr.barrier_values.ndim == 2 else 0
            if n_obs == 0:
                rows.append({**base, "obstacle": -1, "barrier_value": np.nan})
            for j in range(n_obs):
                rows.append({**base, "obstacle": j, "barrier_value": tr.barrier_values[c, j]})
    return pd.DataFrame(rows)


def write_trace_csv(traces: Sequence[Tuple[int, DecisionTrace]], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    trace_frame(traces).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path
