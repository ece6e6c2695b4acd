"""
Analytic ego dynamics, control sampling, and the learned surrogate.

The four vector fields:
    single_integrator  x=[p_x, p_y]          u=[v_x, v_y]
    double_integrator  x=[p_x, p_y, v_x, v_y] u=[a_x, a_y]
    dubins             x=[p_x, p_y, v, theta] u=[a, omega]
    bicycle            x=[p_x, p_y, theta, delta] u=[v, omega]
are integrated with one forward-Euler step.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field
from sklearn.model_selection import train_test_split
from sklearn.preprocessing import StandardScaler

from ..exceptions import DynamicsError, TrainingDivergedError
from ..ml.layers import MlpSpec, init_mlp, mlp_forward
from ..ml.optim import AdamHyper, AdamState, optimizer_step
from ..models.learned_dynamics import LearnedDynamics
from ..schemas.dynamics import (
    ANGLE_INDICES,
    Control,
    ControlBounds,
    DynamicsKind,
    DynamicsParams,
    EgoState,
    control_dim,
    state_dim,
    wrap_angle,
)
from ..telemetry import telemetry
from ..telemetry_decorators import log_method_call, time_operation, trace_method

logger = logging.getLogger(__name__)


def vector_field(kind: DynamicsKind, states: np.ndarray, controls: np.ndarray,
                 params: DynamicsParams = DynamicsParams()) -> np.ndarray:
    """Batched f(x, u) for rows of ``states`` and ``controls``"""
    x = np.atleast_2d(states)
    u = np.atleast_2d(controls)
    if kind is DynamicsKind.SINGLE_INTEGRATOR:
        return u.copy()
    if kind is DynamicsKind.DOUBLE_INTEGRATOR:
        return np.column_stack([x[:, 2], x[:, 3], u[:, 0], u[:, 1]])
    if kind is DynamicsKind.DUBINS:
        v, theta = x[:, 2], x[:, 3]
        return np.column_stack([v * np.cos(theta), v * np.sin(theta), u[:, 0], u[:, 1]])
    if kind is DynamicsKind.BICYCLE:
        theta, delta = x[:, 2], x[:, 3]
        v = u[:, 0]
        return np.column_stack([v * np.cos(theta), v * np.sin(theta),
                                np.tan(delta) / params.bicycle_length * v, u[:, 1]])
    raise DynamicsError(f"unknown dynamics kind {kind}")


def _saturate(kind: DynamicsKind, states: np.ndarray, params: DynamicsParams) -> np.ndarray:
    if kind is DynamicsKind.DOUBLE_INTEGRATOR:
        speed = np.linalg.norm(states[:, 2:4], axis=1)
        over = speed > params.double_integrator_speed_max
        if np.any(over):
            states[over, 2:4] *= (params.double_integrator_speed_max / speed[over])[:, None]
    elif kind is DynamicsKind.DUBINS:
        states[:, 2] = np.clip(states[:, 2], params.dubins_speed_min, params.dubins_speed_max)
    elif kind is DynamicsKind.BICYCLE:
        states[:, 3] = np.clip(states[:, 3], -params.steer_limit, params.steer_limit)
    for i in ANGLE_INDICES[kind]:
        states[:, i] = wrap_angle(states[:, i])
    return states


def step_batch(kind: DynamicsKind, states: np.ndarray, controls: np.ndarray, dt: float,
               params: DynamicsParams = DynamicsParams()) -> np.ndarray:
    """Forward-Euler step for a batch of states"""
    if dt <= 0:
        raise DynamicsError(f"dt must be positive, got {dt}")
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    controls = np.atleast_2d(np.asarray(controls, dtype=np.float64))
    if states.shape[1] != state_dim(kind) or controls.shape[1] != control_dim(kind):
        raise DynamicsError(f"{kind.value}: got state width {states.shape[1]}, control width {controls.shape[1]}")
    nxt = states + vector_field(kind, states, controls, params) * dt
    return _saturate(kind, nxt, params)


def step_true(x: EgoState, u: Control, dt: float, params: DynamicsParams = DynamicsParams()) -> EgoState:
    if x.kind != u.kind:
        raise DynamicsError(f"state kind {x.kind.value} does not match control kind {u.kind.value}")
    return EgoState.from_array(x.kind, step_batch(x.kind, x.array, u.array, dt, params)[0])


@dataclass(frozen=True)
class TrueDynamics:
    """The analytic stepper behind the same ``step`` interface as LearnedDynamics"""

    kind: DynamicsKind
    dt: float
    params: DynamicsParams = field(default_factory=DynamicsParams)

    def step(self, states: np.ndarray, controls: np.ndarray) -> np.ndarray:
        return step_batch(self.kind, states, controls, self.dt, self.params)


Stepper = Union[TrueDynamics, LearnedDynamics]


def initial_ego_state(kind: DynamicsKind, start: Sequence[float], goal: Sequence[float]) -> EgoState:
    """At rest at ``start``, heading toward ``goal`` where heading is a state"""
    heading = float(np.arctan2(goal[1] - start[1], goal[0] - start[0]))
    if kind is DynamicsKind.SINGLE_INTEGRATOR:
        comps = (start[0], start[1])
    elif kind is DynamicsKind.DOUBLE_INTEGRATOR:
        comps = (start[0], start[1], 0.0, 0.0)
    elif kind is DynamicsKind.DUBINS:
        comps = (start[0], start[1], 0.0, heading)
    else:
        comps = (start[0], start[1], heading, 0.0)
    return EgoState(kind=kind, components=tuple(float(c) for c in comps))


def sample_control_array(bounds: ControlBounds, count: int,
                         rng: Union[np.random.Generator, int, Sequence[int]]) -> np.ndarray:
    if count < 1:
        raise ValueError(f"need at least one control sample, got {count}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return rng.uniform(bounds.low, bounds.high, size=(count, len(bounds.lower)))


def sample_controls(kind: DynamicsKind, bounds: ControlBounds, count: int, rng_seed) -> List[Control]:
    """``count`` i.i.d. uniform draws from the bounds box"""
    if len(bounds.lower) != control_dim(kind):
        raise DynamicsError(f"bounds width {len(bounds.lower)} does not fit {kind.value}")
    return [Control.from_array(kind, row) for row in sample_control_array(bounds, count, rng_seed)]


# -- learned surrogate --------------------------------------------------------


@dataclass
class TransitionSet:
    kind: DynamicsKind
    states: np.ndarray
    controls: np.ndarray
    next_states: np.ndarray

    def __len__(self) -> int:
        return len(self.states)

    @classmethod
    def from_records(cls, records: Sequence[Tuple[EgoState, Control, EgoState]]) -> "TransitionSet":
        if not records:
            raise DynamicsError("no transitions supplied")
        kinds = {r[0].kind for r in records} | {r[1].kind for r in records} | {r[2].kind for r in records}
        if len(kinds) != 1:
            raise DynamicsError(f"transitions mix dynamics kinds: {sorted(k.value for k in kinds)}")
        return cls(
            kind=kinds.pop(),
            states=np.array([r[0].array for r in records]),
            controls=np.array([r[1].array for r in records]),
            next_states=np.array([r[2].array for r in records]),
        )

    def concat(self, other: "TransitionSet") -> "TransitionSet":
        if other.kind != self.kind:
            raise DynamicsError("cannot merge transitions of different kinds")
        return TransitionSet(self.kind,
                             np.concatenate([self.states, other.states]),
                             np.concatenate([self.controls, other.controls]),
                             np.concatenate([self.next_states, other.next_states]))


def generate_transitions(kind: DynamicsKind, count: int, seed: int, dt: float = 0.1,
                         bounds: ControlBounds = None, params: DynamicsParams = DynamicsParams(),
                         position_extent: float = 10.0) -> TransitionSet:
    """Random states over the operating box, random controls, true successors"""
    bounds = bounds or ControlBounds.default_for(kind)
    rng = np.random.default_rng(seed)
    states = np.zeros((count, state_dim(kind)))
    states[:, :2] = rng.uniform(-position_extent, position_extent, size=(count, 2))
    if kind is DynamicsKind.DOUBLE_INTEGRATOR:
        states[:, 2:4] = rng.uniform(-1.0, 1.0, size=(count, 2))
    elif kind is DynamicsKind.DUBINS:
        states[:, 2] = rng.uniform(params.dubins_speed_min, params.dubins_speed_max, size=count)
        states[:, 3] = rng.uniform(-np.pi, np.pi, size=count)
    elif kind is DynamicsKind.BICYCLE:
        states[:, 2] = rng.uniform(-np.pi, np.pi, size=count)
        states[:, 3] = rng.uniform(-params.steer_limit, params.steer_limit, size=count)
    controls = sample_control_array(bounds, count, rng)
    return TransitionSet(kind, states, controls, step_batch(kind, states, controls, dt, params))


class DynamicsTrainConfig(BaseModel):
    hidden: Tuple[int, ...] = (64, 64)
    iterations: int = Field(default=3000, ge=0)
    batch_size: int = Field(default=256, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0)
    validation_fraction: float = Field(default=0.1, gt=0, lt=1)
    min_transitions: int = Field(default=1000, ge=1)
    seed: int = 0
    log_every: int = Field(default=500, ge=1)


def _increments(kind: DynamicsKind, states: np.ndarray, next_states: np.ndarray) -> np.ndarray:
    delta = next_states - states
    for i in ANGLE_INDICES[kind]:
        delta[:, i] = wrap_angle(delta[:, i])
    return delta


@trace_method("fit_dynamics")
@time_operation("fit_dynamics")
@log_method_call(include_result=False)
def fit_dynamics(data: Union[TransitionSet, Sequence[Tuple[EgoState, Control, EgoState]]],
                 cfg: DynamicsTrainConfig = DynamicsTrainConfig()) -> Tuple[LearnedDynamics, np.ndarray]:
    """
    Fit the MLP surrogate by minimizing the MSE of the normalized next-state
    prediction. Returns the model and the per-component held-out RMSE.
    """
    if not isinstance(data, TransitionSet):
        data = TransitionSet.from_records(list(data))
    if len(data) == 0:
        raise DynamicsError("no transitions supplied")
    if len(data) < cfg.min_transitions:
        raise DynamicsError(f"need at least {cfg.min_transitions} transitions, got {len(data)}")
    if not all(np.all(np.isfinite(a)) for a in (data.states, data.controls, data.next_states)):
        raise DynamicsError("transitions contain non-finite values")

    kind = data.kind
    inputs = np.concatenate([data.states, data.controls], axis=1)
    targets = _increments(kind, data.states, data.next_states)
    x_train, x_val, y_train, y_val, s_train, s_val = train_test_split(
        inputs, targets, data.states, test_size=cfg.validation_fraction, random_state=cfg.seed)

    in_scaler = StandardScaler().fit(x_train)
    out_scaler = StandardScaler().fit(y_train)
    # constant columns get unit scale from sklearn already; keep arrays explicit
    in_mean, in_scale = in_scaler.mean_.copy(), in_scaler.scale_.copy()
    out_mean, out_scale = out_scaler.mean_.copy(), out_scaler.scale_.copy()
    x_norm = in_scaler.transform(x_train)
    y_norm = out_scaler.transform(y_train)

    spec = MlpSpec(widths=(inputs.shape[1], *cfg.hidden, state_dim(kind)), activation="tanh")
    rng = np.random.default_rng(cfg.seed)
    params = init_mlp(spec, "dyn", rng)
    hyper = AdamHyper(learning_rate=cfg.learning_rate)
    state = AdamState()

    for it in range(cfg.iterations):
        idx = rng.integers(0, len(x_norm), size=min(cfg.batch_size, len(x_norm)))
        params.zero_grad()
        pred = mlp_forward(spec, params, "dyn", x_norm[idx])
        loss = (pred - y_norm[idx]).square().mean()
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDivergedError("fit_dynamics", it, value)
        loss.backward()
        params, state = optimizer_step(params, params.grads(), state, hyper)
        if (it + 1) % cfg.log_every == 0:
            logger.info(f"fit_dynamics[{kind.value}] iteration {it + 1}/{cfg.iterations} loss={value:.3e}")
    telemetry.record_training_iterations("dynamics", cfg.iterations)

    model = LearnedDynamics(kind, spec, params, in_mean, in_scale, out_mean, out_scale)
    predicted = model.step(s_val, x_val[:, state_dim(kind):])
    truth = s_val + y_val
    err = _increments(kind, truth, predicted)
    rmse = np.sqrt(np.mean(err ** 2, axis=0))
    logger.info(f"fit_dynamics[{kind.value}] held-out RMSE per component: {np.array2string(rmse, precision=5)}")
    return model, rmse


def step_learned(model: LearnedDynamics, x: EgoState, u: Control) -> EgoState:
    if x.kind != model.kind or u.kind != model.kind:
        raise DynamicsError(f"learned dynamics for {model.kind.value} got {x.kind.value}/{u.kind.value}")
    return EgoState.from_array(x.kind, model.step(x.array, u.array)[0])
