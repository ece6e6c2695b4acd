"""
Neural barrier models.

BarrierModel is the sequential certificate: an LSTM encodes one obstacle's
relative-state window, an MLP encodes the ego state with its position zeroed,
and a head MLP maps the concatenation to a scalar. NonSeqBarrierModel swaps
the recurrent encoder for a per-obstacle MLP with max pooling over every
obstacle's current relative state.
"""
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Dict, Sequence, Union

import numpy as np

from ..exceptions import ShapeError
from ..ml.diffcomp import ParamBundle, Tensor, concat
from ..ml.layers import LstmSpec, MlpSpec, init_lstm, init_mlp, lstm_forward, mlp_forward
from ..schemas.barrier import RELATIVE_STATE_WIDTH, BarrierArch, NonSeqArch, ObstacleHistory, RelativeState
from ..schemas.dynamics import DynamicsKind, EgoState, state_dim

Params = Union[ParamBundle, Dict[str, Tensor]]


def ego_features(states: np.ndarray) -> np.ndarray:
    """Ego states in the ego-centric frame: position components set to zero"""
    feats = np.array(np.atleast_2d(states), dtype=np.float64, copy=True)
    feats[:, :2] = 0.0
    return feats


@dataclass(frozen=True)
class BarrierModel:
    kind: DynamicsKind
    arch: BarrierArch
    params: ParamBundle
    kappa: float = 0.1
    gamma: float = 0.01
    dt: float = 0.1

    def __post_init__(self):
        if self.kappa <= 0 or self.gamma <= 0:
            raise ValueError(f"kappa and gamma must be positive, got {self.kappa}, {self.gamma}")
        if self.head_spec.input_width != self.lstm_spec.hidden_width + self.ego_spec.output_width:
            raise ShapeError("head input width must equal lstm hidden + ego encoder output widths")

    @classmethod
    def initialize(cls, kind: DynamicsKind, arch: BarrierArch = BarrierArch(), seed: int = 0,
                   **kwargs) -> "BarrierModel":
        rng = np.random.default_rng(seed)
        params = init_lstm(arch.lstm_spec(), "lstm", rng)
        params = params.merged(init_mlp(arch.ego_spec(kind), "ego", rng))
        params = params.merged(init_mlp(arch.head_spec(), "head", rng))
        return cls(kind=kind, arch=arch, params=params, **kwargs)

    @property
    def lstm_spec(self) -> LstmSpec:
        return self.arch.lstm_spec()

    @property
    def ego_spec(self) -> MlpSpec:
        return self.arch.ego_spec(self.kind)

    @property
    def head_spec(self) -> MlpSpec:
        return self.arch.head_spec()

    @property
    def history_length(self) -> int:
        return self.arch.history_length

    @cached_property
    def _constants(self) -> Dict[str, Tensor]:
        return self.params.frozen()

    def with_params(self, params: ParamBundle) -> "BarrierModel":
        return replace(self, params=params)

    def forward(self, params: Params, ego_states: np.ndarray, windows: np.ndarray) -> Tensor:
        """B for a batch: ``ego_states`` (n, state dim), ``windows`` (n, k, 4); returns shape (n,)"""
        windows = np.asarray(windows, dtype=np.float64)
        ego = ego_features(ego_states)
        if windows.ndim != 3 or windows.shape[2] != RELATIVE_STATE_WIDTH:
            raise ShapeError(f"windows must be (n, k, {RELATIVE_STATE_WIDTH}), got {windows.shape}")
        if len(ego) != len(windows):
            raise ShapeError(f"{len(ego)} ego states for {len(windows)} windows")
        if ego.shape[1] != state_dim(self.kind):
            raise ShapeError(f"ego state width {ego.shape[1]} does not fit {self.kind.value}")
        encoded_h = lstm_forward(self.lstm_spec, params, "lstm", windows)
        encoded_x = mlp_forward(self.ego_spec, params, "ego", ego)
        out = mlp_forward(self.head_spec, params, "head", concat([encoded_h, encoded_x], axis=1))
        return out.reshape(len(windows))

    def values(self, ego_states: np.ndarray, windows: np.ndarray) -> np.ndarray:
        if len(windows) == 0:
            return np.zeros(0)
        return self.forward(self._constants, ego_states, windows).data

    def descriptor(self) -> dict:
        return {
            "model": "sncbf",
            "kind": self.kind.value,
            "arch": self.arch.model_dump(mode="json"),
            "q": RELATIVE_STATE_WIDTH,
            "k": self.arch.history_length,
            "kappa": self.kappa,
            "gamma": self.gamma,
            "dt": self.dt,
        }

    def tensors(self) -> ParamBundle:
        return self.params

    @classmethod
    def from_tensors(cls, descriptor: dict, bundle: ParamBundle) -> "BarrierModel":
        return cls(
            kind=DynamicsKind(descriptor["kind"]),
            arch=BarrierArch.model_validate(descriptor["arch"]),
            params=bundle,
            kappa=float(descriptor["kappa"]),
            gamma=float(descriptor["gamma"]),
            dt=float(descriptor["dt"]),
        )


def barrier_value(m: BarrierModel, x: EgoState, h: ObstacleHistory) -> float:
    if x.kind != m.kind:
        raise ShapeError(f"model for {m.kind.value} got a {x.kind.value} state")
    if h.k != m.history_length:
        raise ShapeError(f"history of length {h.k}, model expects {m.history_length}")
    return float(m.values(x.array[None, :], h.array[None, :, :])[0])


@dataclass(frozen=True)
class NonSeqBarrierModel:
    kind: DynamicsKind
    arch: NonSeqArch
    params: ParamBundle
    kappa: float = 0.1
    gamma: float = 0.01
    dt: float = 0.1

    @classmethod
    def initialize(cls, kind: DynamicsKind, arch: NonSeqArch = NonSeqArch(), seed: int = 0,
                   **kwargs) -> "NonSeqBarrierModel":
        rng = np.random.default_rng(seed)
        params = init_mlp(arch.obstacle_spec(), "obs", rng)
        params = params.merged(init_mlp(arch.ego_spec(kind), "ego", rng))
        params = params.merged(init_mlp(arch.head_spec(), "head", rng))
        return cls(kind=kind, arch=arch, params=params, **kwargs)

    @cached_property
    def _constants(self) -> Dict[str, Tensor]:
        return self.params.frozen()

    def with_params(self, params: ParamBundle) -> "NonSeqBarrierModel":
        return replace(self, params=params)

    def forward(self, params: Params, ego_states: np.ndarray, sets: np.ndarray) -> Tensor:
        """B for a batch: ``sets`` (n, m, 4) of current relative states; returns shape (n,)"""
        sets = np.asarray(sets, dtype=np.float64)
        if sets.ndim != 3 or sets.shape[2] != RELATIVE_STATE_WIDTH or sets.shape[1] < 1:
            raise ShapeError(f"sets must be (n, m>=1, {RELATIVE_STATE_WIDTH}), got {sets.shape}")
        n, m, _ = sets.shape
        ego = ego_features(ego_states)
        if len(ego) != n:
            raise ShapeError(f"{len(ego)} ego states for {n} obstacle sets")
        obstacle_spec = self.arch.obstacle_spec()
        encoded = mlp_forward(obstacle_spec, params, "obs", sets.reshape(n * m, RELATIVE_STATE_WIDTH))
        pooled = encoded.reshape(n, m, obstacle_spec.output_width).max(axis=1)
        encoded_x = mlp_forward(self.arch.ego_spec(self.kind), params, "ego", ego)
        out = mlp_forward(self.arch.head_spec(), params, "head", concat([pooled, encoded_x], axis=1))
        return out.reshape(n)

    def values(self, ego_states: np.ndarray, sets: np.ndarray) -> np.ndarray:
        if len(sets) == 0:
            return np.zeros(0)
        return self.forward(self._constants, ego_states, sets).data

    def descriptor(self) -> dict:
        return {
            "model": "nonseq-cbf",
            "kind": self.kind.value,
            "arch": self.arch.model_dump(mode="json"),
            "q": RELATIVE_STATE_WIDTH,
            "kappa": self.kappa,
            "gamma": self.gamma,
            "dt": self.dt,
        }

    def tensors(self) -> ParamBundle:
        return self.params

    @classmethod
    def from_tensors(cls, descriptor: dict, bundle: ParamBundle) -> "NonSeqBarrierModel":
        return cls(
            kind=DynamicsKind(descriptor["kind"]),
            arch=NonSeqArch.model_validate(descriptor["arch"]),
            params=bundle,
            kappa=float(descriptor["kappa"]),
            gamma=float(descriptor["gamma"]),
            dt=float(descriptor["dt"]),
        )


def nonseq_barrier_value(m: NonSeqBarrierModel, x: EgoState, current: Sequence[RelativeState]) -> float:
    if x.kind != m.kind:
        raise ShapeError(f"model for {m.kind.value} got a {x.kind.value} state")
    if not current:
        raise ShapeError("nonseq_barrier_value needs at least one obstacle")
    sets = np.stack([r.array for r in current])[None, :, :]
    return float(m.values(x.array[None, :], sets)[0])
