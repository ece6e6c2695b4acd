"""
Next-state predictors for crowd obstacles.

All predictors read windows of absolute obstacle states (px, py, vx, vy),
oldest first, shaped (scenes, obstacles, k, 4), and predict each obstacle's
state one step ahead as an increment on its latest state.

  csm   per-obstacle LSTM over the obstacle's own window
  icsm  as csm, each timestep also carries the relative state of the
        nearest other obstacle at that timestep
  cosm  collective model: every obstacle's window is embedded by a shared
        MLP and mean pooled into a scene context; each obstacle is decoded
        from (own embedding, context)
"""
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, Sequence, Union

import numpy as np

from ..exceptions import ShapeError
from ..ml.diffcomp import ParamBundle, Tensor, concat
from ..ml.layers import LstmSpec, MlpSpec, init_lstm, init_mlp, lstm_forward, mlp_forward
from ..schemas.decomp import PredictorKind

STATE_WIDTH = 4

Params = Union[ParamBundle, Dict[str, Tensor]]


def own_features(windows: np.ndarray) -> np.ndarray:
    """Positions relative to the latest position of the same obstacle; velocities unchanged"""
    feats = np.array(windows, dtype=np.float64, copy=True)
    feats[..., :2] -= windows[..., -1:, :2]
    return feats


def interaction_features(windows: np.ndarray) -> np.ndarray:
    """
    Relative state of the nearest other obstacle at every timestep, (S, m, k, 4);
    all zeros in scenes with a single obstacle.
    """
    s, m, k, _ = windows.shape
    if m < 2:
        return np.zeros((s, m, k, STATE_WIDTH))
    by_time = np.transpose(windows, (0, 2, 1, 3))                      # (S, k, m, 4)
    diff = by_time[:, :, None, :, :] - by_time[:, :, :, None, :]        # (S, k, m, m, 4)
    dist = np.linalg.norm(diff[..., :2], axis=-1)
    dist[..., np.arange(m), np.arange(m)] = np.inf
    nearest = np.argmin(dist, axis=-1)                                  # (S, k, m)
    rel = np.take_along_axis(diff, nearest[..., None, None], axis=3)[..., 0, :]
    return np.transpose(rel, (0, 2, 1, 3))


@dataclass(frozen=True)
class PredictorModel:
    kind: PredictorKind
    history_length: int
    hidden: int
    params: ParamBundle
    target_mean: np.ndarray
    target_scale: np.ndarray

    @classmethod
    def initialize(cls, kind: PredictorKind, history_length: int, hidden: int = 64, seed: int = 0,
                   target_mean=None, target_scale=None) -> "PredictorModel":
        rng = np.random.default_rng(seed)
        k, h = history_length, hidden
        if kind is PredictorKind.COSM:
            params = init_mlp(MlpSpec(widths=(k * STATE_WIDTH, h, h)), "own", rng)
            params = params.merged(init_mlp(MlpSpec(widths=(k * STATE_WIDTH, h, h)), "set", rng))
            params = params.merged(init_mlp(MlpSpec(widths=(2 * h, h, STATE_WIDTH)), "head", rng))
        else:
            width = 2 * STATE_WIDTH if kind is PredictorKind.ICSM else STATE_WIDTH
            params = init_lstm(LstmSpec(input_width=width, hidden_width=h), "seq", rng)
            params = params.merged(init_mlp(MlpSpec(widths=(h, h, STATE_WIDTH)), "head", rng))
        return cls(
            kind=kind, history_length=k, hidden=h, params=params,
            target_mean=np.zeros(STATE_WIDTH) if target_mean is None else np.asarray(target_mean, dtype=np.float64),
            target_scale=np.ones(STATE_WIDTH) if target_scale is None else np.asarray(target_scale, dtype=np.float64),
        )

    @property
    def name(self) -> str:
        return self.kind.value

    @cached_property
    def _constants(self) -> Dict[str, Tensor]:
        return self.params.frozen()

    def features(self, windows: np.ndarray) -> np.ndarray:
        """
        Model inputs for (S, m, k, 4) windows: (S*m, k, w) sequences for the
        per-obstacle kinds, (S, m, 2*k*4) scene rows for cosm.
        """
        windows = np.asarray(windows, dtype=np.float64)
        if windows.ndim != 4 or windows.shape[2:] != (self.history_length, STATE_WIDTH):
            raise ShapeError(f"windows must be (S, m, {self.history_length}, {STATE_WIDTH}), got {windows.shape}")
        s, m, k, q = windows.shape
        own = own_features(windows)
        if self.kind is PredictorKind.COSM:
            return np.concatenate([own.reshape(s, m, k * q), windows.reshape(s, m, k * q)], axis=-1)
        if self.kind is PredictorKind.ICSM:
            own = np.concatenate([own, interaction_features(windows)], axis=-1)
        return own.reshape(s * m, k, own.shape[-1])

    def forward(self, params: Params, features: np.ndarray) -> Tensor:
        """Normalized increments, shape (rows, 4) in scene-major obstacle order"""
        h = self.hidden
        if self.kind is PredictorKind.COSM:
            s, m, width = features.shape
            half = width // 2
            own = mlp_forward(MlpSpec(widths=(half, h, h)), params, "own",
                              features[:, :, :half].reshape(s * m, half)).relu()
            embedded = mlp_forward(MlpSpec(widths=(half, h, h)), params, "set",
                                   features[:, :, half:].reshape(s * m, half)).relu()
            context = embedded.reshape(s, m, h).mean(axis=1).reshape(s, 1, h) + np.zeros((s, m, h))
            joined = concat([own.reshape(s, m, h), context], axis=-1).reshape(s * m, 2 * h)
            return mlp_forward(MlpSpec(widths=(2 * h, h, STATE_WIDTH)), params, "head", joined)
        spec = LstmSpec(input_width=features.shape[-1], hidden_width=h)
        encoded = lstm_forward(spec, params, "seq", features)
        return mlp_forward(MlpSpec(widths=(h, h, STATE_WIDTH)), params, "head", encoded)

    def predict(self, windows: np.ndarray) -> np.ndarray:
        """Absolute next states, (S, m, 4)"""
        windows = np.asarray(windows, dtype=np.float64)
        s, m = windows.shape[:2]
        if s * m == 0:
            return np.zeros((s, m, STATE_WIDTH))
        increments = self.forward(self._constants, self.features(windows)).data
        increments = increments * self.target_scale + self.target_mean
        return windows[:, :, -1, :] + increments.reshape(s, m, STATE_WIDTH)

    def predict_scenes(self, windows: np.ndarray, crowds: Sequence = ()) -> np.ndarray:
        return self.predict(windows)

    def with_params(self, params: ParamBundle) -> "PredictorModel":
        return PredictorModel(self.kind, self.history_length, self.hidden, params,
                              self.target_mean, self.target_scale)
