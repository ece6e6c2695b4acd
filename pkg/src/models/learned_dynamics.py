from dataclasses import dataclass
from functools import cached_property
from typing import Dict

import numpy as np

from ..exceptions import DynamicsError
from ..ml.diffcomp import ParamBundle, Tensor
from ..ml.layers import MlpSpec, mlp_forward
from ..schemas.dynamics import ANGLE_INDICES, DynamicsKind, control_dim, state_dim, wrap_angle


@dataclass(frozen=True)
class LearnedDynamics:
    """
    MLP surrogate of the ego dynamics: predicts the z-scored state increment
    from the z-scored (state, control) pair. Immutable once fitted.
    """

    kind: DynamicsKind
    spec: MlpSpec
    params: ParamBundle
    input_mean: np.ndarray
    input_scale: np.ndarray
    target_mean: np.ndarray
    target_scale: np.ndarray

    def __post_init__(self):
        if self.spec.input_width != state_dim(self.kind) + control_dim(self.kind):
            raise DynamicsError(f"input width {self.spec.input_width} does not fit {self.kind.value}")
        if self.spec.output_width != state_dim(self.kind):
            raise DynamicsError(f"output width {self.spec.output_width} does not fit {self.kind.value}")

    @cached_property
    def _constants(self) -> Dict[str, Tensor]:
        return self.params.frozen()

    def predict_increment(self, states: np.ndarray, controls: np.ndarray) -> np.ndarray:
        features = (np.concatenate([states, controls], axis=1) - self.input_mean) / self.input_scale
        out = mlp_forward(self.spec, self._constants, "dyn", features).data
        return out * self.target_scale + self.target_mean

    def step(self, states: np.ndarray, controls: np.ndarray) -> np.ndarray:
        """Batched successor prediction; rows of ``states`` and ``controls`` pair up"""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        controls = np.atleast_2d(np.asarray(controls, dtype=np.float64))
        if not (np.all(np.isfinite(states)) and np.all(np.isfinite(controls))):
            raise DynamicsError("non-finite input to learned dynamics")
        nxt = states + self.predict_increment(states, controls)
        for i in ANGLE_INDICES[self.kind]:
            nxt[:, i] = wrap_angle(nxt[:, i])
        return nxt

    def descriptor(self) -> dict:
        return {"model": "learned_dynamics", "kind": self.kind.value, "mlp": self.spec.model_dump()}

    def tensors(self) -> ParamBundle:
        bundle = self.params.copy()
        bundle.add("norm.input_mean", self.input_mean)
        bundle.add("norm.input_scale", self.input_scale)
        bundle.add("norm.target_mean", self.target_mean)
        bundle.add("norm.target_scale", self.target_scale)
        return bundle

    @classmethod
    def from_tensors(cls, descriptor: dict, bundle: ParamBundle) -> "LearnedDynamics":
        arrays = bundle.arrays()
        return cls(
            kind=DynamicsKind(descriptor["kind"]),
            spec=MlpSpec.model_validate(descriptor["mlp"]),
            params=bundle.subset("dyn."),
            input_mean=arrays["norm.input_mean"],
            input_scale=arrays["norm.input_scale"],
            target_mean=arrays["norm.target_mean"],
            target_scale=arrays["norm.target_scale"],
        )
