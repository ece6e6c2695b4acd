"""Adaptive-moment optimizer, written as a pure step function"""
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np
from pydantic import BaseModel, Field

from ..exceptions import ShapeError
from .diffcomp import ParamBundle


class AdamHyper(BaseModel):
    learning_rate: float = Field(default=1e-3, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    epsilon: float = Field(default=1e-8, gt=0)


@dataclass
class AdamState:
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: ParamBundle, grads: ParamBundle, state: AdamState,
                   hyper: AdamHyper) -> Tuple[ParamBundle, AdamState]:
    """One bias-corrected Adam step; returns new parameters and new state"""
    if params.names() != grads.names():
        raise ShapeError("parameter and gradient bundles name different tensors")

    t = state.step + 1
    new_params = ParamBundle()
    new_state = AdamState(step=t)
    for (name, p), (_, g) in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"{name}: parameter shape {p.shape} vs gradient shape {g.shape}")
        m = state.first_moment.get(name, np.zeros_like(p.data))
        v = state.second_moment.get(name, np.zeros_like(p.data))
        m = hyper.beta1 * m + (1.0 - hyper.beta1) * g.data
        v = hyper.beta2 * v + (1.0 - hyper.beta2) * g.data ** 2
        m_hat = m / (1.0 - hyper.beta1 ** t)
        v_hat = v / (1.0 - hyper.beta2 ** t)
        new_params.add(name, p.data - hyper.learning_rate * m_hat / (np.sqrt(v_hat) + hyper.epsilon))
        new_state.first_moment[name] = m
        new_state.second_moment[name] = v
    return new_params, new_state
