"""MLP and LSTM layers on top of the diffcomp Tensor"""
from typing import Literal, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator

from ..exceptions import ShapeError
from .diffcomp import ParamBundle, Tensor

Activation = Literal["relu", "tanh", "linear"]


class MlpSpec(BaseModel):
    widths: Tuple[int, ...] = Field(description="input width followed by each layer's output width")
    activation: Activation = "relu"

    @field_validator("widths")
    @classmethod
    def _check_widths(cls, widths):
        if len(widths) < 2:
            raise ValueError("an MLP needs an input width and at least one layer")
        if any(w < 1 for w in widths):
            raise ValueError(f"widths must be >= 1, got {widths}")
        return tuple(widths)

    @property
    def input_width(self) -> int:
        return self.widths[0]

    @property
    def output_width(self) -> int:
        return self.widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


class LstmSpec(BaseModel):
    input_width: int = Field(ge=1)
    hidden_width: int = Field(ge=1)


def init_mlp(spec: MlpSpec, prefix: str, rng: np.random.Generator) -> ParamBundle:
    """Fan-in scaled uniform weights, zero biases"""
    bundle = ParamBundle()
    for i, (fan_in, fan_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        bundle.add(f"{prefix}.w{i}", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        bundle.add(f"{prefix}.b{i}", np.zeros(fan_out))
    return bundle


def init_lstm(spec: LstmSpec, prefix: str, rng: np.random.Generator) -> ParamBundle:
    """Gate blocks ordered input, forget, candidate, output; forget bias starts at +1"""
    hidden = spec.hidden_width
    bound = 1.0 / np.sqrt(hidden)
    bias = np.zeros(4 * hidden)
    bias[hidden:2 * hidden] = 1.0
    return ParamBundle([
        (f"{prefix}.w_x", rng.uniform(-bound, bound, size=(spec.input_width, 4 * hidden))),
        (f"{prefix}.w_h", rng.uniform(-bound, bound, size=(hidden, 4 * hidden))),
        (f"{prefix}.b", bias),
    ])


def _activate(x: Tensor, activation: Activation) -> Tensor:
    if activation == "relu":
        return x.relu()
    if activation == "tanh":
        return x.tanh()
    return x


def mlp_forward(spec: MlpSpec, params: ParamBundle, prefix: str,
                inputs: Union[Tensor, np.ndarray]) -> Tensor:
    """Affine layers with ``spec.activation`` between them and a linear last layer"""
    x = Tensor.lift(inputs)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.shape[-1] != spec.input_width:
        raise ShapeError(f"{prefix}: expected input width {spec.input_width}, got {x.shape[-1]}")
    for i in range(spec.n_layers):
        x = x @ params[f"{prefix}.w{i}"] + params[f"{prefix}.b{i}"]
        if i < spec.n_layers - 1:
            x = _activate(x, spec.activation)
    return x


def lstm_forward(spec: LstmSpec, params: ParamBundle, prefix: str,
                 sequence: Union[Tensor, np.ndarray]) -> Tensor:
    """
    Run the recurrence over ``sequence`` of shape (batch, steps, input) or
    (steps, input) from zero hidden and cell state; returns the final hidden
    state of shape (batch, hidden).
    """
    seq = Tensor.lift(sequence)
    if seq.ndim == 2:
        seq = seq.reshape(1, *seq.shape)
    if seq.ndim != 3:
        raise ShapeError(f"{prefix}: sequence must be (batch, steps, width), got {seq.shape}")
    batch, steps, width = seq.shape
    if steps < 1:
        raise ShapeError(f"{prefix}: empty sequence")
    if width != spec.input_width:
        raise ShapeError(f"{prefix}: expected input width {spec.input_width}, got {width}")

    hidden = spec.hidden_width
    w_x, w_h, b = params[f"{prefix}.w_x"], params[f"{prefix}.w_h"], params[f"{prefix}.b"]

    # input projections for every step at once
    projected = (seq.reshape(batch * steps, width) @ w_x).reshape(batch, steps, 4 * hidden)

    h = Tensor(np.zeros((batch, hidden)))
    c = Tensor(np.zeros((batch, hidden)))
    for t in range(steps):
        z = projected[:, t, :] + h @ w_h + b
        i_gate = z[:, :hidden].sigmoid()
        f_gate = z[:, hidden:2 * hidden].sigmoid()
        g_cand = z[:, 2 * hidden:3 * hidden].tanh()
        o_gate = z[:, 3 * hidden:].sigmoid()
        c = f_gate * c + i_gate * g_cand
        h = o_gate * c.tanh()
    return h
