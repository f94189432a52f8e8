"""Fully connected layers on top of the tape."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .tensor import NonFiniteError, Tensor, add, as_tensor, elu, matmul, relu, tanh

ParamSet = dict[str, Tensor]


class Activation(str, enum.Enum):
    RELU = "relu"
    IDENTITY = "identity"
    TANH = "tanh"
    ELU = "elu"


_ACT = {
    Activation.RELU: relu,
    Activation.TANH: tanh,
    Activation.ELU: elu,
    Activation.IDENTITY: lambda x: x,
}


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    activation: Activation = Activation.RELU
    final_activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2:
            raise ValueError("an MLP needs an input and an output width")
        if any(w <= 0 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        object.__setattr__(self, "layer_widths", widths)
        object.__setattr__(self, "activation", Activation(self.activation))
        object.__setattr__(self, "final_activation", Activation(self.final_activation))

    @property
    def in_width(self) -> int:
        return self.layer_widths[0]

    @property
    def out_width(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1


def init_mlp(spec: MlpSpec, rng: np.random.Generator, prefix: str = "") -> ParamSet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    params: ParamSet = {}
    for k, (fan_in, fan_out) in enumerate(zip(spec.layer_widths[:-1], spec.layer_widths[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        params[f"{prefix}{k}.weight"] = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True)
        params[f"{prefix}{k}.bias"] = Tensor(rng.uniform(-bound, bound, (fan_out,)), requires_grad=True)
    return params


def mlp_forward(spec: MlpSpec, params: ParamSet, x, prefix: str = "", check: bool = True) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != spec.in_width:
        raise ValueError(f"input width {x.shape[-1]} does not match MLP input width {spec.in_width}")
    if check:
        if not np.isfinite(x.data).all():
            raise NonFiniteError("non-finite values in MLP input")
        for k in range(spec.n_layers):
            for part in ("weight", "bias"):
                if not np.isfinite(params[f"{prefix}{k}.{part}"].data).all():
                    raise NonFiniteError(f"non-finite values in parameter {prefix}{k}.{part}")
    hidden = _ACT[spec.activation]
    for k in range(spec.n_layers):
        x = add(matmul(x, params[f"{prefix}{k}.weight"]), params[f"{prefix}{k}.bias"])
        x = _ACT[spec.final_activation](x) if k == spec.n_layers - 1 else hidden(x)
    return x


def mlp_forward_reference(spec: MlpSpec, weights: list[tuple[np.ndarray, np.ndarray]], x: np.ndarray) -> np.ndarray:
    """Plain-numpy forward pass that never touches the tape."""
    fns = {
        Activation.RELU: lambda v: np.maximum(v, 0.0),
        Activation.TANH: np.tanh,
        Activation.ELU: lambda v: np.where(v > 0, v, np.expm1(np.minimum(v, 0.0))),
        Activation.IDENTITY: lambda v: v,
    }
    for k, (w, b) in enumerate(weights):
        x = x @ w + b
        x = fns[spec.final_activation if k == len(weights) - 1 else spec.activation](x)
    return x


def clone_params(params: ParamSet) -> ParamSet:
    return {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in params.items()}


def zero_grads(params: ParamSet) -> None:
    for p in params.values():
        p.grad = None


def grad_global_norm(params: ParamSet) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))
