from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import ParamSet
from .tensor import NonFiniteError


@dataclass
class OptimizerState:
    """Adam (default) or plain SGD over a named parameter set.

    Adam moments live in one flat vector ordered like the gradient dict; ``m``
    and ``v`` hold per-parameter views into it, shaped like the parameters.
    A state must always be stepped with the same parameter names.

    ``grad_clip`` rescales the joint gradient when its L2 norm exceeds the
    value; ``None`` disables clipping.
    """

    learning_rate: float = 0.0005
    mode: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = None
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    _flat: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.mode not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer mode {self.mode!r}")


def optimizer_step(state: OptimizerState, params: ParamSet, grads: dict[str, np.ndarray] | None = None) -> float:
    """Update ``params`` in place; returns the pre-clip gradient norm.

    ``grads`` defaults to each parameter's accumulated ``.grad`` (missing
    gradients count as zero).
    """
    if grads is None:
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    keys = list(grads)
    for k in keys:
        if grads[k].shape != params[k].data.shape:
            raise ValueError(f"gradient shape {grads[k].shape} does not match parameter {k} {params[k].data.shape}")
    flat = np.concatenate([grads[k].reshape(-1) for k in keys])
    norm = float(np.sqrt(np.dot(flat, flat)))
    if not np.isfinite(norm):
        bad = next((k for k in keys if not np.isfinite(grads[k]).all()), "<overflow>")
        raise NonFiniteError(f"non-finite gradient for {bad}")
    scale = 1.0
    if state.grad_clip is not None and norm > state.grad_clip:
        scale = state.grad_clip / (norm + 1e-6)

    state.step += 1
    lr = state.learning_rate
    if state.mode == "sgd":
        for k in keys:
            params[k].data = params[k].data - lr * scale * grads[k]
        return norm

    b1, b2, t = state.beta1, state.beta2, state.step
    if scale != 1.0:
        flat *= scale
    if state._flat is None:
        state._flat = (np.zeros_like(flat), np.zeros_like(flat))
        pos = 0
        for k in keys:
            n, shape = grads[k].size, grads[k].shape
            state.m[k] = state._flat[0][pos : pos + n].reshape(shape)
            state.v[k] = state._flat[1][pos : pos + n].reshape(shape)
            pos += n
    elif list(state.m) != keys:
        raise ValueError("optimizer state was created for a different parameter set")
    m, v = state._flat
    m *= b1
    m += (1.0 - b1) * flat
    flat *= flat
    v *= b2
    v += (1.0 - b2) * flat
    denom = np.sqrt(v)
    denom *= 1.0 / np.sqrt(1.0 - b2**t)
    denom += state.eps
    update = m / denom
    update *= lr / (1.0 - b1**t)
    pos = 0
    for k in keys:
        p = params[k].data
        n = p.size
        params[k].data = p - update[pos : pos + n].reshape(p.shape)
        pos += n
    return norm
