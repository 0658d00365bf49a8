"""SGD with classical momentum."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError
from .tensor import Tensor


@dataclass
class SgdState:
    learning_rate: float = 0.001
    momentum: float = 0.95
    velocity: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ParameterError("learning rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError("momentum must lie in [0, 1)")


def sgd_step(params: list[Tensor], grads: list[np.ndarray | None], state: SgdState) -> list[Tensor]:
    """In-place update ``v <- m*v - lr*g; w <- w + v``.

    Velocity buffers are created lazily on the first call and must keep the
    parameter shapes afterwards.  Parameters with a ``None`` gradient are
    treated as having a zero gradient.
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.velocity:
        state.velocity = [np.zeros_like(p.data) for p in params]
    elif len(state.velocity) != len(params):
        raise ShapeError("velocity buffers do not match parameter list")

    for i, (p, g) in enumerate(zip(params, grads)):
        v = state.velocity[i]
        if v.shape != p.shape:
            raise ShapeError(f"velocity {v.shape} does not mirror parameter {p.shape}")
        lr = p.dtype.type(state.learning_rate)
        m = p.dtype.type(state.momentum)
        if g is None:
            v = m * v
        else:
            if g.shape != p.shape:
                raise ShapeError(f"gradient {g.shape} does not match parameter {p.shape}")
            v = m * v - lr * g.astype(p.dtype, copy=False)
        state.velocity[i] = v
        p.data = p.data + v
    return params
