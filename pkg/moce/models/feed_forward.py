from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from ..engine import ops
from ..engine.tensor import Tensor


@dataclass
class FeedForward:
    """Dense FFN sub-layer E(x) = act(x W1 + b1) W2 + b2."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    activation: str = "gelu"

    @classmethod
    def initialize(cls, d_model: int, d_ff: int, rng: Optional[np.random.Generator], std: float) -> "FeedForward":
        def weight(shape):
            return Tensor(np.zeros(shape) if rng is None else rng.normal(0.0, std, shape), requires_grad=True)

        return cls(
            w1=weight((d_model, d_ff)),
            b1=Tensor(np.zeros(d_ff), requires_grad=True),
            w2=weight((d_ff, d_model)),
            b2=Tensor(np.zeros(d_model), requires_grad=True),
        )

    def __call__(self, x: Tensor) -> Tensor:
        hidden = ops.activation(ops.add(ops.matmul(x, self.w1), self.b1), self.activation)
        return ops.add(ops.matmul(hidden, self.w2), self.b2)

    def parameters(self, prefix: str) -> Dict[str, Tensor]:
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1, f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}
