from typing import Dict, Optional

import numpy as np

from ..config.moce_config import MODEL_PARAMETERS
from .tensor import Tensor


class Adam:
    """Adam with bias correction; tensors whose gradient is None are skipped."""

    def __init__(
        self,
        parameters: Dict[str, Tensor],
        lr: Optional[float] = None,
        beta1: Optional[float] = None,
        beta2: Optional[float] = None,
        eps: Optional[float] = None,
    ):
        config = MODEL_PARAMETERS["training"]
        self.parameters = parameters
        self.lr = config["learning_rate"] if lr is None else lr
        self.beta1 = config["beta1"] if beta1 is None else beta1
        self.beta2 = config["beta2"] if beta2 is None else beta2
        self.eps = config["adam_eps"] if eps is None else eps
        self.m = {name: np.zeros_like(p.data) for name, p in parameters.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in parameters.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        for name, p in self.parameters.items():
            if p.grad is None:
                continue
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * p.grad
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * (p.grad ** 2)
            m_hat = self.m[name] / (1 - self.beta1 ** self.t)
            v_hat = self.v[name] / (1 - self.beta2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.parameters.values():
            p.grad = None
