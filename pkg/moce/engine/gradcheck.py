import logging
from typing import Callable, Dict, Mapping, Union

import numpy as np

from .tensor import ComputationTape, Tensor
from ..utils.exceptions import ContractError, NumericError

logger = logging.getLogger(__name__)

ScalarFn = Callable[[Tensor], Union[Tensor, float]]


def _scalar(value: Union[Tensor, float]) -> float:
    if isinstance(value, Tensor):
        return value.item()
    return float(value)


def finite_difference_gradient(f: ScalarFn, x: Union[Tensor, np.ndarray], h: float = 1e-5) -> Tensor:
    """Central-difference estimate of df/dx, one coordinate at a time."""
    if h <= 0:
        raise ContractError(f"Finite-difference step must be positive, got {h}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    for i in range(base.size):
        plus = base.copy()
        plus.flat[i] += h
        minus = base.copy()
        minus.flat[i] -= h
        f_plus = _scalar(f(Tensor(plus)))
        f_minus = _scalar(f(Tensor(minus)))
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"Non-finite function value while perturbing coordinate {i}")
        grad.flat[i] = (f_plus - f_minus) / (2.0 * h)
    return Tensor(grad)


def analytic_gradient(f: ScalarFn, x: Union[Tensor, np.ndarray]) -> np.ndarray:
    leaf = Tensor(x.data if isinstance(x, Tensor) else x, requires_grad=True)
    with ComputationTape() as tape:
        loss = f(leaf)
    tape.backward(loss)
    return leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| scaled by the larger of the two max-magnitudes."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), floor)
    return float(np.max(np.abs(analytic - numeric))) / denom


def check_gradient(f: ScalarFn, x: Union[Tensor, np.ndarray], h: float = 1e-5) -> float:
    numeric = finite_difference_gradient(f, x, h).data
    return relative_error(analytic_gradient(f, x), numeric)


def check_parameter_gradients(
    loss_fn: Callable[[], Tensor],
    parameters: Mapping[str, Tensor],
    h: float = 1e-5,
    floor: float = 1e-6,
) -> Dict[str, float]:
    """Compare backward() against central differences for every named parameter.

    ``loss_fn`` must rebuild the loss from the current parameter values on each call.
    Parameters are perturbed in place and restored afterwards.
    """
    for param in parameters.values():
        param.zero_grad()
    with ComputationTape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in parameters.items()
    }

    errors: Dict[str, float] = {}
    for name, param in parameters.items():
        numeric = np.zeros_like(param.data)
        for i in range(param.data.size):
            original = param.data.flat[i]
            param.data.flat[i] = original + h
            f_plus = loss_fn().item()
            param.data.flat[i] = original - h
            f_minus = loss_fn().item()
            param.data.flat[i] = original
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(f"Non-finite loss while perturbing {name}[{i}]")
            numeric.flat[i] = (f_plus - f_minus) / (2.0 * h)
        errors[name] = relative_error(analytic[name], numeric, floor)
        logger.debug(f"Gradient check {name}: relative error {errors[name]:.3e}")
    for param in parameters.values():
        param.zero_grad()
    return errors
