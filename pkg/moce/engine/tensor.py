import contextvars
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from ..utils.exceptions import ContractError, ShapeError, TapeStateError

logger = logging.getLogger(__name__)

# Each thread / asyncio task sees its own active tape.
_ACTIVE_TAPE: contextvars.ContextVar[Optional["ComputationTape"]] = contextvars.ContextVar(
    "moce_active_tape", default=None
)

BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Dense row-major float64 value with an optional gradient buffer."""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        array = np.array(data, dtype=np.float64, order="C")
        if any(dim <= 0 for dim in array.shape):
            raise ShapeError(f"Tensor dimensions must be positive, got shape {array.shape}")
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.tape: Optional["ComputationTape"] = None

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # Freshly computed arrays are owned by the new tensor; no copy needed.
        tensor = cls.__new__(cls)
        tensor.data = np.ascontiguousarray(array, dtype=np.float64)
        tensor.requires_grad = requires_grad
        tensor.grad = None
        tensor.name = None
        tensor.tape = None
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise ShapeError(f"Gradient shape {grad.shape} does not match tensor shape {self.shape}")
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad = self.grad + grad

    def backward(self) -> None:
        backward(self)

    # Operator sugar; the rules live in ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


@dataclass
class TapeEntry:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward_rule: BackwardRule


class ComputationTape:
    """Ordered record of differentiable operations.

    Operations executed while the tape is active (``with ComputationTape() as tape``)
    are appended in execution order; ``backward`` replays them in reverse.
    """

    def __init__(self):
        self.entries: List[TapeEntry] = []
        self.consumed = False
        self._token = None

    def __enter__(self) -> "ComputationTape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.entries)

    @staticmethod
    def active() -> Optional["ComputationTape"]:
        return _ACTIVE_TAPE.get()

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward_rule: BackwardRule) -> None:
        if self.consumed:
            raise TapeStateError(f"Cannot record '{op}' on a tape that has already been replayed")
        self.entries.append(TapeEntry(op, inputs, output, backward_rule))
        output.tape = self

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise TapeStateError("backward() already ran on this tape; record a new tape first")
        if loss.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self:
            raise ContractError("Loss is not connected to this computation tape")
        self.consumed = True

        loss._accumulate(np.ones_like(loss.data))
        # Every consumer of an output was recorded after it, so its gradient is
        # complete by the time the reverse sweep reaches its producer.
        for entry in reversed(self.entries):
            upstream = entry.output.grad
            if upstream is None:
                continue
            for tensor, grad in zip(entry.inputs, entry.backward_rule(upstream)):
                if grad is not None and tensor.requires_grad:
                    tensor._accumulate(grad)
        logger.debug(f"Replayed {len(self.entries)} tape entries")


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        raise ContractError("Loss is not connected to a computation tape")
    loss.tape.backward(loss)
