import logging
import numpy as np
from dataclasses import dataclass, field
from typing import Dict, Iterable
from duet.tensor import Array_T, Tensor

logger = logging.getLogger(__name__)


class OptimizerError(Exception):
    pass


@dataclass
class OptimizerState:
    """SGD with classical momentum and L2 weight decay.

    One momentum buffer per parameter, keyed by parameter name and created
    on the first step that sees the parameter.
    """
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    buffers: Dict[str, Array_T] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise OptimizerError(f'learning rate must be non-negative, got {self.learning_rate}')
        if not 0 <= self.momentum < 1:
            raise OptimizerError(f'momentum must lie in [0, 1), got {self.momentum}')
        if self.weight_decay < 0:
            raise OptimizerError(f'weight decay must be non-negative, got {self.weight_decay}')


def sgd_step(params: Iterable[Tensor], state: OptimizerState) -> None:
    """Apply one momentum step to every parameter from its `grad`.

    g <- grad + weight_decay * p
    v <- momentum * v + g
    p <- p - learning_rate * v

    Args:
        params: named parameters with populated gradients
        state: optimizer state, updated in place

    Raises:
        OptimizerError: a parameter is unnamed or has no gradient
    """
    for param in params:
        if param.name is None:
            raise OptimizerError(f'sgd_step needs named parameters, got {param!r}')
        if param.grad is None:
            raise OptimizerError(f'parameter "{param.name}" has no gradient; '
                                 f'run backward before sgd_step')
        g = param.grad + state.weight_decay * param.data
        buffer = state.buffers.get(param.name)
        if buffer is None:
            buffer = np.zeros_like(param.data)
        elif buffer.shape != param.shape:
            raise OptimizerError(f'momentum buffer for "{param.name}" has shape '
                                 f'{buffer.shape}, parameter has {param.shape}')
        buffer = state.momentum * buffer + g
        state.buffers[param.name] = buffer
        param.assign(param.data - state.learning_rate * buffer)


@dataclass(frozen=True)
class StepSchedule:
    """Piecewise-constant learning rate: base until `decay_epoch`, then base * gamma."""
    base_lr: float = 0.05
    decay_epoch: int = 40
    gamma: float = 0.1

    @classmethod
    def scaled(cls, base_lr: float, epochs: int, gamma: float = 0.1) -> 'StepSchedule':
        """Decay at two thirds of a run of `epochs`, keeping the 40-of-60 shape."""
        return cls(base_lr, max(1, round(2 * epochs / 3)), gamma)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a zero-based epoch index."""
        return self.base_lr * (self.gamma if epoch >= self.decay_epoch else 1.0)
