"""Plain SGD on named parameter tensors.

Two entry points: SgdState/sgd_step for configured training optimizers
(learning rate must be positive, optional momentum), and apply_sgd for the
bare update rule used inside adaptation loops, where a zero learning rate is
a meaningful no-op.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .tensor import Tensor


class OptimError(RuntimeError):
    pass


@dataclass
class SgdState:
    learning_rate: float
    momentum: float = 0.0
    _velocity: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.momentum < 0:
            raise ValueError(f"momentum must be >= 0, got {self.momentum}")


def sgd_step(params, state: SgdState) -> None:
    """In-place descent step on (name, tensor) pairs; clears grads after use."""
    for name, p in params:
        if p.grad is None:
            raise OptimError(f"sgd_step: parameter {name!r} has no gradient")
        g = p.grad.data
        if state.momentum > 0:
            v = state._velocity.get(name)
            v = g if v is None else state.momentum * v + g
            state._velocity[name] = v
        else:
            v = g
        p.data -= state.learning_rate * v
        p.grad = None


def apply_sgd(params, lr: float) -> int:
    """Bare update p -= lr * grad; returns the number of tensors updated.

    lr == 0 skips the arithmetic entirely so parameter bits are untouched.
    """
    if lr < 0:
        raise ValueError(f"apply_sgd: negative learning rate {lr}")
    updated = 0
    for name, p in params:
        if lr == 0.0:
            p.grad = None
            continue
        if p.grad is None:
            raise OptimError(f"apply_sgd: parameter {name!r} has no gradient")
        p.data -= lr * p.grad.data
        p.grad = None
        updated += 1
    return updated
