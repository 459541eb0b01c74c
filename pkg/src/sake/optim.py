"""Adam optimizer with an exponential learning-rate schedule.

The schedule interpolates geometrically from ``lr_initial`` at step 0 to
``lr_final`` at ``total_steps``, evaluated per optimizer step. Weight
decay is classic L2, added to the gradient before the moment updates;
parameters named in ``decay_exempt`` (bias terms, by default) skip it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import ContractViolation
from .tensor import Tensor, backward


@dataclass
class OptimizerState:
    """Adam state for a named parameter set."""

    lr_initial: float
    lr_final: float
    total_steps: int
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ContractViolation("Adam betas must lie strictly in (0, 1)")
        if self.epsilon <= 0.0:
            raise ContractViolation("epsilon must be positive")
        if self.lr_final > self.lr_initial:
            raise ContractViolation("lr_final must not exceed lr_initial")
        if self.total_steps < 1:
            raise ContractViolation("total_steps must be positive")

    def learning_rate(self, step: int | None = None) -> float:
        """lr(step) = lr_initial * (lr_final / lr_initial) ** (step / total_steps)."""
        t = self.step_count if step is None else step
        if self.lr_final == self.lr_initial:
            return self.lr_initial
        return self.lr_initial * (self.lr_final / self.lr_initial) ** (
            t / self.total_steps)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: OptimizerState,
              decay_exempt: frozenset[str] | set[str] = frozenset()) -> None:
    """One bias-corrected Adam update over a named parameter dict, in place.

    A parameter whose gradient is identically zero and whose moments are
    still zero is left untouched entirely (no decay, no moment update),
    so registered-but-unused parameters never drift.
    """
    if state.step_count >= state.total_steps:
        raise ContractViolation(
            f"optimizer exhausted: step {state.step_count} of {state.total_steps}")
    lr = state.learning_rate()
    t = state.step_count + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ContractViolation(
                f"gradient shape {g.shape} != parameter shape {p.data.shape} "
                f"for '{name}'")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
            state.first_moment[name] = m
            state.second_moment[name] = v
        if not (g.any() or m.any() or v.any()):
            continue
        if state.weight_decay and name not in decay_exempt:
            g = g + state.weight_decay * p.data
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    state.step_count = t


def gradient_check(loss_fn: Callable[[], Tensor],
                   params: Mapping[str, Tensor] | Iterable[Tensor],
                   h: float = 1e-5) -> float:
    """Max relative error of analytic gradients vs central finite differences.

    ``loss_fn`` rebuilds the scalar loss from the current parameter
    values on every call; parameters must be float64 so the differences
    resolve. Relative error uses max(|analytic|, |numeric|, 1e-12) as
    denominator.
    """
    if isinstance(params, Mapping):
        tensors = list(params.values())
    else:
        tensors = list(params)
    for p in tensors:
        if p.data.dtype != np.float64:
            raise ContractViolation("gradient_check requires float64 parameters")
        p.zero_grad()
    loss = loss_fn()
    backward(loss, tensors)
    analytic = [p.grad.copy() for p in tensors]

    worst = 0.0
    for p, ga in zip(tensors, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_fn().item()
            flat[i] = orig - h
            f_minus = loss_fn().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(gflat[i]), abs(numeric), 1e-12)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst
