from __future__ import annotations

from dataclasses import dataclass
from dataclasses import field

import numpy as np

from graph_mil._autodiff import Matrix
from graph_mil._autodiff import Parameter
from graph_mil._errors import GraphMilShapeError


@dataclass
class AdamState:
    """
    Moments for one parameter group.

    Weight decay is the classic L2 form: ``weight_decay * p`` is added to the
    gradient before the moment updates.
    """

    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, Matrix] = field(default_factory=dict)
    v: dict[str, Matrix] = field(default_factory=dict)


def adam_step(params: list[Parameter], state: AdamState) -> None:
    """Apply one Adam update to ``params`` and zero their gradients."""
    state.t += 1
    bias1 = 1.0 - state.beta1**state.t
    bias2 = 1.0 - state.beta2**state.t

    for param in params:
        grad = param.grad + state.weight_decay * param.value
        m = state.m.get(param.name)
        v = state.v.get(param.name)
        if m is None or v is None:
            m = np.zeros_like(param.value)
            v = np.zeros_like(param.value)
        elif m.shape != param.value.shape:
            raise GraphMilShapeError(
                f"Adam moments for '{param.name}' have shape {m.shape}, "
                f"parameter has {param.value.shape}."
            )

        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad**2
        state.m[param.name] = m
        state.v[param.name] = v

        m_hat = m / bias1
        v_hat = v / bias2
        param.value = param.value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        param.zero_grad()


@dataclass
class ParamGroup:
    params: list[Parameter]
    state: AdamState


class Optimizer:
    """Adam over several parameter groups, each with its own lr and weight decay."""

    def __init__(self, groups: list[ParamGroup]) -> None:
        self.groups = groups
        self.steps = 0

    def step(self) -> None:
        for group in self.groups:
            adam_step(group.params, group.state)
        self.steps += 1

    def zero_grad(self) -> None:
        for group in self.groups:
            for param in group.params:
                param.zero_grad()
