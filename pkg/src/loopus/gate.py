"""Input-dependent decay gate between loop iterations.

Given the current state ``h`` and the reasoning block's proposal ``m``::

    delta = m - h
    step  = softplus(delta @ w_delta + b_delta)      # per token, per channel
    alpha = exp(step * A),  A = -exp(a_log) < 0      # alpha in (0, 1)
    h'    = alpha * m + (1 - alpha) * h

so ``h' - h = alpha * (m - h)``: a diagonally preconditioned relaxation step
toward a fixed point of the block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor
from .errors import ShapeError
from .nn import Module


class GateParams(Module):
    """``w_delta`` [h, h], ``b_delta`` [h], ``a_log`` [h] with ``A = -exp(a_log)``.

    Initialised neutral: ``w_delta = 0``, ``b_delta = 0`` (so the step size is
    ``softplus(0) = ln 2``) and ``A = -1``, giving ``alpha = 0.5`` everywhere.
    """

    def __init__(self, d_model: int, dtype=np.float32):
        self.w_delta = Parameter(np.zeros((d_model, d_model), dtype))
        self.b_delta = Parameter(np.zeros(d_model, dtype))
        self.a_log = Parameter(np.zeros(d_model, dtype))

    @property
    def decay(self) -> np.ndarray:
        """The (always negative) channel-wise decay coefficient A."""
        return -np.exp(self.a_log.data)


@dataclass
class GateStepRecord:
    alpha: np.ndarray
    delta_norm: float
    step_norm: float

    @property
    def alpha_mean(self) -> float:
        return float(self.alpha.mean())


def _check(h: Tensor, m_out: Tensor) -> None:
    if h.shape != m_out.shape:
        raise ShapeError(f"gate: state {h.shape} vs proposal {m_out.shape}")


def _interpolate(h: Tensor, m_out: Tensor, alpha: Tensor) -> Tensor:
    # h + alpha * (m - h): keeps h' == h exactly when m == h
    return h + alpha * (m_out - h)


def _record(h, m_out, h_next, alpha) -> GateStepRecord:
    return GateStepRecord(
        alpha=alpha.data,
        delta_norm=float(np.linalg.norm(m_out.data - h.data)),
        step_norm=float(np.linalg.norm(h_next.data - h.data)),
    )


def decay_alpha(delta: Tensor, params: GateParams) -> Tensor:
    step = ag.softplus(delta @ params.w_delta + params.b_delta)
    decay = ag.neg(ag.exp(params.a_log))
    return ag.exp(step * decay)


def gate_step(h: Tensor, m_out: Tensor, params: GateParams) -> tuple[Tensor, GateStepRecord]:
    """Selective decay gate; returns the next state and a step record."""
    _check(h, m_out)
    alpha = decay_alpha(m_out - h, params)
    h_next = _interpolate(h, m_out, alpha)
    return h_next, _record(h, m_out, h_next, alpha)


def sigmoid_gate_step(h: Tensor, m_out: Tensor, params: GateParams) -> tuple[Tensor, GateStepRecord]:
    """Ablation variant: ``alpha = sigmoid(delta @ w_delta + b_delta)``."""
    _check(h, m_out)
    alpha = ag.sigmoid((m_out - h) @ params.w_delta + params.b_delta)
    h_next = _interpolate(h, m_out, alpha)
    return h_next, _record(h, m_out, h_next, alpha)


def gate_bypass(h: Tensor, m_out: Tensor, params: GateParams | None = None) -> tuple[Tensor, GateStepRecord]:
    """No gate: ``alpha = 1``, the proposal replaces the state."""
    _check(h, m_out)
    alpha = Tensor(np.ones_like(h.data))
    return m_out, _record(h, m_out, m_out, alpha)


GATES = {
    "decay": gate_step,
    "sigmoid": sigmoid_gate_step,
    "none": gate_bypass,
}
