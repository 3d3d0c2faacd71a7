"""Confidence head and inference-time halting rules.

Three rules decide when to stop refining the newest token:

* ``threshold``   -- stop once ``q = sigmoid(head(h_last)) >= q_th``;
* ``convergence`` -- stop once ``||h_last^(b) - h_last^(b-1)||_2 <= eps``;
* ``cdf``         -- treat ``q`` as a hazard rate; stop once
  ``1 - prod_j (1 - q^(j)) >= q_th`` (survival accumulated in log space).

``fixed`` never stops early. Batched decisions are conservative: min of the
score over the batch for threshold/cdf, max of the change for convergence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor
from .errors import ConfigError, NumericError
from .nn import Module

HALT_MODES = ("threshold", "convergence", "cdf", "fixed")


class ConfidenceHead(Module):
    """Linear map from the last-token hidden state to one stopping logit."""

    def __init__(self, d_model: int, dtype=np.float32):
        self.w = Parameter(np.zeros(d_model, dtype))
        self.bias = Parameter(np.zeros(1, dtype))

    def __call__(self, h: Tensor) -> Tensor:
        """``h`` is ``[batch, T, d]``; returns logits ``[batch]``."""
        last = h[:, -1, :] if h.ndim == 3 else h
        return (last * self.w).sum(axis=-1) + self.bias

    def confidence(self, h_last) -> tuple[np.ndarray, np.ndarray]:
        """Raw logit and probability for last-token states ``[..., d]``."""
        x = np.asarray(h_last.data if isinstance(h_last, Tensor) else h_last)
        logit = x @ self.w.data + self.bias.data[0]
        return logit, sigmoid(logit)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return ag._np_sigmoid(z) if z.ndim else float(ag._np_sigmoid(z.reshape(1))[0])


@dataclass
class HaltPolicy:
    mode: str = "threshold"
    q_th: float = 0.6
    eps: float = 1.0
    max_budget: int = 8
    eval_interval: int = 1

    def __post_init__(self):
        if self.mode not in HALT_MODES:
            raise ConfigError(f"halt mode must be one of {HALT_MODES}, got {self.mode!r}")
        if not 0.0 < self.q_th < 1.0:
            raise ConfigError(f"q_th must lie in (0, 1), got {self.q_th}")
        if not self.eps >= 0.0:
            raise ConfigError(f"eps must be non-negative, got {self.eps}")
        if self.max_budget < (0 if self.mode == "fixed" else 1):
            raise ConfigError("max_budget must be >= 1 (>= 0 for a fixed depth)")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be >= 1")

    @classmethod
    def fixed(cls, depth: int) -> "HaltPolicy":
        return cls(mode="fixed", max_budget=depth)


def stop_threshold(q: float, q_th: float) -> bool:
    return bool(q >= q_th)


def stop_convergence(h_prev_last, h_last, eps: float) -> bool:
    d = np.asarray(h_last, dtype=np.float64) - np.asarray(h_prev_last, dtype=np.float64)
    return bool(np.linalg.norm(d) <= eps)


def log_survival(lambdas: Sequence[float]) -> float:
    lam = np.asarray(lambdas, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return float(np.sum(np.log1p(-lam)))


def stop_cdf(lambda_history: Sequence[float], q_th: float) -> tuple[bool, float]:
    """Cumulative exit probability after the given hazard sequence.

    A hazard of exactly 1 gives log-survival ``-inf`` and CDF 1 (stop now).
    """
    cdf = 1.0 - float(np.exp(log_survival(lambda_history)))
    return cdf >= q_th, cdf


def batched_stop(mode: str, stats, policy: HaltPolicy) -> bool:
    """Conservative batch decision over per-sequence statistics.

    ``stats`` are confidences for ``threshold``, CDF values for ``cdf`` and
    last-token changes for ``convergence``.
    """
    s = np.asarray(stats, dtype=np.float64).reshape(-1)
    if mode in ("threshold", "cdf"):
        return bool(s.min() >= policy.q_th)
    if mode == "convergence":
        return bool(s.max() <= policy.eps)
    if mode == "fixed":
        return False
    raise ConfigError(f"unknown halt mode {mode!r}")


@dataclass
class HaltTrace:
    q: list = field(default_factory=list)
    lam: list = field(default_factory=list)
    log_survival: list = field(default_factory=list)
    cdf: list = field(default_factory=list)
    deltas: list = field(default_factory=list)
    evaluated: list = field(default_factory=list)
    exit_depth: int = 0


class HaltMonitor:
    """Incremental stopping decision, one call per refinement depth.

    Used both by :func:`run_halting` and by the cached decoder, which only
    ever sees the newest token.
    """

    def __init__(self, policy: HaltPolicy, head: ConfidenceHead | None = None):
        self.policy = policy
        self.head = head
        self.trace = HaltTrace()
        self._log_s = None

    def update(self, b: int, h_last_prev: np.ndarray, h_last: np.ndarray) -> bool:
        """Feed last-token states ``[batch, d]`` before/after depth ``b`` (1-based)."""
        p = self.policy
        tr = self.trace
        if p.mode == "fixed":
            stop = b >= p.max_budget
        elif b % p.eval_interval == 0 or b >= p.max_budget:
            tr.evaluated.append(b)
            if p.mode == "convergence":
                delta = np.linalg.norm(
                    np.asarray(h_last, np.float64) - np.asarray(h_last_prev, np.float64), axis=-1
                )
                tr.deltas.append(delta)
                stat = delta
            else:
                _, q = self.head.confidence(h_last)
                q = np.atleast_1d(q)
                tr.q.append(q)
                if p.mode == "threshold":
                    stat = q
                else:
                    with np.errstate(divide="ignore"):
                        step = np.log1p(-q)
                    self._log_s = step if self._log_s is None else self._log_s + step
                    cdf = 1.0 - np.exp(self._log_s)
                    tr.lam.append(q)
                    tr.log_survival.append(self._log_s.copy())
                    tr.cdf.append(cdf)
                    stat = cdf
            stop = batched_stop(p.mode, stat, p) or b >= p.max_budget
        else:
            stop = False
        if stop:
            tr.exit_depth = b
        return stop


def run_halting(h0: Tensor, policy: HaltPolicy, model) -> tuple[Tensor, HaltTrace]:
    """Refine ``h0`` with ``model.refine`` until the policy says stop.

    Exits at depth in ``[1, max_budget]``. On a non-finite state the
    :class:`NumericError` is re-raised with ``.trace`` holding the partial trace.
    """
    monitor = HaltMonitor(policy, model.head)
    h = h0
    with ag.no_grad():
        for b in range(1, policy.max_budget + 1):
            try:
                h_next, _ = model.refine(h)
            except NumericError as err:
                err.trace = monitor.trace
                raise
            stop = monitor.update(b, h.data[:, -1, :], h_next.data[:, -1, :])
            h = h_next
            if stop:
                break
    return h, monitor.trace
