"""Latent recursion, random deep supervision and the three training losses."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import Batch
from .errors import ConfigError, ContractError, NumericError, ShapeError
from .gate import GATES, GateParams, GateStepRecord
from .halting import ConfidenceHead
from .model import ModelConfig, Transformer
from .nn import Module
from .optim import AdamW

MONO_ACTIVATIONS = {
    "silu": ag.silu,
    "relu": ag.relu,
    "selu": ag.selu,
    "softplus": ag.softplus,
}

METRIC_COLUMNS = ("step", "depth", "loss_lm", "loss_mono", "loss_q", "conf_acc", "alpha_mean", "step_dist")


class LoopUSModel(Module):
    """Transformer + selective gate + confidence head.

    ``gate_kind`` picks the gate (``decay``, ``sigmoid`` or ``none``);
    ``monolithic=True`` loops the whole stack with an embedding-only encoder and
    a head-only decoder (the no-decomposition ablation).
    """

    def __init__(self, cfg: ModelConfig, gate_kind: str = "decay", monolithic: bool = False):
        if gate_kind not in GATES:
            raise ConfigError(f"gate_kind must be one of {sorted(GATES)}")
        self.transformer = Transformer(cfg)
        self.gate = GateParams(cfg.d_model)
        self.head = ConfidenceHead(cfg.d_model)
        self._gate_kind = gate_kind
        self._monolithic = monolithic
        if monolithic:
            self.transformer.set_bounds(0, cfg.n_layers)

    @property
    def cfg(self) -> ModelConfig:
        return self.transformer.cfg

    @property
    def gate_kind(self) -> str:
        return self._gate_kind

    def encode(self, tokens, pos0: int = 0, caches=None) -> Tensor:
        return self.transformer.encode(tokens, pos0, caches)

    def decode(self, h: Tensor, pos0: int = 0, caches=None) -> Tensor:
        return self.transformer.decode(h, pos0, caches)

    def refine(self, h: Tensor, pos0: int = 0, caches=None) -> tuple[Tensor, GateStepRecord]:
        """One gated loop iteration ``h -> G(M, h)``."""
        m_out = self.transformer.reason(h, pos0, caches)
        return GATES[self._gate_kind](h, m_out, self.gate)

    def forward(self, tokens, depth: int) -> Tensor:
        """Uncached looped forward at a fixed depth; returns logits."""
        h = self.encode(tokens)
        for _ in range(depth):
            h, _ = self.refine(h)
        return self.decode(h)


@dataclass
class LoopConfig:
    B: int = 20
    K: int = 5
    detach_between_steps: bool = True
    tbptt_window: int | None = None
    w_lm: float = 1.0
    w_mono: float = 1.0
    w_q: float = 1.0
    mono_act: str = "silu"
    # accepted for config parity with the reference recipe; not used by training
    train_stop_threshold: float = 0.55
    train_stop_mode: str = "all"

    def __post_init__(self):
        if self.B < 1:
            raise ConfigError("B must be >= 1")
        # K = 0 is a diagnostic mode: the loop runs, nothing is updated
        if not 0 <= self.K <= self.B:
            raise ConfigError(f"need 0 <= K <= B, got K={self.K}, B={self.B}")
        if self.tbptt_window is not None and self.tbptt_window < 1:
            raise ConfigError("tbptt_window must be >= 1")
        if self.mono_act not in MONO_ACTIVATIONS:
            raise ConfigError(f"mono_act must be one of {sorted(MONO_ACTIVATIONS)}")


# ---------------------------------------------------------------------------
# sampling and losses
# ---------------------------------------------------------------------------


def sample_supervision(B: int, K: int, rng: np.random.Generator) -> list[int]:
    """K distinct depths from ``range(B)``, uniformly without replacement, sorted."""
    if K > B or K < 0:
        raise ContractError(f"cannot sample K={K} depths out of B={B}")
    return sorted(int(i) for i in rng.choice(B, size=K, replace=False))


def lm_loss(logits: Tensor, batch: Batch) -> Tensor:
    """Mean next-token cross-entropy over non-padding targets."""
    if logits.shape[:2] != batch.tokens.shape:
        raise ContractError(f"logits {logits.shape} do not match tokens {batch.tokens.shape}")
    return ag.cross_entropy(logits, batch.targets, batch.mask)


def mono_loss(lm_after: Tensor, lm_before: Tensor, act: str = "silu") -> Tensor:
    """``act(after - before)``: penalise updates that raise the LM loss."""
    return MONO_ACTIVATIONS[act](lm_after - lm_before)


def confidence_target(pred_ids, target_ids, valid_mask):
    """Per-sample token accuracy over valid positions (1-D input -> float)."""
    pred = np.asarray(pred_ids)
    tgt = np.asarray(target_ids)
    valid = np.asarray(valid_mask, dtype=bool)
    if not (pred.shape == tgt.shape == valid.shape):
        raise ContractError(f"shape mismatch: {pred.shape}, {tgt.shape}, {valid.shape}")
    n_valid = valid.sum(axis=-1)
    if np.any(n_valid == 0):
        raise ContractError("a sequence has no valid positions")
    acc = ((pred == tgt) & valid).sum(axis=-1) / n_valid
    return float(acc) if pred.ndim == 1 else acc.astype(np.float64)


def q_loss(q_logit: Tensor, q_target) -> Tensor:
    """Binary cross-entropy of the stopping logit against a soft target."""
    t = np.asarray(q_target, dtype=np.float64)
    if np.any((t < 0) | (t > 1)):
        raise ContractError("q_target must lie in [0, 1]")
    return ag.bce_with_logits(q_logit, t.astype(q_logit.dtype).reshape(q_logit.shape))


def per_sample_ce(logits: np.ndarray, batch: Batch) -> np.ndarray:
    """Surrogate energy ``E_x(h)``: per-sequence mean CE, computed in float64."""
    z = logits.astype(np.float64)
    m = z.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True)))[..., 0]
    picked = np.take_along_axis(z, batch.targets[..., None], axis=-1)[..., 0]
    w = batch.mask
    return ((lse - picked) * w).sum(axis=-1) / w.sum(axis=-1)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class DepthReport:
    depth: int
    loss_lm: float
    loss_mono: float
    loss_q: float
    conf_acc: float
    alpha_mean: float
    step_dist: float
    grad_norm: float = float("nan")
    token_acc: float = float("nan")

    def row(self, step: int) -> list:
        return [step, self.depth, self.loss_lm, self.loss_mono, self.loss_q, self.conf_acc, self.alpha_mean, self.step_dist]


@dataclass
class TrainStepReport:
    supervised: list[int]
    depths: list[DepthReport] = field(default_factory=list)
    wall_time: float = 0.0
    tape_len: int = 0

    def mean(self, key: str) -> float:
        vals = [getattr(d, key) for d in self.depths]
        return float(np.mean(vals)) if vals else float("nan")


def _supervised_losses(model: LoopUSModel, h_prev: Tensor, batch: Batch, cfg: LoopConfig):
    """Gated step from ``h_prev`` plus LM, monotonicity and confidence losses."""
    h_new, rec = model.refine(h_prev)
    q_logit = model.head(h_new)
    logits = model.decode(h_new)
    logits_prev = model.decode(h_prev)
    l_lm = lm_loss(logits, batch)
    l_prev = lm_loss(logits_prev, batch)
    l_mono = mono_loss(l_lm, l_prev, cfg.mono_act)
    acc = confidence_target(logits.data.argmax(-1), batch.targets, batch.mask)
    l_q = q_loss(q_logit, acc)
    total = l_lm * cfg.w_lm + l_mono * cfg.w_mono + l_q * cfg.w_q
    q_prob = 1.0 / (1.0 + np.exp(-q_logit.data.astype(np.float64)))
    report = DepthReport(
        depth=-1,
        loss_lm=l_lm.item(),
        loss_mono=l_mono.item(),
        loss_q=l_q.item(),
        conf_acc=float(np.mean((q_prob >= 0.5) == (acc >= 0.5))),
        alpha_mean=rec.alpha_mean,
        step_dist=rec.step_norm,
        token_acc=float(acc.mean()),
    )
    return h_new, total, report


def _abort(err: NumericError, step_desc: str):
    raise NumericError(err.primitive, f"{step_desc}; training aborted") from err


def train_step(
    model: LoopUSModel,
    batch: Batch,
    opt: AdamW,
    cfg: LoopConfig,
    rng: np.random.Generator,
    lr: float | None = None,
    supervised: list[int] | None = None,
) -> TrainStepReport:
    """One batch of random deep supervision.

    Unrolls ``cfg.B`` gated steps. At each sampled depth the step is recorded,
    the three losses are back-propagated, the optimizer steps and the state is
    detached; other depths run without recording. One update per sampled depth.
    """
    t0 = time.perf_counter()
    S = sample_supervision(cfg.B, cfg.K, rng) if supervised is None else sorted(supervised)
    report = TrainStepReport(supervised=S)
    todo = set(S)
    b = -1
    try:
        if 0 in todo:
            h = model.encode(batch.tokens)
        else:
            with ag.no_grad():
                h = model.encode(batch.tokens)
        for b in range(cfg.B):
            if b in todo:
                h_new, loss, rep = _supervised_losses(model, h, batch, cfg)
                tape = ag.backward(loss)
                report.tape_len = max(report.tape_len, len(tape))
                rep.depth = b
                rep.grad_norm = opt.step(lr)
                opt.zero_grad()
                report.depths.append(rep)
                h = ag.detach(h_new)
            else:
                with ag.no_grad():
                    h, _ = model.refine(h)
                h = ag.detach(h)
    except NumericError as err:
        _abort(err, f"depth {b}, supervised {S}")
    report.wall_time = time.perf_counter() - t0
    return report


def tbptt_train_step(
    model: LoopUSModel,
    batch: Batch,
    opt: AdamW,
    cfg: LoopConfig,
    window: int,
    lr: float | None = None,
) -> TrainStepReport:
    """Full unroll with gradients, truncated every ``window`` steps.

    Every depth contributes its three losses to one summed objective and a
    single optimizer update follows. Windows are cut apart by the detach, so
    each window is back-propagated as soon as it closes (gradients accumulate)
    and its graph is freed; ``tape_len`` is the largest window graph.
    ``window >= B`` is full back-propagation.
    """
    if window < 1:
        raise ContractError("window must be >= 1")
    t0 = time.perf_counter()
    report = TrainStepReport(supervised=list(range(cfg.B)))
    try:
        h = model.encode(batch.tokens)
        pending = None
        for b in range(cfg.B):
            h_new, loss, rep = _supervised_losses(model, h, batch, cfg)
            rep.depth = b
            report.depths.append(rep)
            pending = loss if pending is None else pending + loss
            if (b + 1) % window == 0 or b == cfg.B - 1:
                tape = ag.backward(pending)
                report.tape_len = max(report.tape_len, len(tape))
                pending = None
                h = ag.detach(h_new)
            else:
                h = h_new
    except NumericError as err:
        _abort(err, f"tbptt window {window}")
    norm = opt.step(lr)
    opt.zero_grad()
    for rep in report.depths:
        rep.grad_norm = norm
    report.wall_time = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class LoopTrajectory:
    """States ``h^(0..d)`` and per-step diagnostics from a gradient-free unroll.

    ``step_distances[b]`` holds per-sample Frobenius norms of
    ``h^(b+1) - h^(b)``; ``confidences[b]`` the head's probability at ``h^(b)``.
    """

    states: list[np.ndarray]
    alphas: list[float] = field(default_factory=list)
    step_distances: list[np.ndarray] = field(default_factory=list)
    confidences: list[np.ndarray] = field(default_factory=list)
    energies: list[np.ndarray] | None = None
    diverged: bool = False

    @property
    def depth(self) -> int:
        return len(self.states) - 1

    def mean_step_distance(self) -> np.ndarray:
        return np.array([d.mean() for d in self.step_distances])


def unroll_eval(model: LoopUSModel, h0, depth: int, batch: Batch | None = None) -> LoopTrajectory:
    """Recurse ``depth`` gated steps without recording gradients.

    Depth may exceed the training budget. With ``batch`` given, the surrogate
    energy (per-sample CE of the decoder read-out) is recorded at every state.
    A non-finite state sets ``diverged`` and stops the recursion.
    """
    if depth < 0:
        raise ContractError("depth must be >= 0")
    if not isinstance(h0, Tensor):
        h0 = Tensor(np.asarray(h0))
    traj = LoopTrajectory(states=[h0.data])
    if batch is not None:
        traj.energies = []
    with ag.no_grad():
        h = h0
        try:
            for b in range(depth + 1):
                _, q = model.head.confidence(h.data[:, -1, :])
                traj.confidences.append(np.atleast_1d(q))
                if batch is not None:
                    traj.energies.append(per_sample_ce(model.decode(h).data, batch))
                if b == depth:
                    break
                h_next, rec = model.refine(h)
                diff = (h_next.data - h.data).reshape(h.shape[0], -1).astype(np.float64)
                traj.step_distances.append(np.linalg.norm(diff, axis=1))
                traj.alphas.append(rec.alpha_mean)
                traj.states.append(h_next.data)
                h = h_next
        except NumericError:
            traj.diverged = True
    return traj


def encode_no_grad(model: LoopUSModel, tokens) -> Tensor:
    with ag.no_grad():
        return model.encode(tokens)


def eval_depth(model: LoopUSModel, batch: Batch, depth: int) -> dict:
    """Validation CE and answer accuracy at a fixed loop depth."""
    with ag.no_grad():
        logits = model.forward(batch.tokens, depth).data
    ce = float(per_sample_ce(logits, batch).mean())
    pred = logits.argmax(-1)
    mask = batch.answer_mask if batch.answer_mask is not None else batch.mask
    acc = float(((pred == batch.targets) & mask).sum() / mask.sum())
    return {"depth": depth, "val_ce": ce, "task_acc": acc}
