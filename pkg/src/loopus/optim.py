"""AdamW over a single flat parameter buffer, plus a warmup+cosine schedule."""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from .autograd import Tensor


def cosine_lr(step: int, base_lr: float, warmup: int, total: int, min_ratio: float = 0.1) -> float:
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(total - warmup, 1)
    progress = min(max(step - warmup, 0) / span, 1.0)
    floor = base_lr * min_ratio
    return floor + 0.5 * (base_lr - floor) * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay.

    On construction every parameter's storage is moved into one contiguous
    buffer (parameters become views), so an update is a handful of vectorised
    numpy calls regardless of how many tensors the model has. Weight decay is
    applied to matrices only.
    """

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float = 3e-4,
        betas: tuple[float, float] = (0.9, 0.95),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
        clip_norm: float | None = 1.0,
    ):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        dtypes = {p.dtype for p in self.params.values()}
        if len(dtypes) != 1:
            raise ValueError(f"parameters must share one dtype, got {dtypes}")
        dtype = dtypes.pop()
        sizes = [p.data.size for p in self.params.values()]
        self.flat = np.empty(sum(sizes), dtype)
        self._slices = {}
        decay_mask = np.zeros(sum(sizes), dtype)
        off = 0
        for (name, p), n in zip(self.params.items(), sizes):
            self.flat[off : off + n] = p.data.ravel()
            p.data = self.flat[off : off + n].reshape(p.shape)
            self._slices[name] = slice(off, off + n)
            if p.ndim >= 2:
                decay_mask[off : off + n] = 1
            off += n
        self._decay = decay_mask
        self.m = np.zeros_like(self.flat)
        self.v = np.zeros_like(self.flat)
        self.t = 0

    def flat_grad(self) -> np.ndarray:
        parts = [
            p.grad.ravel() if p.grad is not None else np.zeros(p.data.size, self.flat.dtype)
            for p in self.params.values()
        ]
        return np.concatenate(parts).astype(self.flat.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> float:
        """Apply one update from ``.grad``; returns the pre-clip gradient norm."""
        lr = self.lr if lr is None else lr
        g = self.flat_grad()
        norm = float(np.sqrt(np.dot(g.astype(np.float64), g)))
        if self.clip_norm is not None and norm > self.clip_norm:
            g = g * (self.clip_norm / (norm + 1e-12))
        b1, b2 = self.betas
        self.t += 1
        self.m *= b1
        self.m += (1 - b1) * g
        self.v *= b2
        self.v += (1 - b2) * g * g
        mhat = self.m / (1 - b1**self.t)
        vhat = self.v / (1 - b2**self.t)
        if self.weight_decay:
            self.flat -= lr * self.weight_decay * self._decay * self.flat
        self.flat -= lr * mhat / (np.sqrt(vhat) + self.eps)
        return norm

    def state_dict(self) -> dict[str, np.ndarray]:
        return {"m": self.m.copy(), "v": self.v.copy(), "t": np.array([self.t], np.float32)}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        self.m[...] = state["m"]
        self.v[...] = state["v"]
        self.t = int(np.asarray(state["t"]).reshape(-1)[0])
