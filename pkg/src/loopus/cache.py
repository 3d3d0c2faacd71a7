"""Per-depth KV-cached autoregressive decoding for the looped model.

The cache state is ``(C_enc, [C_rea[1], ..., C_rea[B]], C_dec, s_t)``. Every
refinement depth owns its cache: the same reasoning weights see a different
latent state at each depth, so their keys/values must not be mixed.

With adaptive halting a token may exit at depth ``e`` while a later token
needs ``b > e``. The missing depth-``b`` entries are then backfilled by
running the refinement for those positions from their stored depth-``b-1``
state, which keeps exactly the semantics of the unrolled loop. Positions
present in ``C_rea[b]`` therefore always form a prefix, and cache lengths are
non-increasing in ``b``.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import CacheInvariantError, ContractError
from .halting import HaltMonitor, HaltPolicy


class LayerKV:
    """Keys/values ``[batch, heads, s, d_head]`` for one attention layer.

    Storage grows geometrically so appends are amortised O(1) copies.
    """

    def __init__(self):
        self._k = None
        self._v = None
        self.length = 0

    def append(self, k: np.ndarray, v: np.ndarray) -> None:
        n = k.shape[2]
        need = self.length + n
        if self._k is None or need > self._k.shape[2]:
            cap = max(need, 2 * (0 if self._k is None else self._k.shape[2]), 16)
            shape = k.shape[:2] + (cap,) + k.shape[3:]
            nk, nv = np.empty(shape, k.dtype), np.empty(shape, v.dtype)
            if self.length:
                nk[:, :, : self.length] = self._k[:, :, : self.length]
                nv[:, :, : self.length] = self._v[:, :, : self.length]
            self._k, self._v = nk, nv
        self._k[:, :, self.length : need] = k
        self._v[:, :, self.length : need] = v
        self.length = need

    def view(self) -> tuple[np.ndarray, np.ndarray]:
        return self._k[:, :, : self.length], self._v[:, :, : self.length]

    @property
    def capacity(self) -> int:
        return 0 if self._k is None else self._k.shape[2]


class KVCache:
    """One :class:`LayerKV` per attention layer of a stage."""

    def __init__(self, n_layers: int):
        self.layers = [LayerKV() for _ in range(n_layers)]

    @property
    def length(self) -> int:
        lengths = {l.length for l in self.layers}
        if len(lengths) > 1:
            raise CacheInvariantError(f"layers of one cache disagree on length: {sorted(lengths)}")
        return lengths.pop() if lengths else 0


@dataclass
class CacheState:
    """Encoder, per-depth reasoning and decoder caches plus bookkeeping.

    ``rea[b - 1]`` is the cache of refinement depth ``b``; entries stay
    ``None`` until that depth is first used. ``frontier`` holds each
    position's deepest computed latent state and ``depth_of`` that depth;
    ``exit_depth`` is the depth whose state fed the decoder.
    """

    enc: KVCache
    rea: list
    dec: KVCache
    seen: int = 0
    tokens: np.ndarray | None = None
    frontier: np.ndarray | None = None
    depth_of: list = field(default_factory=list)
    exit_depth: list = field(default_factory=list)

    def rea_lengths(self) -> list[int]:
        return [0 if c is None else c.length for c in self.rea]

    def check(self) -> None:
        """Raise :class:`CacheInvariantError` if the caches are out of sync."""
        s = self.seen
        if self.enc.length != s or self.dec.length != s:
            raise CacheInvariantError(f"enc/dec lengths {self.enc.length}/{self.dec.length} != s_t={s}")
        lens = self.rea_lengths()
        if any(l > s for l in lens) or any(a < b for a, b in zip(lens, lens[1:])):
            raise CacheInvariantError(f"reasoning cache lengths {lens} invalid for s_t={s}")
        if len(self.depth_of) != s or (self.tokens is not None and self.tokens.shape[1] != s):
            raise CacheInvariantError("position bookkeeping out of sync")
        for b, l in enumerate(lens, start=1):
            if l != sum(d >= b for d in self.depth_of):
                raise CacheInvariantError(f"C_rea[{b}] holds {l} entries, expected positions with depth >= {b}")


class CachedDecoder:
    """Prefill / decode / crop against a :class:`LoopUSModel`-like object."""

    def __init__(self, model, max_depth: int = 8, window: int | None = None):
        self.model = model
        self.max_depth = max_depth
        self.window = window or model.cfg.context_len
        tr = model.transformer
        self._n_enc = tr.bounds[0]
        self._n_rea = tr.n_reason_layers
        self._n_dec = tr.n_decoder_layers

    # -- state helpers ---------------------------------------------------
    def new_state(self) -> CacheState:
        return CacheState(KVCache(self._n_enc), [None] * self.max_depth, KVCache(self._n_dec))

    def _rea(self, state: CacheState, b: int) -> KVCache:
        if b > self.max_depth:
            raise ContractError(f"depth {b} exceeds cache budget {self.max_depth}")
        if state.rea[b - 1] is None:
            state.rea[b - 1] = KVCache(self._n_rea)
        return state.rea[b - 1]

    def _policy(self, depth_or_policy) -> HaltPolicy:
        if isinstance(depth_or_policy, HaltPolicy):
            pol = depth_or_policy
        else:
            pol = HaltPolicy.fixed(int(depth_or_policy))
        if pol.max_budget > self.max_depth:
            raise ContractError(f"policy budget {pol.max_budget} exceeds cache budget {self.max_depth}")
        return pol

    def _backfill(self, state: CacheState, b: int, upto: int) -> None:
        """Extend ``C_rea[b]`` to ``upto`` positions from stored depth-(b-1) states."""
        cache = self._rea(state, b)
        start = cache.length
        if start >= upto:
            return
        if any(d != b - 1 for d in state.depth_of[start:upto]):
            raise CacheInvariantError(f"cannot backfill depth {b}: positions {start}..{upto} not at depth {b - 1}")
        h = Tensor(state.frontier[:, start:upto])
        h_next, _ = self.model.refine(h, start, cache.layers)
        state.frontier[:, start:upto] = h_next.data
        for p in range(start, upto):
            state.depth_of[p] = b

    def _loop(self, state: CacheState, h: Tensor, pos0: int, policy: HaltPolicy):
        """Refine the chunk at ``pos0`` until the policy stops; returns (h, exit depth)."""
        monitor = HaltMonitor(policy, self.model.head)
        b = 0
        for b in range(1, policy.max_budget + 1):
            self._backfill(state, b, pos0)
            h_next, _ = self.model.refine(h, pos0, self._rea(state, b).layers)
            stop = monitor.update(b, h.data[:, -1, :], h_next.data[:, -1, :])
            h = h_next
            if stop:
                break
        return h, b, monitor.trace

    # -- public API --------------------------------------------------------
    def prefill(self, prompt, depth_or_policy=4) -> tuple[np.ndarray, CacheState]:
        """Process the whole prompt once, populating every cache.

        Returns next-token logits ``[batch, V]`` for the last position.
        """
        prompt = np.atleast_2d(np.asarray(prompt, dtype=np.int64))
        if prompt.shape[1] > self.window:
            raise ContractError(f"prompt length {prompt.shape[1]} exceeds window {self.window}")
        if prompt.shape[1] == 0:
            raise ContractError("empty prompt")
        policy = self._policy(depth_or_policy)
        state = self.new_state()
        with ag.no_grad():
            h = self.model.encode(prompt, 0, state.enc.layers)
            state.tokens = prompt.copy()
            state.frontier = np.empty_like(h.data)
            h, b, trace = self._loop(state, h, 0, policy)
            state.frontier[...] = h.data
            n = prompt.shape[1]
            state.depth_of = [b] * n
            state.exit_depth = [b] * n
            logits = self.model.decode(h, 0, state.dec.layers).data[:, -1, :]
        state.seen = n
        state.last_trace = trace
        return logits, state

    def decode_step(self, token, state: CacheState, depth_or_policy=4) -> tuple[np.ndarray, CacheState]:
        """Advance one token; the new query attends all cached prefix entries."""
        policy = self._policy(depth_or_policy)
        token = np.asarray(token, dtype=np.int64).reshape(-1, 1)
        if state.seen >= self.window:
            raise ContractError("window full; crop before appending")
        state.check()
        pos = state.seen
        with ag.no_grad():
            h = self.model.encode(token, pos, state.enc.layers)
            h, b, trace = self._loop(state, h, pos, policy)
            logits = self.model.decode(h, pos, state.dec.layers).data[:, -1, :]
        state.frontier = np.concatenate([state.frontier, h.data], axis=1)
        state.tokens = np.concatenate([state.tokens, token], axis=1)
        state.depth_of.append(b)
        state.exit_depth.append(b)
        state.seen = pos + 1
        state.last_trace = trace
        return logits, state

    def crop(self, state: CacheState, keep: int) -> CacheState:
        """Keep the most recent ``keep`` positions in every cache; ``s_t = keep``.

        The retained window is re-materialised from its tokens at positions
        ``0..keep-1`` (each position to its recorded depths), so deeper-layer
        entries no longer depend on dropped tokens and the next token sits at
        position ``s_t``.
        """
        if not 0 < keep <= state.seen:
            raise ContractError(f"keep must be in (0, {state.seen}], got {keep}")
        if keep == state.seen:
            return state
        lo = state.seen - keep
        tokens = state.tokens[:, lo:]
        depth_of = state.depth_of[lo:]
        exit_depth = state.exit_depth[lo:]
        new = self.new_state()
        with ag.no_grad():
            h = self.model.encode(tokens, 0, new.enc.layers)
            frontier = h.data.copy()
            dec_in = np.empty_like(frontier)
            for p, e in enumerate(exit_depth):
                if e == 0:
                    dec_in[:, p] = frontier[:, p]
            for b in range(1, max(depth_of) + 1):
                n_b = sum(d >= b for d in depth_of)
                hb = Tensor(frontier[:, :n_b])
                out, _ = self.model.refine(hb, 0, self._rea(new, b).layers)
                frontier[:, :n_b] = out.data
                for p in range(n_b):
                    if exit_depth[p] == b:
                        dec_in[:, p] = frontier[:, p]
            self.model.decode(Tensor(dec_in), 0, new.dec.layers)
        new.tokens = tokens.copy()
        new.frontier = frontier
        new.depth_of = list(depth_of)
        new.exit_depth = list(exit_depth)
        new.seen = keep
        new.check()
        return new


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


@dataclass
class GenerationResult:
    tokens: np.ndarray
    exit_depths: list[int]
    latencies: list[float]
    logits: list[np.ndarray] = field(default_factory=list)

    @property
    def sec_per_token(self) -> float:
        return float(np.mean(self.latencies)) if self.latencies else 0.0


def _pick(logits: np.ndarray, sampling: str, temperature: float, rng) -> np.ndarray:
    if sampling == "greedy":
        return logits.argmax(-1)
    if sampling == "temperature":
        z = logits.astype(np.float64) / max(temperature, 1e-8)
        p = ag._np_softmax(z, -1)
        return np.array([rng.choice(p.shape[-1], p=row) for row in p])
    raise ContractError(f"unknown sampling mode {sampling!r}")


def generate(
    model,
    prompt,
    max_new: int,
    policy: HaltPolicy | int = 4,
    sampling: str = "greedy",
    temperature: float = 1.0,
    rng: np.random.Generator | None = None,
    window: int | None = None,
    keep_logits: bool = False,
) -> GenerationResult:
    """KV-cached autoregressive generation with per-token halting."""
    prompt = np.atleast_2d(np.asarray(prompt, dtype=np.int64))
    budget = policy.max_budget if isinstance(policy, HaltPolicy) else int(policy)
    dec = CachedDecoder(model, max_depth=max(budget, 1), window=window)
    rng = rng or np.random.default_rng(0)
    out = np.zeros((prompt.shape[0], 0), np.int64)
    res = GenerationResult(out, [], [])
    if max_new <= 0:
        return res
    t0 = time.perf_counter()
    logits, state = dec.prefill(prompt, policy)
    depth = state.exit_depth[-1]
    new_tokens = []
    for i in range(max_new):
        if keep_logits:
            res.logits.append(logits)
        nxt = _pick(logits, sampling, temperature, rng)
        new_tokens.append(nxt)
        res.exit_depths.append(depth)
        res.latencies.append(time.perf_counter() - t0)
        if i == max_new - 1:
            break
        t0 = time.perf_counter()
        if state.seen >= dec.window:
            state = dec.crop(state, dec.window - 1)
        logits, state = dec.decode_step(nxt, state, policy)
        depth = state.exit_depth[-1]
    res.tokens = np.stack(new_tokens, axis=1)
    return res


def generate_uncached(
    model, prompt, max_new: int, depth: int, window: int | None = None, keep_logits: bool = False
) -> GenerationResult:
    """Greedy reference: recompute the looped forward over the last ``window`` tokens."""
    prompt = np.atleast_2d(np.asarray(prompt, dtype=np.int64))
    window = window or model.cfg.context_len
    seq = prompt
    res = GenerationResult(np.zeros((prompt.shape[0], 0), np.int64), [], [])
    new_tokens = []
    for _ in range(max_new):
        t0 = time.perf_counter()
        with ag.no_grad():
            logits = model.forward(seq[:, -window:], depth).data[:, -1, :]
        nxt = logits.argmax(-1)
        res.latencies.append(time.perf_counter() - t0)
        if keep_logits:
            res.logits.append(logits)
        res.exit_depths.append(depth)
        new_tokens.append(nxt)
        seq = np.concatenate([seq, nxt[:, None]], axis=1)
    if new_tokens:
        res.tokens = np.stack(new_tokens, axis=1)
    return res


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

BENCH_COLUMNS = ("mode", "prompt_len", "gen_len", "depth", "run", "sec_per_token")


@dataclass
class BenchResult:
    rows: list[tuple]
    step_times: dict[str, np.ndarray]

    def median(self, mode: str) -> float:
        return float(np.median([r[-1] for r in self.rows if r[0] == mode]))

    @property
    def speedup(self) -> float:
        return self.median("uncached") / self.median("cached")

    def slope(self, mode: str) -> float:
        """Seconds per extra prefix token, from the per-step median latencies."""
        t = self.step_times[mode]
        x = np.arange(len(t))
        return float(np.polyfit(x, t, 1)[0])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(BENCH_COLUMNS)
            w.writerows(self.rows)


def bench_cache(model, prompt_len: int, gen_len: int, depth: int, runs: int = 5, seed: int = 0) -> BenchResult:
    """Seconds per generated token, cached vs uncached, over repeated runs."""
    rng = np.random.default_rng(seed)
    window = prompt_len + gen_len
    if window > model.cfg.context_len:
        raise ContractError(f"prompt+gen={window} exceeds context_len={model.cfg.context_len}")
    prompt = rng.integers(1, model.cfg.vocab_size, size=(1, prompt_len))
    rows = []
    per_step = {"cached": [], "uncached": []}
    for run in range(runs):
        for mode in ("cached", "uncached"):
            if mode == "cached":
                res = generate(model, prompt, gen_len, depth, window=window)
            else:
                res = generate_uncached(model, prompt, gen_len, depth, window=window)
            # the first token's latency includes the prompt pass in both modes
            lat = np.asarray(res.latencies[1:])
            per_step[mode].append(lat)
            rows.append((mode, prompt_len, gen_len, depth, run, float(lat.mean())))
    step_times = {m: np.median(np.stack(v), axis=0) for m, v in per_step.items()}
    return BenchResult(rows, step_times)
