"""Toy decoder-only transformer, split into encoder / reasoning block / decoder.

Layers ``[0, enc_end)`` form the encoder, ``[enc_end, dec_start)`` the reusable
reasoning block and ``[dec_start, L)`` the decoder, which also owns the final
norm and the LM head. Running the three pieces once, back to back, is the
ordinary single-pass model.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor
from .errors import ConfigError, ContractError, VocabularyError
from .nn import Module


@dataclass(frozen=True)
class BlockSplit:
    enc_end: int = 1
    dec_start: int = 5

    def validate(self, n_layers: int) -> None:
        if not (0 < self.enc_end <= self.dec_start < n_layers):
            raise ConfigError(
                f"split needs 0 < enc_end <= dec_start < L, got "
                f"enc_end={self.enc_end}, dec_start={self.dec_start}, L={n_layers}"
            )


@dataclass
class ModelConfig:
    vocab_size: int
    context_len: int = 128
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 6
    split: BlockSplit = field(default_factory=BlockSplit)
    rope: bool = True
    rope_base: float = 10000.0
    mlp_ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.split, dict):
            self.split = BlockSplit(**self.split)
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ConfigError("head dimension must be even for rotary positions")
        if self.n_layers < 3:
            raise ConfigError("need at least 3 layers")
        self.split.validate(self.n_layers)

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


class Block(Module):
    """Pre-norm residual block: attention then SiLU MLP."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, std: float, out_std: float):
        h, r = cfg.d_model, cfg.mlp_ratio
        self.n_heads = cfg.n_heads
        self.attn_norm = Parameter(np.ones(h, np.float32))
        self.wqkv = Parameter(rng.normal(0, std, (h, 3 * h)).astype(np.float32))
        self.wo = Parameter(rng.normal(0, out_std, (h, h)).astype(np.float32))
        self.mlp_norm = Parameter(np.ones(h, np.float32))
        self.w_up = Parameter(rng.normal(0, std, (h, r * h)).astype(np.float32))
        self.w_down = Parameter(rng.normal(0, out_std, (r * h, h)).astype(np.float32))

    def __call__(self, x: Tensor, rot: tuple | None, kv=None) -> Tensor:
        a = ag.self_attention(ag.rms_norm(x, self.attn_norm) @ self.wqkv, self.n_heads, rot, kv)
        x = x + a @ self.wo
        return x + ag.silu(ag.rms_norm(x, self.mlp_norm) @ self.w_up) @ self.w_down


class Transformer(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        std = 0.02
        out_std = std / np.sqrt(2 * cfg.n_layers)
        self.embed = Parameter(rng.normal(0, std, (cfg.vocab_size, cfg.d_model)).astype(np.float32))
        self.layers = [Block(cfg, rng, std, out_std) for _ in range(cfg.n_layers)]
        self.final_norm = Parameter(np.ones(cfg.d_model, np.float32))
        self.lm_head = Parameter(rng.normal(0, std, (cfg.d_model, cfg.vocab_size)).astype(np.float32))
        # (encoder end, decoder start); the no-decomposition ablation overrides it
        self._bounds = (cfg.split.enc_end, cfg.split.dec_start)
        self._rope_len = 0
        self._cos = self._sin = None
        self._rope_tables: dict = {}

    # -- helpers ---------------------------------------------------------
    @property
    def bounds(self) -> tuple[int, int]:
        return self._bounds

    def set_bounds(self, enc_end: int, dec_start: int) -> None:
        if not (0 <= enc_end <= dec_start <= self.cfg.n_layers):
            raise ConfigError(f"bad bounds ({enc_end}, {dec_start})")
        self._bounds = (enc_end, dec_start)

    def _rotary(self, pos0: int, t: int, dtype) -> tuple | None:
        if not self.cfg.rope:
            return None
        need = pos0 + t
        if need > self._rope_len:
            n = max(need, 2 * self._rope_len, 64)
            d = self.cfg.d_head
            inv = self.cfg.rope_base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
            ang = np.arange(n, dtype=np.float64)[:, None] * inv[None, :]
            self._rope_tables = {}
            self._cos, self._sin, self._rope_len = np.cos(ang), np.sin(ang), n
        key = np.dtype(dtype).str
        if key not in self._rope_tables:
            self._rope_tables[key] = (self._cos.astype(dtype), self._sin.astype(dtype))
        cos, sin = self._rope_tables[key]
        return cos[pos0:need], sin[pos0:need]

    def _run(self, h: Tensor, start: int, stop: int, pos0: int, caches) -> Tensor:
        rot = self._rotary(pos0, h.shape[1], h.dtype)
        for i in range(start, stop):
            kv = None if caches is None else caches[i - start]
            h = self.layers[i](h, rot, kv)
        return h

    def check_tokens(self, tokens, pos0: int = 0) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ContractError(f"tokens must be [batch, T], got shape {tokens.shape}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size):
            raise VocabularyError(f"token ids must lie in [0, {self.cfg.vocab_size})")
        return tokens

    def embed_tokens(self, tokens) -> Tensor:
        return ag.embedding(self.embed, self.check_tokens(tokens))

    # -- the three stages --------------------------------------------------
    def encode(self, tokens, pos0: int = 0, caches=None) -> Tensor:
        """Token ids ``[batch, T]`` -> initial latent state ``h0`` ``[batch, T, h]``."""
        tokens = self.check_tokens(tokens)
        if caches is None and pos0 + tokens.shape[1] > self.cfg.context_len:
            raise ContractError(f"sequence length {tokens.shape[1]} exceeds context {self.cfg.context_len}")
        h = ag.embedding(self.embed, tokens)
        return self._run(h, 0, self._bounds[0], pos0, caches)

    def reason(self, h: Tensor, pos0: int = 0, caches=None) -> Tensor:
        """One ungated application of the reasoning block."""
        return self._run(h, self._bounds[0], self._bounds[1], pos0, caches)

    def decode(self, h: Tensor, pos0: int = 0, caches=None) -> Tensor:
        """Latent state -> vocabulary logits ``[batch, T, V]``."""
        h = self._run(h, self._bounds[1], self.cfg.n_layers, pos0, caches)
        return ag.rms_norm(h, self.final_norm) @ self.lm_head

    def single_pass(self, tokens) -> Tensor:
        """Plain full-stack forward, no loop and no gate."""
        tokens = self.check_tokens(tokens)
        h = ag.embedding(self.embed, tokens)
        h = self._run(h, 0, self.cfg.n_layers, 0, None)
        return ag.rms_norm(h, self.final_norm) @ self.lm_head

    def layer_states(self, tokens) -> list[np.ndarray]:
        """Embedding output followed by every post-residual layer output."""
        tokens = self.check_tokens(tokens)
        with ag.no_grad():
            h = ag.embedding(self.embed, tokens)
            rot = self._rotary(0, tokens.shape[1], h.dtype)
            states = [h.data]
            for layer in self.layers:
                h = layer(h, rot)
                states.append(h.data)
        return states

    @property
    def n_reason_layers(self) -> int:
        return self._bounds[1] - self._bounds[0]

    @property
    def n_decoder_layers(self) -> int:
        return self.cfg.n_layers - self._bounds[1]
