"""Character-level data: vocabularies, synthetic tasks, batching."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError

PAD = 0
PAD_CHAR = "\x00"
TASKS = ("copy", "reverse", "modular_add")


class Vocab:
    """Characters sorted by codepoint; id 0 is reserved for padding."""

    def __init__(self, chars):
        chars = sorted(set(chars) - {PAD_CHAR})
        self.itos = [PAD_CHAR] + chars
        self.stoi = {c: i for i, c in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    @classmethod
    def from_text(cls, text: str) -> "Vocab":
        return cls(text)

    def encode(self, s: str) -> list[int]:
        try:
            return [self.stoi[c] for c in s]
        except KeyError as err:
            raise ContractError(f"character {err.args[0]!r} not in vocabulary") from None

    def decode(self, ids) -> str:
        return "".join(self.itos[i] for i in ids if i != PAD)

    def to_text(self) -> str:
        return "".join(self.itos[1:])


@dataclass
class Batch:
    """Token ids ``[batch, T]`` right-padded with :data:`PAD`.

    ``targets[:, j]`` is the token at ``j + 1`` (the last column is padding);
    ``answer_mask`` marks the target positions that count for task accuracy.
    """

    tokens: np.ndarray
    answer_mask: np.ndarray | None = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 2:
            raise ContractError(f"batch tokens must be 2-D, got {self.tokens.shape}")

    @cached_property
    def targets(self) -> np.ndarray:
        t = np.full_like(self.tokens, PAD)
        t[:, :-1] = self.tokens[:, 1:]
        return t

    @cached_property
    def mask(self) -> np.ndarray:
        return self.targets != PAD

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def subset(self, idx) -> "Batch":
        am = None if self.answer_mask is None else self.answer_mask[idx]
        return Batch(self.tokens[idx], am)


@dataclass
class SyntheticTaskSpec:
    task: str = "modular_add"
    min_len: int = 3
    max_len: int = 8
    modulus: int = 10
    n_samples: int = 20000
    alphabet: str = "abcdefgh"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("need 1 <= min_len <= max_len")
        if self.modulus < 2:
            raise ConfigError("modulus must be >= 2")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")

    def charset(self) -> str:
        if self.task == "modular_add":
            return "0123456789+="
        return self.alphabet + ">"


def make_example(spec: SyntheticTaskSpec, rng: np.random.Generator) -> tuple[str, str]:
    """Return ``(prompt, answer)``; the training string is their concatenation."""
    if spec.task == "modular_add":
        a, b = (int(x) for x in rng.integers(0, spec.modulus, size=2))
        return f"{a}+{b}=", str((a + b) % spec.modulus)
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    s = "".join(rng.choice(list(spec.alphabet), size=n))
    return f"{s}>", (s if spec.task == "copy" else s[::-1])


@dataclass
class Dataset:
    vocab: Vocab
    train: np.ndarray
    val: np.ndarray
    train_answer: np.ndarray | None = None
    val_answer: np.ndarray | None = None
    source: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def seq_len(self) -> int:
        return self.train.shape[1]

    def val_batch(self) -> Batch:
        return Batch(self.val, self.val_answer)

    def iterate(self, batch_size: int, rng: np.random.Generator):
        """Endless shuffled mini-batches from the training split."""
        n = self.train.shape[0]
        while True:
            order = rng.permutation(n)
            for i in range(0, n - batch_size + 1, batch_size):
                idx = order[i : i + batch_size]
                am = None if self.train_answer is None else self.train_answer[idx]
                yield Batch(self.train[idx], am)


def _split(n: int, batch_size: int, val_ratio: float) -> int:
    return max(int(math.ceil(val_ratio * n)), batch_size)


def _pad(rows: list[list[int]], width: int) -> np.ndarray:
    out = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def ingest_synthetic(
    spec: SyntheticTaskSpec, seed: int = 0, batch_size: int = 32, val_ratio: float = 1e-4
) -> Dataset:
    rng = np.random.default_rng(seed)
    vocab = Vocab(spec.charset())
    rows, answers = [], []
    for _ in range(spec.n_samples):
        prompt, answer = make_example(spec, rng)
        ids = vocab.encode(prompt + answer)
        rows.append(ids)
        # target index j predicts token j+1, so answer chars sit at len(prompt)-1 ...
        answers.append((len(prompt) - 1, len(answer)))
    width = max(len(r) for r in rows)
    tokens = _pad(rows, width)
    amask = np.zeros_like(tokens, dtype=bool)
    for i, (start, n) in enumerate(answers):
        amask[i, start : start + n] = True
    n_val = _split(len(rows), batch_size, val_ratio)
    if n_val >= len(rows):
        raise ConfigError("not enough samples for a training split")
    return Dataset(
        vocab, tokens[n_val:], tokens[:n_val], amask[n_val:], amask[:n_val],
        source=f"synthetic:{spec.task}", meta={"spec": spec.__dict__.copy()},
    )


def ingest_text(
    path: str | Path, seq_len: int = 128, batch_size: int = 32, val_ratio: float = 1e-4
) -> Dataset:
    text = Path(path).read_text(encoding="utf-8")
    return ingest_string(text, seq_len, batch_size, val_ratio, source=str(path))


def ingest_string(
    text: str, seq_len: int = 128, batch_size: int = 32, val_ratio: float = 1e-4, source: str = "<string>"
) -> Dataset:
    if not text:
        raise ContractError("empty corpus")
    vocab = Vocab.from_text(text)
    ids = vocab.encode(text)
    n_seq = max(len(ids) // seq_len, 1)
    rows = [ids[i * seq_len : (i + 1) * seq_len] for i in range(n_seq)]
    tokens = _pad(rows, min(seq_len, len(ids)))
    n_val = min(_split(n_seq, batch_size, val_ratio), n_seq)
    # tiny corpora: validation overlaps training rather than leaving it empty
    train = tokens[n_val:] if n_seq > n_val else tokens
    return Dataset(vocab, train, tokens[:n_val], source=source)


def ingest(source, **kwargs) -> Dataset:
    """Dispatch on a :class:`SyntheticTaskSpec` or a text-file path."""
    if isinstance(source, SyntheticTaskSpec):
        return ingest_synthetic(source, **kwargs)
    return ingest_text(source, **kwargs)
