"""Exception types shared across the package."""


class LoopUSError(Exception):
    """Base class for all package errors."""


class ShapeError(LoopUSError, ValueError):
    """Operand shapes do not conform for a primitive."""


class NumericError(LoopUSError, FloatingPointError):
    """A primitive produced NaN or Inf."""

    def __init__(self, primitive: str, detail: str = ""):
        self.primitive = primitive
        msg = f"non-finite result in primitive '{primitive}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class ContractError(LoopUSError, ValueError):
    """A documented precondition was violated by the caller."""


class VocabularyError(ContractError):
    """Token id outside the vocabulary."""


class CacheInvariantError(LoopUSError, RuntimeError):
    """KV caches are desynchronized."""


class CheckpointFormatError(LoopUSError, ValueError):
    """Checkpoint file is malformed, truncated or from another version."""


class ConfigError(LoopUSError, ValueError):
    """Invalid run configuration."""
