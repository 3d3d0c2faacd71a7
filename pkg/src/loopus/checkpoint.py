"""Binary checkpoints.

Layout::

    LOOPUS1\\n
    #meta {"model": {...}, ...}          optional JSON metadata line
    <name> <shape> <dtype> <byte-offset>  one line per array
    <blank line>
    <little-endian float32 payload, row-major>

Shapes are written as ``4x128`` (``-`` for a scalar); offsets count from
the start of the payload.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError

MAGIC = b"LOOPUS1\n"
_DTYPE = np.dtype("<f4")


def _shape_str(shape) -> str:
    return "x".join(str(s) for s in shape) if shape else "-"


def _parse_shape(s: str) -> tuple[int, ...]:
    if s == "-":
        return ()
    return tuple(int(x) for x in s.split("x"))


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    header = [MAGIC]
    if meta is not None:
        header.append(b"#meta " + json.dumps(meta, sort_keys=True).encode() + b"\n")
    payload = []
    off = 0
    for name, arr in arrays.items():
        if any(c.isspace() for c in name):
            raise ValueError(f"array name {name!r} contains whitespace")
        a = np.asarray(arr, dtype=_DTYPE)  # tobytes() is C order; keeps 0-d shapes
        header.append(f"{name} {_shape_str(a.shape)} float32 {off}\n".encode())
        payload.append(a.tobytes())
        off += a.nbytes
    header.append(b"\n")
    Path(path).write_bytes(b"".join(header + payload))


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointFormatError(f"{path}: bad magic (expected {MAGIC!r})")
    end = raw.find(b"\n\n", len(MAGIC) - 1)
    if end < 0:
        raise CheckpointFormatError(f"{path}: truncated manifest")
    lines = raw[len(MAGIC) : end + 1].decode().splitlines()
    payload = memoryview(raw)[end + 2 :]
    meta: dict = {}
    arrays = {}
    for line in lines:
        if not line:
            continue
        if line.startswith("#meta "):
            meta = json.loads(line[6:])
            continue
        parts = line.split()
        if len(parts) != 4 or parts[2] != "float32":
            raise CheckpointFormatError(f"{path}: bad manifest line {line!r}")
        name, shape_s, _, off_s = parts
        shape = _parse_shape(shape_s)
        off = int(off_s)
        n = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        if off + n > len(payload):
            raise CheckpointFormatError(f"{path}: truncated payload for {name}")
        arrays[name] = np.frombuffer(payload[off : off + n], dtype=_DTYPE).reshape(shape).copy()
    return arrays, meta


def save_checkpoint(path, model, opt=None, meta: dict | None = None) -> None:
    """Model (transformer, gate, head) and optionally optimizer moments."""
    arrays = dict(model.state_dict())
    if opt is not None:
        for k, v in opt.state_dict().items():
            arrays[f"opt.{k}"] = v
    meta = dict(meta or {})
    if hasattr(model, "cfg"):
        meta.setdefault("model", model.cfg.to_dict())
    if hasattr(model, "gate_kind"):
        meta.setdefault("gate_kind", model.gate_kind)
        meta.setdefault("monolithic", bool(getattr(model, "_monolithic", False)))
    save_arrays(path, arrays, meta)


def load_checkpoint(path, model=None, opt=None):
    """Restore into ``model`` (built from the stored config if omitted).

    Returns ``(model, meta)``.
    """
    arrays, meta = load_arrays(path)
    if model is None:
        from .loop import LoopUSModel
        from .model import ModelConfig

        if "model" not in meta:
            raise CheckpointFormatError(f"{path}: no model config stored")
        model = LoopUSModel(
            ModelConfig(**meta["model"]), meta.get("gate_kind", "decay"), meta.get("monolithic", False)
        )
    state = {k: v for k, v in arrays.items() if not k.startswith("opt.")}
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as err:
        raise CheckpointFormatError(f"{path}: {err}") from None
    if opt is not None:
        ostate = {k[4:]: v for k, v in arrays.items() if k.startswith("opt.")}
        if ostate:
            opt.load_state_dict(ostate)
    return model, meta
