"""Binary checkpoints.

Layout (little endian)::

    b"VLTC"  u32 format  u32 config_len  config text (key = value lines)
    u32 tensor_count
    per tensor: u16 name_len, name, u8 rank, u32 dims[rank], f64 data (C order)

Optimizer moments, when present, are stored as extra tensors named
``adamw.m/<param>`` and ``adamw.v/<param>``; the step counter and
hyperparameters live in the config block.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, VoltModel
from .tensor import AdamWState

MAGIC = b"VLTC"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def format_config(values: dict) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in values.items())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CheckpointError(f"line {lineno}: expected 'key = value'")
        k, v = (x.strip() for x in line.split("=", 1))
        out[k] = v
    return out


def coerce(value: str, like):
    """Convert a config string to the type of ``like``."""
    if isinstance(like, bool):
        low = value.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {value!r}")
        return low in ("true", "1", "yes")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def save_checkpoint(path, model: VoltModel, run_config: dict | None = None,
                    optimizer: AdamWState | None = None) -> None:
    cfg = {f"model.{k}": v for k, v in model.config.to_dict().items()}
    cfg.update(run_config or {})
    tensors = dict(model.params.state_dict())
    if optimizer is not None:
        cfg.update({"adamw.t": optimizer.t, "adamw.lr": optimizer.lr, "adamw.beta1": optimizer.beta1,
                    "adamw.beta2": optimizer.beta2, "adamw.eps": optimizer.eps,
                    "adamw.weight_decay": optimizer.weight_decay})
        tensors.update({f"adamw.m/{k}": v for k, v in optimizer.m.items()})
        tensors.update({f"adamw.v/{k}": v for k, v in optimizer.v.items()})
    text = format_config(cfg).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(text)), text, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    try:
        version, clen = struct.unpack_from("<II", raw, 4)
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos = 12
    if pos + clen > len(raw):
        raise CheckpointError(f"{path}: truncated checkpoint")
    config = parse_config(raw[pos:pos + clen].decode("utf-8"))
    pos += clen
    tensors = {}
    try:
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            data = np.frombuffer(raw, dtype="<f8", count=size, offset=pos)
            pos += 8 * size
            tensors[name] = data.reshape(shape).astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return config, tensors


def model_config_from(config: dict[str, str]) -> ModelConfig:
    base = ModelConfig().to_dict()
    values = {k: coerce(config[f"model.{k}"], v) for k, v in base.items() if f"model.{k}" in config}
    return ModelConfig(**{**base, **values})


def load_checkpoint(path) -> tuple[VoltModel, dict[str, str], AdamWState | None]:
    """Rebuild the model (and optimizer state if stored) from ``path``."""
    config, tensors = read_checkpoint(path)
    model = VoltModel(model_config_from(config))
    params = {k: v for k, v in tensors.items() if not k.startswith("adamw.")}
    model.params.load_state_dict(params)
    optimizer = None
    if "adamw.t" in config:
        optimizer = AdamWState(lr=float(config["adamw.lr"]), beta1=float(config["adamw.beta1"]),
                               beta2=float(config["adamw.beta2"]), eps=float(config["adamw.eps"]),
                               weight_decay=float(config["adamw.weight_decay"]), t=int(config["adamw.t"]))
        for k, v in tensors.items():
            if k.startswith("adamw.m/"):
                optimizer.m[k[8:]] = v
            elif k.startswith("adamw.v/"):
                optimizer.v[k[8:]] = v
    return model, config, optimizer
