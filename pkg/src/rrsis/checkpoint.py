"""Single-file checkpoints: a JSON header followed by little-endian float32 arrays.

Layout::

    b"RRSISCKP"            8-byte magic
    uint32 LE              format version
    uint64 LE              header length in bytes
    header                 UTF-8 JSON: config echo, step, array table
    payload                concatenated float32 LE arrays, C order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig, RunConfig, config_from_dict
from .errors import CheckpointMismatchError, ConfigError

MAGIC = b"RRSISCKP"
FORMAT_VERSION = 1


def save_checkpoint(path, arrays: dict[str, torch.Tensor | np.ndarray], config: RunConfig, step: int, extra=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table, blobs, offset = [], [], 0
    for name, value in arrays.items():
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "format_version": FORMAT_VERSION,
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in config.to_dict().items()},
        "step": int(step),
        "arrays": table,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Returns ``(header, arrays)``."""
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ConfigError(f"{path} is not a checkpoint")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != FORMAT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    arrays = {}
    for entry in header["arrays"]:
        buf = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(entry["shape"]).copy()
    return header, arrays


def config_from_header(header: dict) -> RunConfig:
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in header["config"].items()}
    return config_from_dict(values)


def model_arrays(model: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {f"model/{k}": v for k, v in model.state_dict().items()}


def load_model_state(model: torch.nn.Module, arrays: dict[str, np.ndarray]):
    """Copy ``model/*`` arrays into ``model``; mismatched shapes raise with every offender listed."""
    state = model.state_dict()
    mismatches = []
    for name, tensor in state.items():
        key = f"model/{name}"
        if key not in arrays:
            mismatches.append((name, tuple(tensor.shape), None))
        elif tuple(arrays[key].shape) != tuple(tensor.shape):
            mismatches.append((name, tuple(tensor.shape), tuple(arrays[key].shape)))
    extra = sorted(k[6:] for k in arrays if k.startswith("model/") and k[6:] not in state)
    mismatches += [(name, None, tuple(arrays["model/" + name].shape)) for name in extra]
    if mismatches:
        raise CheckpointMismatchError(mismatches)
    model.load_state_dict({k: torch.from_numpy(arrays[f"model/{k}"]).to(v.dtype) for k, v in state.items()})


def check_compatible(config: ModelConfig, header: dict):
    """Raise if architecture-defining keys in ``header`` differ from ``config``."""
    saved = config_from_header(header).model
    keys = ("image_size", "channels", "text_dim", "max_tokens", "num_prompts", "hidden_dim", "vocab_size",
            "msda_heads", "msda_points", "attn_heads", "ffn_dim", "comp_dim", "comp_heads", "pool_size", "capm_mode")
    diffs = [(k, getattr(config, k), getattr(saved, k)) for k in keys if getattr(config, k) != getattr(saved, k)]
    if diffs:
        raise CheckpointMismatchError(diffs)
