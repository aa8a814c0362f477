"""Self-describing JSON checkpoints.

Floating-point values are stored as ``float.hex`` strings, so loading gives
back exactly the saved bits for float64 and float32 tensors alike.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1


def _encode(arr: np.ndarray) -> dict:
    flat = arr.reshape(-1)
    if np.issubdtype(arr.dtype, np.floating):
        data = [float(x).hex() for x in flat.tolist()]
    elif arr.dtype == np.bool_:
        data = [bool(x) for x in flat.tolist()]
    else:
        data = [int(x) for x in flat.tolist()]
    return {"dtype": arr.dtype.name, "shape": list(arr.shape), "data": data}


def _decode(obj: dict) -> np.ndarray:
    dtype = np.dtype(obj["dtype"])
    if np.issubdtype(dtype, np.floating):
        flat = np.array([float.fromhex(x) for x in obj["data"]], dtype=np.float64).astype(dtype)
    else:
        flat = np.array(obj["data"], dtype=dtype)
    return flat.reshape(obj["shape"])


def to_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        return value.detach().cpu().numpy()
    return np.asarray(value)


def save_checkpoint(path, kind: str, config: dict, tensors: dict, extra: dict | None = None) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "parameters": {name: _encode(to_numpy(t)) for name, t in sorted(tensors.items())},
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray], dict]:
    """Return ``(config, parameters, extra)``; ``kind`` is checked when given."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {doc.get('format_version')!r}")
    if kind is not None and doc.get("kind") != kind:
        raise ValueError(f"checkpoint holds a {doc.get('kind')!r} model, expected {kind!r}")
    params = {name: _decode(obj) for name, obj in doc["parameters"].items()}
    return doc["config"], params, doc.get("extra", {})


def state_dict_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: to_numpy(v) for k, v in module.state_dict().items()}


def load_state_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = {k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}
    module.load_state_dict(state)
