"""Deterministic serialization helpers shared by checkpoints and parameter digests.

Tensors are stored as base64-encoded little-endian raw bytes next to their
dtype and shape, inside ordinary JSON. The encoding is byte-stable: the same
tensor always serializes to the same string, which is what checkpoint
byte-identity and digest comparisons rely on.
"""

from __future__ import annotations

import base64
import hashlib
import json
from typing import Iterable

import numpy as np
import torch

_SUPPORTED_DTYPES = {"float32", "float64", "int64", "bool"}


def canonical_json(obj) -> str:
    """JSON with sorted keys and no whitespace, for stable hashing and files."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def tensor_to_payload(t: torch.Tensor) -> dict:
    a = t.detach().cpu().contiguous().numpy()
    dtype = str(a.dtype)
    if dtype not in _SUPPORTED_DTYPES:
        raise ValueError(f"unsupported tensor dtype {dtype}")
    return {
        "dtype": dtype,
        "shape": list(a.shape),
        "data": base64.b64encode(a.tobytes()).decode("ascii"),
    }


def tensor_from_payload(payload: dict) -> torch.Tensor:
    dtype = payload["dtype"]
    if dtype not in _SUPPORTED_DTYPES:
        raise ValueError(f"unsupported tensor dtype {dtype}")
    raw = base64.b64decode(payload["data"].encode("ascii"))
    a = np.frombuffer(raw, dtype=np.dtype(dtype)).reshape(payload["shape"]).copy()
    return torch.from_numpy(a)


def digest_tensors(tensors: Iterable[torch.Tensor]) -> str:
    """SHA-256 over dtype/shape headers and raw bytes, in iteration order."""
    h = hashlib.sha256()
    for t in tensors:
        a = t.detach().cpu().contiguous().numpy()
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def digest_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
