"""The trainable bridge: linear projection into text-embedding space, then
mean-pooling of consecutive frame groups down to ceil(T / t) rows.

Together with the encoder's layer-weight logits these are the only trainable
parameters in the system. The checkpoint file written here holds exactly the
projection weight/bias, the compression length, the layer logits, a config
digest, and the step counter, under a versioned header.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import torch

from .encoder import LayeredFeatures, LayerWeights, aggregate_layers
from .serialization import canonical_json, digest_tensors, tensor_from_payload, tensor_to_payload

CHECKPOINT_FORMAT = "musicbridge-adapter/1"


class CheckpointError(RuntimeError):
    """Unreadable checkpoint, or one written under an incompatible config."""


@dataclass
class MusicEmbedding:
    """Compressed music rows in the language model's embedding space."""

    values: torch.Tensor

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] == 0:
            raise ValueError(f"expected a non-empty [frames, dim] embedding, got {tuple(self.values.shape)}")

    def __len__(self) -> int:
        return self.values.shape[0]


class AdapterState:
    """Projection weight [D_m, D_t], bias [D_t], and compression length t.

    ``use_bias=False`` keeps the bias pinned at zero and out of the trainable
    set. Initialization: weight from N(0, 1/D_m), bias zero.
    """

    def __init__(self, frame_dim: int, text_dim: int, compression: int,
                 use_bias: bool = True, seed: int = 0):
        if compression < 1:
            raise ValueError("compression length must be >= 1")
        gen = torch.Generator().manual_seed(seed)
        w = torch.randn(frame_dim, text_dim, generator=gen, dtype=torch.float64)
        self.weight = (w / math.sqrt(frame_dim)).requires_grad_(True)
        self.bias = torch.zeros(text_dim, dtype=torch.float64).requires_grad_(use_bias)
        self.compression = compression
        self.use_bias = use_bias

    @property
    def frame_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def text_dim(self) -> int:
        return self.weight.shape[1]

    def trainable_parameters(self) -> list[torch.Tensor]:
        params = [self.weight]
        if self.use_bias:
            params.append(self.bias)
        return params

    def parameter_digest(self) -> str:
        return digest_tensors([self.weight, self.bias])


def project(x: torch.Tensor, a: AdapterState) -> torch.Tensor:
    """Row-wise affine map into text space; differentiable in weight and bias."""
    if x.ndim != 2:
        raise ValueError(f"expected [frames, dim] input, got shape {tuple(x.shape)}")
    if x.shape[1] != a.frame_dim:
        raise ValueError(f"input dim {x.shape[1]} != projection input dim {a.frame_dim}")
    return x @ a.weight + a.bias


def temporal_compress(m: torch.Tensor, t: int) -> MusicEmbedding:
    """Mean-pool consecutive groups of t rows; the last group may be shorter
    and is averaged over its actual size. Output length is ceil(T / t)."""
    if m.ndim != 2 or m.shape[0] == 0:
        raise ValueError(f"expected a non-empty [frames, dim] tensor, got shape {tuple(m.shape)}")
    if t < 1:
        raise ValueError("compression length must be >= 1")
    frames = m.shape[0]
    if t == 1:
        return MusicEmbedding(m)
    groups = [m[start:start + t].mean(dim=0) for start in range(0, frames, t)]
    return MusicEmbedding(torch.stack(groups))


def adapt(feats: LayeredFeatures, w: LayerWeights, a: AdapterState) -> MusicEmbedding:
    """Layer average -> projection -> temporal compression."""
    return temporal_compress(project(aggregate_layers(feats, w), a), a.compression)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, adapter: AdapterState, layer_weights: LayerWeights,
                    config_digest: str, step: int) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config_digest": config_digest,
        "step": step,
        "compression": adapter.compression,
        "use_bias": adapter.use_bias,
        "weight": tensor_to_payload(adapter.weight),
        "bias": tensor_to_payload(adapter.bias),
        "layer_logits": tensor_to_payload(layer_weights.logits),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(payload) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path, config_digest: str,
                    force: bool = False) -> tuple[AdapterState, LayerWeights, int]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: no such checkpoint")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a checkpoint file ({exc.msg})") from exc
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unknown checkpoint format {payload.get('format')!r}")
    if payload["config_digest"] != config_digest and not force:
        raise CheckpointError(
            f"{path}: checkpoint was written under a different architecture config "
            f"({payload['config_digest'][:12]}... vs {config_digest[:12]}...); pass force to load anyway"
        )
    weight = tensor_from_payload(payload["weight"])
    bias = tensor_from_payload(payload["bias"])
    adapter = AdapterState(weight.shape[0], weight.shape[1],
                           payload["compression"], payload["use_bias"])
    with torch.no_grad():
        adapter.weight.copy_(weight)
        adapter.bias.copy_(bias)
    logits = tensor_from_payload(payload["layer_logits"])
    layer_weights = LayerWeights(logits.shape[0], logits)
    return adapter, layer_weights, payload["step"]
