"""Frozen music feature extractors and the trainable layer-weighted average.

A backend turns a clip into per-layer hidden states: the embedding-layer
output plus one state per transformer block, stacked as [L+1, T, D]. Backends
are frozen; the only trainable piece here is :class:`LayerWeights`, whose
softmax-normalized weights mix the layers into a single [T, D] feature map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .data import EncoderConfig, MusicClip
from .serialization import digest_tensors

_WAVE_STATS = 8  # per-frame summary statistics fed to the toy input embedding


@dataclass
class LayeredFeatures:
    """Hidden states [L+1, T, D]: embedding layer first, then each block."""

    states: torch.Tensor

    def __post_init__(self):
        if self.states.ndim != 3:
            raise ValueError(f"expected [layers, frames, dim] states, got shape {tuple(self.states.shape)}")
        if self.states.shape[1] == 0:
            raise ValueError("states must cover at least one frame")
        if not torch.isfinite(self.states).all():
            raise ValueError("non-finite values in layered features")

    @property
    def num_layers(self) -> int:
        return self.states.shape[0]


class LayerWeights:
    """Trainable logits over encoder layers; weights are their softmax."""

    def __init__(self, num_layers: int, logits: torch.Tensor | None = None):
        if logits is None:
            logits = torch.zeros(num_layers, dtype=torch.float64)
        if logits.shape != (num_layers,):
            raise ValueError(f"expected {num_layers} logits, got shape {tuple(logits.shape)}")
        self.logits = logits.detach().clone().requires_grad_(True)

    @property
    def weights(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=0)

    def __len__(self) -> int:
        return self.logits.shape[0]


def aggregate_layers(feats: LayeredFeatures, w: LayerWeights) -> torch.Tensor:
    """Convex combination of per-layer states, differentiable in the logits.

    Accepts weights over all L+1 layers, or over the L block outputs only
    (embedding layer excluded via config).
    """
    total = feats.num_layers
    if len(w) == total:
        states = feats.states
    elif len(w) == total - 1:
        states = feats.states[1:]
    else:
        raise ValueError(f"{len(w)} layer weights cannot mix {total} layers")
    return torch.einsum("l,ltd->td", w.weights, states)


def _sinusoidal_positions(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    idx = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, idx / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return pe


def _frame_stats(wave: torch.Tensor, frames: int) -> torch.Tensor:
    """Summaries of T roughly equal windows: [T, 8], finite for any input."""
    chunks = torch.tensor_split(wave, frames)
    rows = []
    for c in chunks:
        if c.numel() == 0:
            rows.append(torch.zeros(_WAVE_STATS, dtype=torch.float64))
            continue
        rows.append(torch.stack([
            c.mean(),
            c.std(unbiased=False),
            c.min(),
            c.max(),
            torch.sqrt((c ** 2).mean()),
            c.abs().mean(),
            c[0],
            c[-1],
        ]))
    return torch.stack(rows)


class ToyMusicEncoder:
    """Small fixed-seed transformer; parameters never update.

    Clips carrying precomputed features must match the configured frame dim
    and are taken as the embedding-layer input directly; waveform clips are
    framed into ``config.frames`` windows of summary statistics first.
    """

    def __init__(self, config: EncoderConfig):
        if config.layers < 1:
            raise ValueError("toy encoder needs at least one block")
        self.config = config
        gen = torch.Generator().manual_seed(config.seed)
        d = config.frame_dim
        scale = 1.0 / math.sqrt(d)

        def mat(*shape, s=scale):
            return torch.randn(*shape, generator=gen, dtype=torch.float64) * s

        self._input_proj = mat(_WAVE_STATS, d, s=1.0 / math.sqrt(_WAVE_STATS))
        self._input_bias = torch.zeros(d, dtype=torch.float64)
        self._blocks = []
        for _ in range(config.layers):
            self._blocks.append({
                "ln1_g": torch.ones(d, dtype=torch.float64),
                "ln1_b": torch.zeros(d, dtype=torch.float64),
                "wq": mat(d, d), "wk": mat(d, d), "wv": mat(d, d), "wo": mat(d, d),
                "ln2_g": torch.ones(d, dtype=torch.float64),
                "ln2_b": torch.zeros(d, dtype=torch.float64),
                "w1": mat(d, 4 * d), "b1": torch.zeros(4 * d, dtype=torch.float64),
                "w2": mat(4 * d, d, s=1.0 / math.sqrt(4 * d)), "b2": torch.zeros(d, dtype=torch.float64),
            })
        for p in self.parameters():
            p.requires_grad_(False)

    @property
    def num_layers(self) -> int:
        return self.config.layers

    @property
    def frame_dim(self) -> int:
        return self.config.frame_dim

    def parameters(self) -> list[torch.Tensor]:
        params = [self._input_proj, self._input_bias]
        for blk in self._blocks:
            params.extend(blk[k] for k in sorted(blk))
        return params

    def parameter_digest(self) -> str:
        return digest_tensors(self.parameters())

    @staticmethod
    def _layer_norm(x: torch.Tensor, g: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        mean = x.mean(dim=-1, keepdim=True)
        var = x.var(dim=-1, unbiased=False, keepdim=True)
        return (x - mean) / torch.sqrt(var + 1e-5) * g + b

    def _block(self, h: torch.Tensor, blk: dict) -> torch.Tensor:
        d = h.shape[-1]
        x = self._layer_norm(h, blk["ln1_g"], blk["ln1_b"])
        q, k, v = x @ blk["wq"], x @ blk["wk"], x @ blk["wv"]
        attn = torch.softmax(q @ k.T / math.sqrt(d), dim=-1)
        h = h + (attn @ v) @ blk["wo"]
        x = self._layer_norm(h, blk["ln2_g"], blk["ln2_b"])
        h = h + torch.tanh(x @ blk["w1"] + blk["b1"]) @ blk["w2"] + blk["b2"]
        return h

    def encode(self, clip: MusicClip) -> LayeredFeatures:
        with torch.no_grad():
            if clip.features is not None:
                feats = torch.tensor(clip.features, dtype=torch.float64)
                if feats.shape[1] != self.frame_dim:
                    raise ValueError(
                        f"clip {clip.id!r}: feature dim {feats.shape[1]} != encoder frame_dim {self.frame_dim}"
                    )
                h = feats
            else:
                wave = torch.tensor(clip.waveform, dtype=torch.float64)
                if wave.numel() == 0:
                    raise ValueError(f"clip {clip.id!r}: empty waveform")
                h = _frame_stats(wave, self.config.frames) @ self._input_proj + self._input_bias
            h = h + _sinusoidal_positions(h.shape[0], self.frame_dim)
            states = [h]
            for blk in self._blocks:
                h = self._block(h, blk)
                states.append(h)
            return LayeredFeatures(torch.stack(states))


class PretrainedMusicEncoder:
    """Adapter around an external pretrained audio model behind ``encode``.

    Expects a transformers-compatible checkpoint directory that returns
    hidden states for raw audio input (for the reference setup: 24 blocks,
    1024-dim features). Weights are loaded once and frozen.
    """

    def __init__(self, config: EncoderConfig):
        if not config.pretrained_path:
            raise RuntimeError(
                "encoder.backend = pretrained requires encoder.pretrained_path to point at a local checkpoint"
            )
        try:
            from transformers import AutoModel
        except ImportError as exc:
            raise RuntimeError("the pretrained encoder backend needs the 'transformers' package") from exc
        self.config = config
        self._model = AutoModel.from_pretrained(config.pretrained_path, trust_remote_code=True)
        self._model.eval()
        for p in self._model.parameters():
            p.requires_grad_(False)

    @property
    def num_layers(self) -> int:
        return self._model.config.num_hidden_layers

    @property
    def frame_dim(self) -> int:
        return self._model.config.hidden_size

    def parameters(self):
        return list(self._model.parameters())

    def parameter_digest(self) -> str:
        return digest_tensors(self.parameters())

    def encode(self, clip: MusicClip) -> LayeredFeatures:
        if clip.waveform is None:
            raise ValueError(f"clip {clip.id!r}: the pretrained backend requires raw audio")
        wave = torch.tensor(clip.waveform, dtype=torch.float32).unsqueeze(0)
        with torch.no_grad():
            out = self._model(input_values=wave, output_hidden_states=True)
        states = torch.stack([h[0] for h in out.hidden_states]).to(torch.float64)
        return LayeredFeatures(states)


def build_encoder(config: EncoderConfig):
    if config.backend == "toy":
        return ToyMusicEncoder(config)
    if config.backend == "pretrained":
        return PretrainedMusicEncoder(config)
    raise ValueError(f"unknown encoder backend {config.backend!r}")
