"""Frozen autoregressive text backends: tokenization, embedding lookup,
next-token logits over mixed music/text embeddings, and decoding.

The toy backend pairs a byte-level tokenizer (256 byte ids plus EOS and PAD)
with a small seed-deterministic causal transformer, so the whole loss path is
trainable in seconds without pretrained weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .adapter import MusicEmbedding
from .data import LMConfig
from .serialization import digest_tensors

BYTE_VOCAB = 256
EOS_ID = 256
PAD_ID = 257
TOY_VOCAB = 258


@dataclass
class TokenSequence:
    ids: list[int]
    text: str


@dataclass
class DecodeConfig:
    mode: str = "greedy"            # greedy | sample
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("greedy", "sample"):
            raise ValueError(f"unknown decode mode {self.mode!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


class ByteTokenizer:
    """UTF-8 byte ids; round-trips any string exactly."""

    vocab_size = TOY_VOCAB
    eos_id = EOS_ID
    pad_id = PAD_ID

    def tokenize(self, s: str) -> TokenSequence:
        return TokenSequence(ids=list(s.encode("utf-8")), text=s)

    def detokenize(self, ids: list[int]) -> str:
        return bytes(i for i in ids if i < BYTE_VOCAB).decode("utf-8", errors="replace")


def _sinusoidal_positions(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    idx = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, idx / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return pe


class ToyCausalLM:
    """Two-block (configurable) causal transformer with frozen random weights."""

    def __init__(self, config: LMConfig):
        if config.dim % config.heads != 0:
            raise ValueError("lm dim must be divisible by the head count")
        self.config = config
        self.tokenizer = ByteTokenizer()
        gen = torch.Generator().manual_seed(config.seed)
        d = config.dim

        def mat(*shape, s):
            return torch.randn(*shape, generator=gen, dtype=torch.float64) * s

        self._token_emb = mat(TOY_VOCAB, d, s=1.0)
        self._blocks = []
        for _ in range(config.layers):
            self._blocks.append({
                "ln1_g": torch.ones(d, dtype=torch.float64),
                "ln1_b": torch.zeros(d, dtype=torch.float64),
                "wq": mat(d, d, s=1.0 / math.sqrt(d)),
                "wk": mat(d, d, s=1.0 / math.sqrt(d)),
                "wv": mat(d, d, s=1.0 / math.sqrt(d)),
                "wo": mat(d, d, s=1.0 / math.sqrt(d)),
                "ln2_g": torch.ones(d, dtype=torch.float64),
                "ln2_b": torch.zeros(d, dtype=torch.float64),
                "w1": mat(d, 4 * d, s=1.0 / math.sqrt(d)),
                "b1": torch.zeros(4 * d, dtype=torch.float64),
                "w2": mat(4 * d, d, s=1.0 / math.sqrt(4 * d)),
                "b2": torch.zeros(d, dtype=torch.float64),
            })
        self._final_ln_g = torch.ones(d, dtype=torch.float64)
        self._final_ln_b = torch.zeros(d, dtype=torch.float64)
        self._head = mat(d, TOY_VOCAB, s=1.0 / math.sqrt(d))
        for p in self.parameters():
            p.requires_grad_(False)

    @property
    def dim(self) -> int:
        return self.config.dim

    @property
    def vocab_size(self) -> int:
        return TOY_VOCAB

    @property
    def eos_id(self) -> int:
        return EOS_ID

    @property
    def pad_id(self) -> int:
        return PAD_ID

    def parameters(self) -> list[torch.Tensor]:
        params = [self._token_emb]
        for blk in self._blocks:
            params.extend(blk[k] for k in sorted(blk))
        params.extend([self._final_ln_g, self._final_ln_b, self._head])
        return params

    def parameter_digest(self) -> str:
        return digest_tensors(self.parameters())

    def tokenize(self, s: str) -> TokenSequence:
        return self.tokenizer.tokenize(s)

    def detokenize(self, ids: list[int]) -> str:
        return self.tokenizer.detokenize(ids)

    def embed_tokens(self, ids: list[int] | torch.Tensor) -> torch.Tensor:
        idx = torch.as_tensor(ids, dtype=torch.long)
        return self._token_emb[idx]

    @staticmethod
    def _layer_norm(x, g, b):
        mean = x.mean(dim=-1, keepdim=True)
        var = x.var(dim=-1, unbiased=False, keepdim=True)
        return (x - mean) / torch.sqrt(var + 1e-5) * g + b

    def _block(self, h: torch.Tensor, blk: dict, causal: torch.Tensor) -> torch.Tensor:
        bsz, seq, d = h.shape
        heads = self.config.heads
        hd = d // heads
        x = self._layer_norm(h, blk["ln1_g"], blk["ln1_b"])
        q = (x @ blk["wq"]).view(bsz, seq, heads, hd).transpose(1, 2)
        k = (x @ blk["wk"]).view(bsz, seq, heads, hd).transpose(1, 2)
        v = (x @ blk["wv"]).view(bsz, seq, heads, hd).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        scores = scores.masked_fill(causal, float("-inf"))
        out = (torch.softmax(scores, dim=-1) @ v).transpose(1, 2).reshape(bsz, seq, d)
        h = h + out @ blk["wo"]
        x = self._layer_norm(h, blk["ln2_g"], blk["ln2_b"])
        h = h + torch.tanh(x @ blk["w1"] + blk["b1"]) @ blk["w2"] + blk["b2"]
        return h

    def forward_logits(self, embeddings: torch.Tensor) -> torch.Tensor:
        """Next-token logits for [S, D] or [B, S, D] embeddings; causal."""
        squeeze = embeddings.ndim == 2
        if squeeze:
            embeddings = embeddings.unsqueeze(0)
        if embeddings.ndim != 3:
            raise ValueError(f"expected [S, D] or [B, S, D] embeddings, got {tuple(embeddings.shape)}")
        if embeddings.shape[-1] != self.dim:
            raise ValueError(f"embedding dim {embeddings.shape[-1]} != lm dim {self.dim}")
        seq = embeddings.shape[1]
        h = embeddings + _sinusoidal_positions(seq, self.dim)
        causal = torch.triu(torch.ones(seq, seq, dtype=torch.bool), diagonal=1)
        for blk in self._blocks:
            h = self._block(h, blk, causal)
        h = self._layer_norm(h, self._final_ln_g, self._final_ln_b)
        logits = h @ self._head
        return logits[0] if squeeze else logits

    def generate(self, music: MusicEmbedding, prompt: str, decode: DecodeConfig | None = None,
                 max_new: int = 64, pre_prompt: str = "") -> str:
        """Decode text conditioned on [pre_prompt | music rows | prompt].

        Stops at EOS or after max_new tokens; greedy decoding is deterministic.
        """
        if max_new <= 0:
            raise ValueError("max_new must be positive")
        decode = decode or DecodeConfig()
        parts = []
        if pre_prompt:
            parts.append(self.embed_tokens(self.tokenize(pre_prompt).ids))
        parts.append(music.values.detach().to(torch.float64))
        prompt_ids = self.tokenize(prompt).ids
        if prompt_ids:
            parts.append(self.embed_tokens(prompt_ids))
        embs = torch.cat(parts, dim=0)
        gen = torch.Generator().manual_seed(decode.seed)
        out_ids: list[int] = []
        with torch.no_grad():
            for _ in range(max_new):
                logits = self.forward_logits(embs)[-1]
                if decode.mode == "greedy":
                    token = int(torch.argmax(logits).item())
                else:
                    probs = torch.softmax(logits / decode.temperature, dim=-1)
                    token = int(torch.multinomial(probs, 1, generator=gen).item())
                if token == EOS_ID:
                    break
                out_ids.append(token)
                embs = torch.cat([embs, self.embed_tokens([token])], dim=0)
        return self.detokenize(out_ids)


class PretrainedCausalLM:
    """Adapter around an external instruction-following chat model.

    Exposes the same tokenize/embed/forward/generate surface as the toy
    backend; weights come from a local transformers checkpoint and stay
    frozen.
    """

    def __init__(self, config: LMConfig):
        if not config.pretrained_path:
            raise RuntimeError(
                "lm.backend = pretrained requires lm.pretrained_path to point at a local checkpoint"
            )
        try:
            from transformers import AutoModelForCausalLM, AutoTokenizer
        except ImportError as exc:
            raise RuntimeError("the pretrained lm backend needs the 'transformers' package") from exc
        self.config = config
        self._tok = AutoTokenizer.from_pretrained(config.pretrained_path)
        self._model = AutoModelForCausalLM.from_pretrained(config.pretrained_path)
        self._model.eval()
        for p in self._model.parameters():
            p.requires_grad_(False)

    @property
    def dim(self) -> int:
        return self._model.get_input_embeddings().weight.shape[1]

    @property
    def vocab_size(self) -> int:
        return self._model.get_input_embeddings().weight.shape[0]

    @property
    def eos_id(self) -> int:
        return self._tok.eos_token_id

    @property
    def pad_id(self) -> int:
        return self._tok.pad_token_id if self._tok.pad_token_id is not None else self._tok.eos_token_id

    def parameters(self):
        return list(self._model.parameters())

    def parameter_digest(self) -> str:
        return digest_tensors(self.parameters())

    def tokenize(self, s: str) -> TokenSequence:
        return TokenSequence(ids=self._tok.encode(s, add_special_tokens=False), text=s)

    def detokenize(self, ids: list[int]) -> str:
        return self._tok.decode(ids, skip_special_tokens=True)

    def embed_tokens(self, ids: list[int] | torch.Tensor) -> torch.Tensor:
        idx = torch.as_tensor(ids, dtype=torch.long)
        return self._model.get_input_embeddings()(idx)

    def forward_logits(self, embeddings: torch.Tensor) -> torch.Tensor:
        squeeze = embeddings.ndim == 2
        if squeeze:
            embeddings = embeddings.unsqueeze(0)
        out = self._model(inputs_embeds=embeddings.to(self._model.dtype))
        logits = out.logits
        return logits[0] if squeeze else logits

    def generate(self, music: MusicEmbedding, prompt: str, decode: DecodeConfig | None = None,
                 max_new: int = 64, pre_prompt: str = "") -> str:
        if max_new <= 0:
            raise ValueError("max_new must be positive")
        decode = decode or DecodeConfig()
        parts = []
        if pre_prompt:
            parts.append(self.embed_tokens(self.tokenize(pre_prompt).ids))
        parts.append(music.values.to(self._model.dtype))
        prompt_ids = self.tokenize(prompt).ids
        if prompt_ids:
            parts.append(self.embed_tokens(prompt_ids))
        embs = torch.cat(parts, dim=0)
        gen = torch.Generator().manual_seed(decode.seed)
        out_ids: list[int] = []
        with torch.no_grad():
            for _ in range(max_new):
                logits = self.forward_logits(embs)[-1]
                if decode.mode == "greedy":
                    token = int(torch.argmax(logits).item())
                else:
                    probs = torch.softmax(logits / decode.temperature, dim=-1)
                    token = int(torch.multinomial(probs, 1, generator=gen).item())
                if token == self.eos_id:
                    break
                out_ids.append(token)
                embs = torch.cat([embs, self.embed_tokens([token])], dim=0)
        return self.detokenize(out_ids)


def build_lm(config: LMConfig):
    if config.backend == "toy":
        return ToyCausalLM(config)
    if config.backend == "pretrained":
        return PretrainedCausalLM(config)
    raise ValueError(f"unknown lm backend {config.backend!r}")
