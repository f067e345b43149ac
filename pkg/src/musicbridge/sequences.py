"""Assembly of training and inference sequences.

Music rows and text token embeddings are concatenated into one causal
sequence; the loss mask marks exactly the positions whose tokens are
regression targets (caption tokens when aligning on captions, answer tokens
when instruction tuning). The shift convention is the standard causal one:
position i predicts the token at position i + 1, so the first target token is
predicted from the position just before it, and the mask lives in target
space.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .adapter import MusicEmbedding
from .lm import TokenSequence

SEG_MUSIC = "music"
SEG_PROMPT = "prompt"
SEG_ANSWER = "answer"


@dataclass
class PromptTemplate:
    pre_music: str = ""
    post_music: str = ""
    answer_prefix: str = "###Assistant:"


@dataclass
class MixedSequence:
    """One causal sequence of mixed embeddings.

    ``token_ids`` carries the text token at each position (the pad id at
    music positions, where no token exists); it is what the loss reads
    targets from. Music rows are contiguous; any leading template text may
    precede them, and all masked positions come after them.
    """

    embeddings: torch.Tensor
    segment_tags: list[str]
    loss_mask: list[bool]
    token_ids: list[int]

    def __post_init__(self):
        n = self.embeddings.shape[0]
        if not (len(self.segment_tags) == len(self.loss_mask) == len(self.token_ids) == n):
            raise ValueError("per-position fields must all have the sequence length")
        music = [i for i, t in enumerate(self.segment_tags) if t == SEG_MUSIC]
        if music and music != list(range(music[0], music[-1] + 1)):
            raise ValueError("music positions must be contiguous")
        for i, masked in enumerate(self.loss_mask):
            if masked and self.segment_tags[i] != SEG_ANSWER:
                raise ValueError("loss mask may only cover target (answer) positions")
            if masked and music and i <= music[-1]:
                raise ValueError("masked positions must come after the music segment")

    def __len__(self) -> int:
        return self.embeddings.shape[0]


def _segment(lm, text: str) -> tuple[list[int], torch.Tensor]:
    ids = lm.tokenize(text).ids if text else []
    if ids:
        return ids, lm.embed_tokens(ids)
    return [], torch.zeros(0, lm.dim, dtype=torch.float64)


def build_pretrain(music: MusicEmbedding, caption: TokenSequence, tmpl: PromptTemplate,
                   lm, append_eos: bool = False) -> MixedSequence:
    """[template-pre | music | template-post | caption]; mask = caption positions.

    ``append_eos`` adds the end-of-sequence token as a final masked target so
    trained models learn where to stop.
    """
    if not caption.ids:
        raise ValueError("caption must be non-empty")
    pre_ids, pre_emb = _segment(lm, tmpl.pre_music)
    post_ids, post_emb = _segment(lm, tmpl.post_music)
    cap_ids = list(caption.ids) + ([lm.eos_id] if append_eos else [])
    cap_emb = lm.embed_tokens(cap_ids)
    t_music = len(music)
    return MixedSequence(
        embeddings=torch.cat([pre_emb, music.values, post_emb, cap_emb], dim=0),
        segment_tags=[SEG_PROMPT] * len(pre_ids) + [SEG_MUSIC] * t_music
                     + [SEG_PROMPT] * len(post_ids) + [SEG_ANSWER] * len(cap_ids),
        loss_mask=[False] * (len(pre_ids) + t_music + len(post_ids)) + [True] * len(cap_ids),
        token_ids=pre_ids + [lm.pad_id] * t_music + post_ids + cap_ids,
    )


def build_instruct(music: MusicEmbedding, question: TokenSequence, answer: TokenSequence,
                   tmpl: PromptTemplate, lm, append_eos: bool = False) -> MixedSequence:
    """[template-pre | music | question | answer-prefix | answer]; mask = answer only.

    The answer prefix is ordinary conditioning text: embedded, never masked.
    """
    if not question.ids:
        raise ValueError("question must be non-empty")
    if not answer.ids:
        raise ValueError("answer must be non-empty")
    if not tmpl.answer_prefix:
        raise ValueError("instruction tuning requires a non-empty answer prefix")
    pre_ids, pre_emb = _segment(lm, tmpl.pre_music)
    q_ids, q_emb = _segment(lm, question.text if question.text else "")
    if not q_ids:  # question may arrive as bare ids
        q_ids = list(question.ids)
        q_emb = lm.embed_tokens(q_ids)
    prefix_ids, prefix_emb = _segment(lm, tmpl.answer_prefix)
    ans_ids = list(answer.ids) + ([lm.eos_id] if append_eos else [])
    ans_emb = lm.embed_tokens(ans_ids)
    t_music = len(music)
    n_ctx = len(pre_ids) + t_music + len(q_ids) + len(prefix_ids)
    return MixedSequence(
        embeddings=torch.cat([pre_emb, music.values, q_emb, prefix_emb, ans_emb], dim=0),
        segment_tags=[SEG_PROMPT] * len(pre_ids) + [SEG_MUSIC] * t_music
                     + [SEG_PROMPT] * (len(q_ids) + len(prefix_ids)) + [SEG_ANSWER] * len(ans_ids),
        loss_mask=[False] * n_ctx + [True] * len(ans_ids),
        token_ids=pre_ids + [lm.pad_id] * t_music + q_ids + prefix_ids + ans_ids,
    )


def masked_lm_loss(logits: torch.Tensor, target_ids: torch.Tensor,
                   mask: torch.Tensor) -> torch.Tensor:
    """Mean next-token cross-entropy over masked target positions.

    Accepts [S, V] / [S] or batched [B, S, V] / [B, S] shapes. The target at
    position i is scored against the logits at position i - 1; only target
    ids at masked positions are ever read.
    """
    if logits.ndim == 2:
        logits = logits.unsqueeze(0)
        target_ids = torch.as_tensor(target_ids).unsqueeze(0)
        mask = torch.as_tensor(mask).unsqueeze(0)
    if logits.ndim != 3:
        raise ValueError(f"expected [S, V] or [B, S, V] logits, got {tuple(logits.shape)}")
    target_ids = torch.as_tensor(target_ids, dtype=torch.long)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if target_ids.shape != logits.shape[:2] or mask.shape != logits.shape[:2]:
        raise ValueError("target_ids and mask must match the logits sequence shape")
    if mask[:, 0].any():
        raise ValueError("position 0 has no predecessor to predict it from")
    if not mask.any():
        raise ValueError("loss needs at least one masked position")
    # Score target_ids[:, 1:] against logits[:, :-1] where masked.
    log_probs = torch.log_softmax(logits[:, :-1], dim=-1)
    picked = log_probs.gather(-1, target_ids[:, 1:].unsqueeze(-1)).squeeze(-1)
    keep = mask[:, 1:]
    return -(picked[keep]).mean()


def collate(sequences: list[MixedSequence], pad_id: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Right-pad a batch: zero embeddings, pad-id targets, false mask."""
    if not sequences:
        raise ValueError("empty batch")
    dim = sequences[0].embeddings.shape[1]
    width = max(len(s) for s in sequences)
    embs = torch.zeros(len(sequences), width, dim, dtype=torch.float64)
    targets = torch.full((len(sequences), width), pad_id, dtype=torch.long)
    mask = torch.zeros(len(sequences), width, dtype=torch.bool)
    for i, s in enumerate(sequences):
        n = len(s)
        embs[i, :n] = s.embeddings
        targets[i, :n] = torch.tensor(s.token_ids, dtype=torch.long)
        mask[i, :n] = torch.tensor(s.loss_mask, dtype=torch.bool)
    return embs, targets, mask
