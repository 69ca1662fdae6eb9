"""Instance-level encoders: region self-attention pooling and a bi-GRU over words."""
from __future__ import annotations

import torch
import torch.nn as nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .errors import InputError, NumericError
from .vocab import PAD_ID


def attention_pool(
    states: torch.Tensor, mask: torch.Tensor | None = None, temperature: float = 1.0
) -> tuple[torch.Tensor, torch.Tensor]:
    """Pool (B, K, D) states with their mean as the attention query.

    Logits are plain dot products query . state (optionally divided by
    ``temperature``); weights are a softmax over the unmasked positions.
    Returns the pooled (B, D) vectors and the (B, K) weights.
    """
    if mask is None:
        query = states.mean(dim=1)
    else:
        mask = mask.to(states.dtype)
        query = (states * mask.unsqueeze(-1)).sum(dim=1) / mask.sum(dim=1, keepdim=True)
    logits = torch.einsum("bkd,bd->bk", states, query) / temperature
    if mask is not None:
        logits = logits.masked_fill(mask == 0, float("-inf"))
    weights = torch.softmax(logits, dim=1)
    pooled = torch.einsum("bk,bkd->bd", weights, states)
    return pooled, weights


class RegionPooling(nn.Module):
    """Project region rows to the embedding space and attention-pool them."""

    def __init__(self, d_region: int, d_embed: int, temperature: float = 1.0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.proj = nn.Linear(d_region, d_embed, dtype=dtype)
        self.temperature = temperature

    def forward(
        self, regions: torch.Tensor, mask: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """regions: (B, K, d_region) -> pooled (B, d_embed), weights (B, K)."""
        if not torch.isfinite(regions).all():
            raise NumericError("non-finite region features")
        return attention_pool(self.proj(regions), mask, self.temperature)


class SentenceEncoder(nn.Module):
    """Bi-directional GRU; per-word state is the mean of both directions."""

    def __init__(self, vocab_size: int, word_dim: int, d_embed: int,
                 temperature: float = 1.0, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.vocab_size = vocab_size
        self.embedding = nn.Embedding(vocab_size, word_dim, padding_idx=PAD_ID)
        self.gru = nn.GRU(word_dim, d_embed, batch_first=True, bidirectional=True)
        self.temperature = temperature
        self.to(dtype)

    def forward(
        self, token_ids: torch.Tensor, lengths: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """token_ids: (B, N) -> word states (B, N, d_embed), pooled (B, d_embed), weights (B, N)."""
        if token_ids.numel() == 0 or int(lengths.min()) < 1:
            raise InputError("sentences must contain at least one token")
        if int(token_ids.min()) < 0 or int(token_ids.max()) >= self.vocab_size:
            raise InputError(
                f"token id out of range 0..{self.vocab_size - 1}: {int(token_ids.max())}"
            )
        embedded = self.embedding(token_ids)
        packed = pack_padded_sequence(
            embedded, lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        out, _ = self.gru(packed)
        padded, _ = pad_packed_sequence(out, batch_first=True, total_length=token_ids.shape[1])
        d = self.gru.hidden_size
        word_states = (padded[..., :d] + padded[..., d:]) / 2
        mask = (
            torch.arange(token_ids.shape[1], device=token_ids.device)[None, :]
            < lengths[:, None]
        )
        pooled, weights = attention_pool(word_states, mask, self.temperature)
        return word_states, pooled, weights
