"""Query-oriented mask decoder with masked cross-attention and deep supervision."""
from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .errors import ContractError, NumericError

MASK_PENALTY = 1e9


def positional_encoding(positions, channels: int, scene_range: float, min_wavelength: float = 2.0, axes=(0, 1, 2)):
    """Sinusoidal encoding per axis, zero-padded to ``channels``.

    Each axis gets ``channels // 6`` sin/cos pairs whose wavelengths are
    spaced geometrically from ``4 * scene_range`` down to ``min_wavelength``.
    Axes not listed in ``axes`` are left zero.
    """
    pos = torch.as_tensor(positions)
    if not pos.is_floating_point():
        pos = pos.double()
    n_freq = channels // 6
    out = pos.new_zeros(pos.shape[0], channels)
    if n_freq == 0:
        return out
    longest = 4 * scene_range
    if n_freq == 1:
        wavelengths = np.array([longest])
    else:
        wavelengths = np.geomspace(longest, min(min_wavelength, longest), n_freq)
    omega = torch.as_tensor(2 * np.pi / wavelengths, dtype=pos.dtype)
    for a in axes:
        phase = pos[:, a : a + 1] * omega
        block = torch.stack([torch.sin(phase), torch.cos(phase)], dim=2).flatten(1)
        out[:, a * 2 * n_freq : (a + 1) * 2 * n_freq] = block
    return out


def build_mask_embedding(point_feats: torch.Tensor, pos_enc: torch.Tensor) -> torch.Tensor:
    if point_feats.shape != pos_enc.shape:
        raise ContractError(f"point features {tuple(point_feats.shape)} vs positional encoding {tuple(pos_enc.shape)}")
    return point_feats + pos_enc


def mask_logits(queries: torch.Tensor, mask_embedding: torch.Tensor) -> torch.Tensor:
    return queries @ mask_embedding.T


def predict_masks(queries: torch.Tensor, mask_embedding: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(mask_logits(queries, mask_embedding))


def _check(x: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite values after {where}")
    return x


class Attention(nn.Module):
    """Scaled dot-product attention with separate query/key/value projections."""

    def __init__(self, dim: int, heads: int = 1):
        super().__init__()
        if dim % heads:
            raise ContractError("embedding dimension must be divisible by the head count")
        self.dim, self.heads = dim, heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)

    def weights(self, queries, keys, gate=None):
        """Attention weights of shape ``(heads, n_queries, n_keys)``.

        ``gate`` is a boolean ``(n_queries, n_keys)`` array of suppressed keys.
        """
        h, d = self.heads, self.dim // self.heads
        q = self.q(queries).view(-1, h, d).transpose(0, 1)
        k = self.k(keys).view(-1, h, d).transpose(0, 1)
        logits = q @ k.transpose(1, 2) / math.sqrt(self.dim)
        if gate is not None:
            logits = logits - MASK_PENALTY * gate.to(logits.dtype)
        return torch.softmax(logits, dim=-1)

    def forward(self, queries, keys, gate=None):
        h, d = self.heads, self.dim // self.heads
        attn = self.weights(queries, keys, gate)
        v = self.v(keys).view(-1, h, d).transpose(0, 1)
        return (attn @ v).transpose(0, 1).reshape(-1, self.dim)


def attention_gate(prev_mask: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Keys to suppress: outside the previous mask, unless that leaves a row empty."""
    gate = prev_mask.detach() < threshold
    gate[gate.all(dim=1)] = False
    return gate


class DecoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int = 1, ffn_mult: int = 4):
        super().__init__()
        self.cross = Attention(dim, heads)
        self.self_attn = Attention(dim, heads)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_mult * dim), nn.ReLU(), nn.Linear(ffn_mult * dim, dim))
        self.norm_cross = nn.LayerNorm(dim)
        self.norm_self = nn.LayerNorm(dim)
        self.norm_ffn = nn.LayerNorm(dim)

    def cross_attention(self, queries, point_feats, prev_mask=None, threshold=0.5):
        """Residual masked cross-attention output, before normalisation."""
        gate = None if prev_mask is None else attention_gate(prev_mask, threshold)
        return self.cross(queries, point_feats, gate) + queries

    def forward(self, queries, point_feats, prev_mask, mask_embedding, masked=True, threshold=0.5):
        """Return ``(updated queries, mask logits)``."""
        if prev_mask.shape != (queries.shape[0], point_feats.shape[0]):
            raise ContractError(f"previous mask has shape {tuple(prev_mask.shape)}")
        q = self.norm_cross(self.cross_attention(queries, point_feats, prev_mask if masked else None, threshold))
        _check(q, "masked cross-attention")
        q = _check(self.norm_self(self.self_attn(q, q) + q), "self-attention")
        q = _check(self.norm_ffn(self.ffn(q) + q), "feed-forward")
        return q, mask_logits(q, mask_embedding)


class MaskDecoder(nn.Module):
    def __init__(self, dim: int, n_blocks: int = 3, heads: int = 1, ffn_mult: int = 4, threshold: float = 0.5):
        super().__init__()
        if n_blocks < 1:
            raise ContractError("decoder needs at least one block")
        self.blocks = nn.ModuleList(DecoderBlock(dim, heads, ffn_mult) for _ in range(n_blocks))
        self.threshold = threshold

    def forward(self, queries, point_feats_per_block, mask_embedding, masked=True):
        """Mask logits of every block, ``[M_1, ..., M_L]``, plus the final queries.

        ``point_feats_per_block[i]`` feeds the cross-attention of block ``i``.
        """
        if len(point_feats_per_block) != len(self.blocks):
            raise ContractError(f"{len(point_feats_per_block)} point embeddings for {len(self.blocks)} blocks")
        if queries.shape[0] == 0:
            return [], queries
        prev = predict_masks(queries, mask_embedding)
        logits = []
        for block, feats in zip(self.blocks, point_feats_per_block):
            queries, lg = block(queries, feats, prev, mask_embedding, masked, self.threshold)
            logits.append(lg)
            prev = torch.sigmoid(lg)
        return logits, queries


def decode(decoder: MaskDecoder, queries, point_feats_per_block, mask_embedding, masked=True):
    """Soft masks ``[M_1, ..., M_L]`` in (0, 1) and the final queries."""
    logits, final = decoder(queries, point_feats_per_block, mask_embedding, masked)
    return [torch.sigmoid(lg) for lg in logits], final
