"""Exercise embeddings, concept-weight enhancement and self-attention mixing."""
from __future__ import annotations

import math
import warnings

import torch
from torch import nn

from .data import QMatrix
from .errors import ConfigError, NumericError, ValidationError


class EmbeddingTable(nn.Module):
    """Trainable ``M x d`` exercise table; a one-hot row times the matrix is a row lookup."""

    def __init__(self, num_exercises: int, dim: int, dtype=torch.float64):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(num_exercises, dim, dtype=dtype))

    @property
    def num_exercises(self):
        return self.weight.shape[0]

    @property
    def dim(self):
        return self.weight.shape[1]

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        ids = torch.as_tensor(ids, dtype=torch.long)
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.num_exercises):
            raise IndexError(f"exercise id out of range [0, {self.num_exercises})")
        return self.weight[ids]


def embed(table: EmbeddingTable, exercise_id: int) -> torch.Tensor:
    return table(torch.tensor(exercise_id))


def concept_weights(q_matrix: QMatrix, alpha: float, beta: float, dtype=torch.float64) -> torch.Tensor:
    """``alpha`` where the Q-matrix is 0, ``beta`` where it is 1."""
    if not (alpha > 0 and beta > 0):
        raise ValidationError("alpha_w and beta_w must be positive")
    if not alpha < beta:
        raise ValidationError(f"alpha_w ({alpha}) must be smaller than beta_w ({beta})")
    q = torch.tensor(q_matrix.dense, dtype=dtype)
    return alpha + (beta - alpha) * q


def weight_enhance(vector: torch.Tensor, weight_row: torch.Tensor) -> torch.Tensor:
    if vector.shape[-1] != weight_row.shape[-1]:
        raise ConfigError(f"weight enhancement needs d == C, got d={vector.shape[-1]}, "
                          f"C={weight_row.shape[-1]}")
    return vector * weight_row


class AttentionParams(nn.Module):
    def __init__(self, dim: int, dtype=torch.float64):
        super().__init__()
        self.w_q = nn.Parameter(torch.empty(dim, dim, dtype=dtype))
        self.w_k = nn.Parameter(torch.empty(dim, dim, dtype=dtype))
        self.w_v = nn.Parameter(torch.empty(dim, dim, dtype=dtype))

    @property
    def dim(self):
        return self.w_q.shape[0]


def attention_logits(stack: torch.Tensor, params: AttentionParams) -> torch.Tensor:
    if not torch.isfinite(stack).all():
        raise NumericError("non-finite value in attention input")
    q = stack @ params.w_q
    k = stack @ params.w_k
    return q @ k.transpose(-1, -2) / math.sqrt(stack.shape[-1])


def attention_weights(stack: torch.Tensor, params: AttentionParams,
                      key_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Row-softmax of the scaled logits; masked keys (``key_mask == False``) get weight 0."""
    logits = attention_logits(stack, params)
    if key_mask is not None:
        logits = logits.masked_fill(~key_mask.unsqueeze(-2), float("-inf"))
    logits = logits - logits.amax(dim=-1, keepdim=True).detach()
    w = torch.exp(logits)
    return w / w.sum(dim=-1, keepdim=True)


def attention_mix(stack: torch.Tensor, params: AttentionParams,
                  key_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Scaled dot-product self-attention over a ``(..., n+1, d)`` stack."""
    return attention_weights(stack, params, key_mask) @ (stack @ params.w_v)


class Mixer(nn.Module):
    """Shared embedding table + attention used by both diagnosis copies."""

    def __init__(self, q_matrix: QMatrix, dim: int | None = None, alpha_w: float = 0.5,
                 beta_w: float = 1.5, dtype=torch.float64, with_attention: bool = True):
        super().__init__()
        C = q_matrix.num_concepts
        dim = C if dim is None else dim
        self.embedding = EmbeddingTable(q_matrix.num_exercises, dim, dtype)
        self.attention = AttentionParams(dim, dtype) if with_attention else None
        self.register_buffer("q", torch.tensor(q_matrix.dense, dtype=dtype))
        self.register_buffer("q_weights", concept_weights(q_matrix, alpha_w, beta_w, dtype))
        self.enhance = dim == C
        if not self.enhance and with_attention:
            warnings.warn(f"embedding size {dim} != number of concepts {C}: "
                          "concept-weight enhancement is DISABLED", stacklevel=2)

    @property
    def dim(self):
        return self.embedding.dim

    def mix(self, stack_ids: torch.Tensor, valid: torch.Tensor):
        """Mix padded ``(B, L)`` exercise stacks (row 0 = interacted exercise).

        Returns the ``(B, L, d)`` attention output and the ``(B, C)`` union of the
        valid rows' Q rows.
        """
        ids = stack_ids.clamp(min=0)
        x = self.embedding(ids)
        if self.enhance:
            x = weight_enhance(x, self.q_weights[ids])
        mixed = attention_mix(x, self.attention, valid)
        mask = (self.q[ids] * valid.unsqueeze(-1)).amax(dim=1)
        return mixed, mask
