"""Pairwise ranking task that produces pseudo labels for mixed samples."""
from __future__ import annotations

import logging

import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)


def feedback_loss(response: torch.Tensor, y_interacted: torch.Tensor, y_mixed: torch.Tensor,
                  entry: torch.Tensor | None = None) -> torch.Tensor:
    """BPR loss between each interacted score and the scores of its mixed samples.

    ``response`` and ``y_interacted`` are per entry; ``y_mixed`` is flat and
    ``entry[m]`` names the entry mixed sample ``m`` belongs to (identity when
    omitted). For a correct answer the interacted exercise should outrank its
    mixed samples, for a wrong answer the order flips.
    """
    if y_mixed.numel() == 0:
        logger.debug("empty feedback batch; loss is zero")
        return y_interacted.new_zeros(())
    if entry is None:
        entry = torch.arange(len(y_mixed))
    r = response[entry].to(y_mixed.dtype)
    diff = y_interacted[entry] - y_mixed
    return -(r * F.logsigmoid(diff) + (1 - r) * F.logsigmoid(-diff)).sum()


def pseudo_labels(scores: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Hard 0/1 labels (``score >= threshold``), detached from the graph."""
    return (scores.detach() >= threshold).to(scores.dtype)
