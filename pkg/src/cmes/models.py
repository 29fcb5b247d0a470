"""IRT, MIRT and NCD diagnosis functions over exercise vectors.

Every model scores a (student, exercise-vector, concept-mask) triple, so the same
instance handles real exercises (vector = embedding row, mask = Q row) and mixed
samples (vector = attention output, mask = union of constituent Q rows).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .data import QMatrix
from .errors import ConfigError
from .mixer import EmbeddingTable


# sigmoid(30) = 1 - 9.4e-14, so outputs stay strictly inside (0, 1) in float64
LOGIT_BOUND = 30.0


def bounded_sigmoid(logit: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(logit.clamp(-LOGIT_BOUND, LOGIT_BOUND))


class ModelKind(str, enum.Enum):
    IRT = "irt"
    MIRT = "mirt"
    NCD = "ncd"


@dataclass
class MixedSample:
    student_id: int
    source: int
    constituents: tuple[int, ...]
    vector: torch.Tensor
    concept_mask: torch.Tensor
    pseudo_label: int | None = None


class DiagnosisModel(nn.Module):
    def __init__(self, kind: ModelKind | str, num_students: int, dim: int, num_concepts: int | None = None,
                 hidden: tuple[int, int] = (64, 32), dtype=torch.float64):
        super().__init__()
        self.kind = ModelKind(kind)
        num_concepts = dim if num_concepts is None else num_concepts
        if self.kind is ModelKind.NCD and dim != num_concepts:
            raise ConfigError(f"NCD needs exercise vectors aligned with concepts (d={dim}, C={num_concepts})")
        ability_dim = 1 if self.kind is ModelKind.IRT else dim
        self.theta = nn.Parameter(torch.empty(num_students, ability_dim, dtype=dtype))

        if self.kind is ModelKind.IRT:
            self.difficulty = nn.Linear(dim, 1, dtype=dtype)
            self.discrimination = nn.Linear(dim, 1, bias=False, dtype=dtype)
        elif self.kind is ModelKind.MIRT:
            self.difficulty = nn.Linear(dim, 1, dtype=dtype)
        else:
            self.discrimination = nn.Linear(dim, 1, bias=False, dtype=dtype)
            h1, h2 = hidden
            self.layer1 = nn.Linear(num_concepts, h1, dtype=dtype)
            self.layer2 = nn.Linear(h1, h2, dtype=dtype)
            self.layer3 = nn.Linear(h2, 1, dtype=dtype)

    def constrained(self) -> list[nn.Parameter]:
        """Weights kept elementwise >= 0 (NCD monotonicity)."""
        if self.kind is not ModelKind.NCD:
            return []
        return [self.layer1.weight, self.layer2.weight, self.layer3.weight]

    @torch.no_grad()
    def center_biases(self):
        """Make the constrained weights nonnegative and center layers 2-3 at zero.

        Inputs to those layers are sigmoid outputs near 0.5; with nonnegative
        weights and zero bias the initial logit would sit far above zero.
        """
        for layer in (self.layer1, self.layer2, self.layer3):
            layer.weight.abs_()
        for layer in (self.layer2, self.layer3):
            layer.bias.copy_(-0.5 * layer.weight.sum(dim=1))

    def forward(self, students: torch.Tensor, e_vec: torch.Tensor, q_mask: torch.Tensor | None = None):
        theta = self.theta[students]
        if self.kind is ModelKind.IRT:
            b = self.difficulty(e_vec).squeeze(-1)
            a = F.softplus(self.discrimination(e_vec)).squeeze(-1)
            logit = a * (theta.squeeze(-1) - b)
            return bounded_sigmoid(logit)
        if self.kind is ModelKind.MIRT:
            b = self.difficulty(e_vec).squeeze(-1)
            return bounded_sigmoid((theta * e_vec).sum(-1) - b)
        disc = torch.sigmoid(self.discrimination(e_vec))
        x = q_mask * (torch.sigmoid(theta) - torch.sigmoid(e_vec)) * disc
        x = torch.sigmoid(self.layer1(x))
        x = torch.sigmoid(self.layer2(x))
        return bounded_sigmoid(self.layer3(x)).squeeze(-1)

    @torch.no_grad()
    def mastery(self) -> torch.Tensor:
        """Per-concept proficiency sigmoid(theta) for MIRT/NCD; raw ability for IRT."""
        if self.kind is ModelKind.IRT:
            return self.theta.detach().squeeze(-1).clone()
        return torch.sigmoid(self.theta.detach())


def clamp_nonnegative(model: DiagnosisModel) -> DiagnosisModel:
    with torch.no_grad():
        for w in model.constrained():
            w.clamp_(min=0.0)
    return model


def init_parameters(module: nn.Module, generator: torch.Generator):
    """Xavier-uniform for every matrix, zeros for bias vectors.

    Parameters are visited in registration order so the draw is reproducible.
    """
    with torch.no_grad():
        for _, p in module.named_parameters():
            if p.dim() >= 2:
                nn.init.xavier_uniform_(p, generator=generator)
            else:
                p.zero_()
    for m in module.modules():
        if isinstance(m, DiagnosisModel) and m.kind is ModelKind.NCD:
            m.center_biases()
    return module


def predict_interacted(model: DiagnosisModel, student_id: int, exercise_id: int,
                       table: EmbeddingTable, q_matrix: QMatrix) -> float:
    if not 0 <= student_id < model.theta.shape[0]:
        raise IndexError(f"student id {student_id} out of range")
    e = torch.tensor([exercise_id])
    vec = table(e)
    mask = torch.as_tensor(q_matrix.dense[[exercise_id]], dtype=vec.dtype)
    with torch.no_grad():
        return float(model(torch.tensor([student_id]), vec, mask)[0])


def predict_mixed(model: DiagnosisModel, student_id: int, mixed: MixedSample) -> float:
    vec = mixed.vector.reshape(1, -1)
    mask = mixed.concept_mask.reshape(1, -1).to(vec.dtype)
    with torch.no_grad():
        return float(model(torch.tensor([student_id]), vec, mask)[0])
