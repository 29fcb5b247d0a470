"""Central finite-difference verification of autograd gradients."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
import torch

from .data import SyntheticConfig, generate_synthetic
from .errors import GradientCheckError
from .training import Batch, CMESModel, TrainConfig, build_model, compute_losses, epoch_batches, make_sampler, \
    prepare_splits

logger = logging.getLogger(__name__)

# Relative error uses max(|analytic|, |numeric|, REL_FLOOR) as denominator. With
# eps = 1e-5 a loss of size ~100 carries ~3e-9 of cancellation noise in every
# central difference, so gradients below the floor are held to an absolute 1e-8.
REL_FLOOR = 1e-4


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict[str, float]
    checked: int
    # one-sided probes at clamped-zero constrained weights, excluded from the max
    boundary: dict[str, list[float]] = field(default_factory=dict)

    def worst(self) -> str:
        return max(self.per_tensor, key=self.per_tensor.get) if self.per_tensor else ""


def rel_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_FLOOR)


def gradient_check(loss_fn: Callable[[], torch.Tensor], named_params: Iterable[tuple[str, torch.Tensor]],
                   eps: float = 1e-5, n_coords: int = 20, seed: int = 0,
                   constrained: Iterable[str] = ()) -> GradCheckReport:
    """Compare autograd against (f(x+eps) - f(x-eps)) / 2eps on random coordinates.

    ``loss_fn`` must be a deterministic function of the parameters. Tensors named
    in ``constrained`` are kept >= 0 during training; a coordinate sitting at
    exactly zero there is probed with a forward difference and reported apart.
    """
    named = [(name, p) for name, p in named_params if p.requires_grad]
    constrained = set(constrained)
    for _, p in named:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {}
    for name, p in named:
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        if not torch.isfinite(g).all():
            raise GradientCheckError(f"non-finite gradient in {name}")
        analytic[name] = g.detach().clone()

    rng = np.random.default_rng(seed)
    per_tensor, boundary, checked = {}, {}, 0
    with torch.no_grad():
        for name, p in named:
            flat = p.view(-1)
            k = min(n_coords, flat.numel())
            coords = rng.choice(flat.numel(), size=k, replace=False)
            worst = 0.0
            for idx in coords.tolist():
                orig = flat[idx].item()
                a = analytic[name].view(-1)[idx].item()
                if name in constrained and orig == 0.0:
                    flat[idx] = eps
                    up = loss_fn().item()
                    flat[idx] = orig
                    numeric = (up - loss_fn().item()) / eps
                    boundary.setdefault(name, []).append(rel_error(a, numeric))
                    continue
                flat[idx] = orig + eps
                up = loss_fn().item()
                flat[idx] = orig - eps
                down = loss_fn().item()
                flat[idx] = orig
                err = rel_error(a, (up - down) / (2 * eps))
                worst = max(worst, err)
                checked += 1
            per_tensor[name] = worst
    report = GradCheckReport(max(per_tensor.values(), default=0.0), per_tensor, checked, boundary)
    logger.info("gradient check: max rel error %.3g (%s), %d coordinates", report.max_rel_error,
                report.worst(), checked)
    return report


def tiny_instance(seed: int = 0, model: str = "ncd", strategy: str = "cmes",
                  balance: float = 1.0) -> tuple[CMESModel, Batch, TrainConfig]:
    """Seeded 10-student / 15-exercise / 8-concept problem and one full batch."""
    ds, _ = generate_synthetic(SyntheticConfig(num_students=10, num_exercises=15, num_concepts=8,
                                               logs_per_student=6, concepts_per_exercise=(1, 2)), seed=seed)
    config = TrainConfig(model=model, strategy=strategy, n=2, clusters=2, balance=balance,
                         batch_size=10_000, seed=seed, hidden=(5, 4))
    splits = prepare_splits(ds, config)
    net = build_model(config, ds.num_students, ds.q_matrix)
    # move away from the symmetric initial point
    gen = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for p in net.parameters():
            p.add_(0.3 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    net.clamp()
    batch = next(iter(epoch_batches(config, splits, make_sampler(config, splits, ds), epoch=0)))
    return net, batch, config


def check_model(net: CMESModel, batch: Batch, config: TrainConfig, eps: float = 1e-5,
                n_coords: int = 20, seed: int = 0) -> GradCheckReport:
    """Gradient check of the full composite loss with pseudo labels held fixed."""
    labels = compute_losses(net, batch, config.balance, config.threshold).labels

    def loss_fn():
        return compute_losses(net, batch, config.balance, config.threshold, labels=labels).total

    constrained = set()
    for prefix, copy in (("f1", net.f1), ("f2", net.f2)):
        if copy is not None:
            ids = {id(w) for w in copy.constrained()}
            constrained |= {f"{prefix}.{n}" for n, p in copy.named_parameters() if id(p) in ids}
    return gradient_check(loss_fn, net.named_parameters(), eps, n_coords, seed, constrained)
