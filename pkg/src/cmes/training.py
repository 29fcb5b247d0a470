"""Joint training of the feedback copy (f1) and the diagnosis copy (f2)."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import nn

from . import clustering
from .data import Dataset, QMatrix, Triplet, as_arrays, build_profiles, split_per_student, subsample_per_student
from .errors import ConfigError, DivergenceError
from .feedback import feedback_loss, pseudo_labels
from .metrics import MetricsReport, evaluate
from .mixer import Mixer
from .models import DiagnosisModel, ModelKind, clamp_nonnegative, init_parameters
from .sampler import CollaborativeSampler, RandomSampler

logger = logging.getLogger(__name__)

STRATEGIES = ("original", "rss", "cmes")
LOG_EPS = 1e-12


@dataclass
class TrainConfig:
    model: str = "ncd"
    strategy: str = "cmes"
    n: int = 20
    clusters: int = 50          # 0 disables the cross-cluster requirement
    alpha_w: float = 0.5
    beta_w: float = 1.5
    balance: float = 1.0        # weight of the feedback loss
    lr: float = 2e-3
    batch_size: int = 256
    epochs: int = 100
    patience: int = 5
    seed: int = 0
    train_frac: float = 1.0
    dim: int | None = None      # defaults to the number of concepts
    hidden: tuple[int, int] = (64, 32)
    threshold: float = 0.5
    threads: int = 1

    def __post_init__(self):
        self.hidden = tuple(self.hidden)

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        ModelKind(self.model)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.balance < 0:
            raise ConfigError("balance must be >= 0")
        if self.n < 0 or self.clusters < 0:
            raise ConfigError("n and clusters must be >= 0")
        if not 0 < self.train_frac <= 1:
            raise ConfigError("train_frac must be in (0, 1]")
        if self.epochs < 0 or self.patience < 1:
            raise ConfigError("epochs must be >= 0 and patience >= 1")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


class Splits(NamedTuple):
    train: list[Triplet]
    val: list[Triplet]
    test: list[Triplet]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for part in self:
            h.update(np.asarray(part, dtype=np.int64).tobytes())
            h.update(b"|")
        return h.hexdigest()[:16]


def prepare_splits(dataset: Dataset, config: TrainConfig) -> Splits:
    train, val, test = split_per_student(dataset.interactions, seed=config.seed)
    if config.train_frac < 1:
        train = subsample_per_student(train, config.train_frac, seed=config.seed)
    return Splits(train, val, test)


# --------------------------------------------------------------------------- model assembly

class CMESModel(nn.Module):
    """Shared exercise mixer plus the two diagnosis copies.

    ``f1`` is absent for the original strategy and attention is only
    allocated for the cmes strategy.
    """

    def __init__(self, config: TrainConfig, num_students: int, q_matrix: QMatrix):
        super().__init__()
        C = q_matrix.num_concepts
        dim = C if config.dim is None else config.dim
        self.strategy = config.strategy
        self.mixer = Mixer(q_matrix, dim, config.alpha_w, config.beta_w,
                           with_attention=config.strategy == "cmes")
        self.f2 = DiagnosisModel(config.model, num_students, dim, C, config.hidden)
        self.f1 = (DiagnosisModel(config.model, num_students, dim, C, config.hidden)
                   if config.strategy != "original" else None)

    def clamp(self):
        clamp_nonnegative(self.f2)
        if self.f1 is not None:
            clamp_nonnegative(self.f1)

    def exercise_inputs(self, exercises: torch.Tensor):
        return self.mixer.embedding(exercises), self.mixer.q[exercises]

    @torch.no_grad()
    def predict(self, students, exercises, chunk: int = 8192) -> np.ndarray:
        students = torch.as_tensor(students, dtype=torch.long)
        exercises = torch.as_tensor(exercises, dtype=torch.long)
        out = []
        for i in range(0, len(students), chunk):
            vec, mask = self.exercise_inputs(exercises[i:i + chunk])
            out.append(self.f2(students[i:i + chunk], vec, mask))
        if not out:
            return np.zeros(0)
        return torch.cat(out).numpy()


def build_model(config: TrainConfig, num_students: int, q_matrix: QMatrix) -> CMESModel:
    model = CMESModel(config, num_students, q_matrix)
    init_parameters(model, torch.Generator().manual_seed(config.seed))
    return model


# --------------------------------------------------------------------------- losses

def loss_inter(y: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
    r = r.to(y.dtype)
    return -(r * torch.log(y.clamp(min=LOG_EPS)) + (1 - r) * torch.log((1 - y).clamp(min=LOG_EPS))).sum()


def loss_uninter(y: torch.Tensor, labels: torch.Tensor, students: torch.Tensor,
                 totals: torch.Tensor | None = None) -> torch.Tensor:
    """Cross-entropy against pseudo labels: mean within each student, summed over students.

    ``totals[m]`` is the size of the owning student's whole mixed-sample set. When
    a batch holds only part of that set, each sample is divided by the full size so
    the batch terms of one epoch add up to the full-set loss. Without ``totals`` the
    samples given are taken to be the complete set.
    """
    if y.numel() == 0:
        return y.new_zeros(())
    ce = -(labels * torch.log(y.clamp(min=LOG_EPS)) + (1 - labels) * torch.log((1 - y).clamp(min=LOG_EPS)))
    if totals is not None:
        return (ce / totals.to(y.dtype)).sum()
    _, inverse = torch.unique(students, return_inverse=True)
    k = int(inverse.max()) + 1
    sums = y.new_zeros(k).index_add(0, inverse, ce)
    counts = torch.bincount(inverse, minlength=k).to(y.dtype)
    return (sums / counts).sum()


def total_loss(l_inter, l_uninter, l_feedback, balance: float):
    return (l_inter + l_uninter) + balance * l_feedback


@dataclass
class Batch:
    students: torch.Tensor
    exercises: torch.Tensor
    responses: torch.Tensor
    attached: torch.Tensor      # (B, n), -1 padded
    grouped: torch.Tensor       # (B,) entry has a mix group
    mixed_total: torch.Tensor | None = None  # (B,) student's mixed samples in the epoch


@dataclass
class StepLosses:
    inter: torch.Tensor
    uninter: torch.Tensor
    feedback: torch.Tensor
    total: torch.Tensor
    labels: torch.Tensor
    scores_f1: torch.Tensor
    num_mixed: int


def mixed_inputs(model: CMESModel, batch: Batch):
    """Flat mixed-sample vectors, masks and owning entry indices for a batch."""
    g = torch.nonzero(batch.grouped).squeeze(-1)
    attached = batch.attached[g]
    if model.strategy == "cmes":
        stack = torch.cat([batch.exercises[g].unsqueeze(1), attached], dim=1)
        valid = stack >= 0
        mixed, union = model.mixer.mix(stack, valid)
        rows, cols = torch.nonzero(valid, as_tuple=True)
        vectors = mixed[rows, cols]
        masks = union[rows]
    else:
        valid = attached >= 0
        rows, cols = torch.nonzero(valid, as_tuple=True)
        vectors, masks = model.exercise_inputs(attached[rows, cols])
    return vectors, masks, g[rows]


def compute_losses(model: CMESModel, batch: Batch, balance: float, threshold: float = 0.5,
                   labels: torch.Tensor | None = None) -> StepLosses:
    """Assemble all loss terms for one batch.

    Pseudo labels come from the current f1 and are constants; pass ``labels``
    to hold them fixed (finite-difference checks).
    """
    vec, mask = model.exercise_inputs(batch.exercises)
    y2 = model.f2(batch.students, vec, mask)
    l_inter = loss_inter(y2, batch.responses)
    zero = l_inter.new_zeros(())
    if model.f1 is None or not bool(batch.grouped.any()):
        empty = l_inter.new_zeros(0)
        return StepLosses(l_inter, zero, zero, total_loss(l_inter, zero, zero, balance), empty, empty, 0)

    vectors, masks, entry = mixed_inputs(model, batch)
    mixed_students = batch.students[entry]
    y1_inter = model.f1(batch.students, vec, mask)
    y1_mixed = model.f1(mixed_students, vectors, masks)
    l_fb = feedback_loss(batch.responses, y1_inter, y1_mixed, entry)
    if labels is None:
        labels = pseudo_labels(y1_mixed, threshold)
    y2_mixed = model.f2(mixed_students, vectors, masks)
    totals = batch.mixed_total[entry] if batch.mixed_total is not None else None
    l_un = loss_uninter(y2_mixed, labels, mixed_students, totals)
    return StepLosses(l_inter, l_un, l_fb, total_loss(l_inter, l_un, l_fb, balance), labels,
                      y1_mixed.detach(), len(entry))


# --------------------------------------------------------------------------- checkpoints

def make_checkpoint(model: CMESModel, config: TrainConfig, epoch: int, num_students: int,
                    splits: Splits | None = None) -> dict:
    return {
        "tensors": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "shapes": {k: list(v.shape) for k, v in model.state_dict().items()},
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "epoch": epoch,
        "num_students": num_students,
        "data_hash": splits.fingerprint() if splits is not None else None,
        # every stochastic choice is derived from (seed, epoch)
        "rng_state": {"seed": config.seed, "epoch": epoch},
    }


def save_checkpoint(checkpoint: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(checkpoint, path)
    return path


def load_checkpoint(path) -> dict:
    return torch.load(Path(path), map_location="cpu", weights_only=True)


def model_from_checkpoint(checkpoint: dict, q_matrix: QMatrix) -> tuple[CMESModel, TrainConfig]:
    config = TrainConfig.from_dict(checkpoint["config"])
    model = CMESModel(config, checkpoint["num_students"], q_matrix)
    model.load_state_dict(checkpoint["tensors"])
    return model, config


# --------------------------------------------------------------------------- loop

@dataclass
class EpochRecord:
    epoch: int
    report: MetricsReport
    loss_inter: float
    loss_uninter: float
    loss_feedback: float
    num_mixed: int
    seconds: float

    def csv_row(self) -> str:
        r = self.report
        return (f"{self.epoch},{r.split},{r.acc:.6f},{r.rmse:.6f},{r.auc:.6f},"
                f"{self.loss_inter:.6f},{self.loss_uninter:.6f},{self.loss_feedback:.6f}")


METRICS_HEADER = "epoch,split,acc,rmse,auc,loss_inter,loss_uninter,loss_feedback"


@dataclass
class TrainResult:
    model: CMESModel
    checkpoint: dict
    history: list[EpochRecord]
    splits: Splits
    best_epoch: int
    test_report: MetricsReport | None = None
    extras: dict = field(default_factory=dict)

    @property
    def f2(self) -> DiagnosisModel:
        return self.model.f2


def make_sampler(config: TrainConfig, splits: Splits, dataset: Dataset):
    profiles = build_profiles(splits.train, dataset.q_matrix)
    if config.strategy == "rss":
        return RandomSampler(profiles, dataset.num_exercises, config.n, config.seed)
    if config.strategy != "cmes":
        return None
    assignment = None
    if config.clusters > 0:
        feats = clustering.student_features(profiles, splits.train, dataset.q_matrix)
        k = min(config.clusters, len(feats))
        if k < config.clusters:
            logger.warning("clusters=%d exceeds profiled students; using %d", config.clusters, k)
        assignment = clustering.kmeans(feats, k, seed=config.seed)
    return CollaborativeSampler(profiles, assignment, splits.train, dataset.q_matrix, config.n, config.seed)


def evaluate_split(model: CMESModel, interactions: Sequence[Triplet], split: str, config: TrainConfig,
                   epoch: int | None = None) -> MetricsReport:
    s, e, r = as_arrays(interactions)
    preds = model.predict(s, e)
    return evaluate(preds, r, seed=config.seed, config_hash=config.hash(), epoch=epoch, split=split)


def _batches(arrays, attached, grouped, totals, order, batch_size):
    s, e, r = arrays
    for i in range(0, len(order), batch_size):
        idx = order[i:i + batch_size]
        yield Batch(torch.from_numpy(s[idx]), torch.from_numpy(e[idx]),
                    torch.from_numpy(r[idx]).to(torch.float64),
                    torch.from_numpy(attached[idx]), torch.from_numpy(grouped[idx]),
                    torch.from_numpy(totals[idx]))


def mixed_totals(students: np.ndarray, attached: np.ndarray, grouped: np.ndarray, with_source: bool) -> np.ndarray:
    """Per-entry size of the owning student's mixed-sample set for the epoch."""
    per_entry = ((attached >= 0).sum(axis=1) + int(with_source)) * grouped
    per_student = np.bincount(students, weights=per_entry, minlength=int(students.max(initial=-1)) + 1)
    return per_student[students].astype(np.float64)


def epoch_batches(config: TrainConfig, splits: Splits, sampler, epoch: int):
    arrays = as_arrays(splits.train)
    T = len(arrays[0])
    n = config.n
    if sampler is not None:
        plan = sampler.plan(epoch)
        attached, grouped = plan.attached_matrix(arrays[0], arrays[1], n)
    else:
        attached = np.full((T, n), -1, dtype=np.int64)
        grouped = np.zeros(T, dtype=bool)
    totals = mixed_totals(arrays[0], attached, grouped, with_source=config.strategy == "cmes")
    order = np.random.default_rng([config.seed, epoch, 0xBA7C]).permutation(T)
    return _batches(arrays, attached, grouped, totals, order, config.batch_size)


def train(config: TrainConfig, dataset: Dataset, splits: Splits | None = None,
          metrics_path=None, divergence_dir=None) -> TrainResult:
    """Train with early stopping on validation AUC and restore the best epoch."""
    config.validate()
    if config.strategy == "original" and (config.n != TrainConfig.n or config.clusters != TrainConfig.clusters):
        logger.debug("strategy=original ignores n/clusters")
    if config.threads:
        torch.set_num_threads(config.threads)
    splits = splits if splits is not None else prepare_splits(dataset, config)
    model = build_model(config, dataset.num_students, dataset.q_matrix)
    sampler = make_sampler(config, splits, dataset)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)

    history: list[EpochRecord] = []
    best_auc, best_epoch, best_state, stale = -math.inf, -1, copy.deepcopy(model.state_dict()), 0
    if metrics_path is not None:
        metrics_path = Path(metrics_path)
        if not metrics_path.exists():
            metrics_path.write_text(METRICS_HEADER + "\n")

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        sums = np.zeros(3)
        mixed = 0
        model.train()
        for batch in epoch_batches(config, splits, sampler, epoch):
            parts = compute_losses(model, batch, config.balance, config.threshold)
            if not torch.isfinite(parts.total):
                path = None
                if divergence_dir is not None:
                    path = save_checkpoint(make_checkpoint(model, config, epoch, dataset.num_students, splits),
                                           Path(divergence_dir) / "diverged.pt")
                raise DivergenceError(f"non-finite loss at epoch {epoch} "
                                      f"(inter={parts.inter.item()}, uninter={parts.uninter.item()}, "
                                      f"feedback={parts.feedback.item()})", path)
            optimizer.zero_grad()
            parts.total.backward()
            optimizer.step()
            model.clamp()
            sums += [parts.inter.item(), parts.uninter.item(), parts.feedback.item()]
            mixed += parts.num_mixed

        model.eval()
        report = evaluate_split(model, splits.val, "val", config, epoch)
        record = EpochRecord(epoch, report, *sums.tolist(), mixed, time.perf_counter() - t0)
        history.append(record)
        if metrics_path is not None:
            with metrics_path.open("a") as fh:
                fh.write(record.csv_row() + "\n")
        logger.info("epoch %d val auc=%.4f acc=%.4f rmse=%.4f inter=%.2f uninter=%.2f fb=%.2f (%.1fs)",
                    epoch, report.auc, report.acc, report.rmse, *sums, record.seconds)

        if report.auc > best_auc:
            best_auc, best_epoch, stale = report.auc, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
            if stale >= config.patience:
                logger.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break

    model.load_state_dict(best_state)
    model.eval()
    checkpoint = make_checkpoint(model, config, best_epoch, dataset.num_students, splits)
    test_report = evaluate_split(model, splits.test, "test", config, best_epoch) if splits.test else None
    return TrainResult(model, checkpoint, history, splits, best_epoch, test_report)
