"""Interaction logs, Q-matrices, splits and synthetic populations."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import DataFormatError, ValidationError

logger = logging.getLogger(__name__)

INTERACTION_HEADER = ("student_id", "exercise_id", "score")
Q_HEADER = ("exercise_id", "concept_id")


class Triplet(NamedTuple):
    student: int
    exercise: int
    response: int


@dataclass(frozen=True)
class QMatrix:
    """Binary exercise x concept incidence, stored as sorted (exercise, concept) pairs."""

    num_exercises: int
    num_concepts: int
    pairs: tuple[tuple[int, int], ...]
    dense: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        pairs = tuple(sorted({(int(e), int(c)) for e, c in self.pairs}))
        dense = np.zeros((self.num_exercises, self.num_concepts), dtype=np.int8)
        for e, c in pairs:
            if not (0 <= e < self.num_exercises and 0 <= c < self.num_concepts):
                raise ValidationError(f"Q-matrix pair ({e}, {c}) out of range "
                                      f"{self.num_exercises}x{self.num_concepts}")
            dense[e, c] = 1
        empty = np.flatnonzero(dense.sum(axis=1) == 0)
        if len(empty):
            raise ValidationError(f"{len(empty)} exercise(s) reference no concept, "
                                  f"e.g. exercise {int(empty[0])}")
        dense.setflags(write=False)
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "dense", dense)

    @classmethod
    def from_dense(cls, matrix) -> "QMatrix":
        matrix = np.asarray(matrix)
        rows, cols = np.nonzero(matrix)
        return cls(matrix.shape[0], matrix.shape[1], tuple(zip(rows.tolist(), cols.tolist())))

    def concepts_of(self, exercise: int) -> frozenset[int]:
        return frozenset(np.flatnonzero(self.dense[exercise]).tolist())


@dataclass(frozen=True)
class Dataset:
    num_students: int
    num_exercises: int
    num_concepts: int
    interactions: tuple[Triplet, ...]
    q_matrix: QMatrix

    def __post_init__(self):
        object.__setattr__(self, "interactions", tuple(Triplet(*map(int, t)) for t in self.interactions))
        if self.q_matrix.num_exercises != self.num_exercises or self.q_matrix.num_concepts != self.num_concepts:
            raise ValidationError("Q-matrix shape does not match dataset sizes")
        seen = set()
        for s, e, r in self.interactions:
            if not 0 <= s < self.num_students:
                raise ValidationError(f"student id {s} out of range [0, {self.num_students})")
            if not 0 <= e < self.num_exercises:
                raise ValidationError(f"exercise id {e} out of range [0, {self.num_exercises})")
            if r not in (0, 1):
                raise ValidationError(f"response {r} not in {{0, 1}}")
            if (s, e) in seen:
                raise ValidationError(f"duplicate (student, exercise) pair ({s}, {e})")
            seen.add((s, e))


@dataclass(frozen=True)
class IdMap:
    """Position i holds the raw id that was re-indexed to i."""

    students: tuple[str, ...] = ()
    exercises: tuple[str, ...] = ()
    concepts: tuple[str, ...] = ()


@dataclass(frozen=True)
class StudentProfile:
    student_id: int
    exercises: frozenset[int]
    concepts: frozenset[int]

    @property
    def t(self) -> int:
        return len(self.exercises)


@dataclass(frozen=True)
class SyntheticConfig:
    num_students: int = 1000
    num_exercises: int = 300
    num_concepts: int = 20
    logs_per_student: int = 40
    concepts_per_exercise: tuple[int, int] = (1, 3)
    temperature: float = 0.15
    discrimination_range: tuple[float, float] = (0.5, 2.0)
    # overrides used by tests to force a known regime
    mastery: float | None = None
    difficulty: float | None = None

    def validate(self):
        if min(self.num_students, self.num_exercises, self.num_concepts) < 1:
            raise ValidationError("num_students, num_exercises and num_concepts must all be >= 1")
        if not 1 <= self.logs_per_student <= self.num_exercises:
            raise ValidationError(f"logs_per_student must be in [1, {self.num_exercises}]")
        lo, hi = self.concepts_per_exercise
        if not 1 <= lo <= hi <= self.num_concepts:
            raise ValidationError("concepts_per_exercise must satisfy 1 <= lo <= hi <= num_concepts")
        if self.temperature <= 0:
            raise ValidationError("temperature must be > 0")
        dlo, dhi = self.discrimination_range
        if not 0 < dlo <= dhi:
            raise ValidationError("discrimination_range must be positive and ordered")


@dataclass(frozen=True)
class SyntheticGroundTruth:
    mastery: np.ndarray         # N x C in [0, 1]
    difficulty: np.ndarray      # M in [0, 1]
    discrimination: np.ndarray  # M, > 0

    def to_json(self) -> dict:
        return {
            "mastery": self.mastery.tolist(),
            "difficulty": self.difficulty.tolist(),
            "discrimination": self.discrimination.tolist(),
        }

    @classmethod
    def from_json(cls, payload: dict) -> "SyntheticGroundTruth":
        return cls(
            mastery=np.asarray(payload["mastery"], dtype=float),
            difficulty=np.asarray(payload["difficulty"], dtype=float),
            discrimination=np.asarray(payload["discrimination"], dtype=float),
        )


def as_arrays(interactions: Sequence[Triplet]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if len(interactions) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty.copy(), empty.copy()
    arr = np.asarray(interactions, dtype=np.int64).reshape(-1, 3)
    return arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy()


# --------------------------------------------------------------------------- loading

def _parse_response(raw: str, line: int) -> int:
    raw = raw.strip()
    try:
        value = float(raw)
    except ValueError:
        raise DataFormatError(f"score {raw!r} is not a number", line) from None
    if value not in (0.0, 1.0):
        raise ValidationError(f"line {line}: score {raw!r} not in {{0, 1}}")
    return int(value)


def _read_rows(path, header: tuple[str, ...]) -> list[tuple[int, list[str]]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    rows = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        columns = None
        for record in reader:
            line = reader.line_num
            if not record or all(not cell.strip() for cell in record):
                continue
            if columns is None:
                names = [c.strip() for c in record]
                missing = [h for h in header if h not in names]
                if missing:
                    raise DataFormatError(f"header missing column(s) {missing}", line)
                columns = [names.index(h) for h in header]
                continue
            if len(record) <= max(columns):
                raise DataFormatError(f"expected {len(header)} fields, got {len(record)}", line)
            cells = [record[i].strip() for i in columns]
            if any(c == "" for c in cells):
                raise DataFormatError("empty field", line)
            rows.append((line, cells))
    return rows


def _index(raw_ids: Iterable[str]) -> tuple[str, ...]:
    unique = set(raw_ids)
    try:
        return tuple(sorted(unique, key=int))
    except ValueError:
        return tuple(sorted(unique))


def _build_triplets(rows, student_index: dict, exercise_index: dict) -> list[Triplet]:
    triplets = []
    seen = set()
    for line, (s, e, score) in rows:
        r = _parse_response(score, line)
        key = (student_index[s], exercise_index[e])
        if key in seen:
            logger.warning("line %d: duplicate response for student %s on exercise %s ignored", line, s, e)
            continue
        seen.add(key)
        triplets.append(Triplet(key[0], key[1], r))
    return triplets


def load_interactions(path) -> tuple[list[Triplet], IdMap]:
    """Parse a ``student_id,exercise_id,score`` file.

    Ids are re-indexed contiguously in sorted raw-id order (numeric when every
    id is an integer). Duplicate (student, exercise) records keep the first one.
    """
    rows = _read_rows(path, INTERACTION_HEADER)
    students = _index(c[0] for _, c in rows)
    exercises = _index(c[1] for _, c in rows)
    triplets = _build_triplets(rows, {s: i for i, s in enumerate(students)},
                               {e: i for i, e in enumerate(exercises)})
    return triplets, IdMap(students=students, exercises=exercises)


def load_dataset(interactions_path, q_path) -> tuple[Dataset, IdMap]:
    rows = _read_rows(interactions_path, INTERACTION_HEADER)
    q_rows = _read_rows(q_path, Q_HEADER)
    students = _index(c[0] for _, c in rows)
    exercises = _index([c[1] for _, c in rows] + [c[0] for _, c in q_rows])
    concepts = _index(c[1] for _, c in q_rows)
    ex_index = {e: i for i, e in enumerate(exercises)}
    c_index = {c: i for i, c in enumerate(concepts)}
    triplets = _build_triplets(rows, {s: i for i, s in enumerate(students)}, ex_index)
    q = QMatrix(len(exercises), len(concepts), tuple((ex_index[e], c_index[c]) for _, (e, c) in q_rows))
    dataset = Dataset(len(students), len(exercises), len(concepts), tuple(triplets), q)
    return dataset, IdMap(students, exercises, concepts)


def write_dataset(dataset: Dataset, directory, ground_truth: SyntheticGroundTruth | None = None) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = [directory / "interactions.csv", directory / "q_matrix.csv"]
    with written[0].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INTERACTION_HEADER)
        w.writerows(dataset.interactions)
    with written[1].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(Q_HEADER)
        w.writerows(dataset.q_matrix.pairs)
    if ground_truth is not None:
        written.append(directory / "ground_truth.json")
        written[-1].write_text(json.dumps(ground_truth.to_json()))
    return written


def load_ground_truth(path) -> SyntheticGroundTruth:
    return SyntheticGroundTruth.from_json(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------- filtering & splitting

def _group_by_student(interactions: Sequence[Triplet]) -> dict[int, list[Triplet]]:
    groups: dict[int, list[Triplet]] = {}
    for t in interactions:
        groups.setdefault(t.student, []).append(t)
    return dict(sorted(groups.items()))


def filter_min_logs(interactions: Sequence[Triplet], min_logs: int = 15) -> list[Triplet]:
    """Drop students with fewer than ``min_logs`` records and re-compact student ids."""
    if min_logs < 0:
        raise ValidationError("min_logs must be >= 0")
    groups = _group_by_student(interactions)
    kept = [s for s, g in groups.items() if len(g) >= min_logs]
    if min_logs == 0 and kept == list(range(len(kept))):
        return list(interactions)
    new_id = {s: i for i, s in enumerate(kept)}
    return [Triplet(new_id[t.student], t.exercise, t.response)
            for t in interactions if t.student in new_id]


def filter_dataset(dataset: Dataset, min_logs: int = 15) -> Dataset:
    kept = filter_min_logs(dataset.interactions, min_logs)
    n = len({t.student for t in kept})
    return Dataset(n, dataset.num_exercises, dataset.num_concepts, tuple(kept), dataset.q_matrix)


def split_per_student(interactions: Sequence[Triplet], ratios=(0.70, 0.10, 0.20), seed: int = 0):
    """Per-student shuffled train/val/test partition.

    Validation and test get ``floor(ratio * t)`` records each and the remainder
    goes to train. Students with fewer than 3 records are skipped.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValidationError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for student, logs in _group_by_student(interactions).items():
        t = len(logs)
        if t < 3:
            logger.warning("student %d has %d logs (< 3); skipped in split", student, t)
            continue
        n_val = math.floor(ratios[1] * t + 1e-9)
        n_test = math.floor(ratios[2] * t + 1e-9)
        order = rng.permutation(t)
        shuffled = [logs[i] for i in order]
        val.extend(shuffled[:n_val])
        test.extend(shuffled[n_val:n_val + n_test])
        train.extend(shuffled[n_val + n_test:])
    return train, val, test


def subsample_per_student(interactions: Sequence[Triplet], fraction: float, seed: int = 0) -> list[Triplet]:
    """Keep ``max(1, floor(fraction * t))`` records of every student."""
    if not 0 < fraction <= 1:
        raise ValidationError("fraction must be in (0, 1]")
    if fraction == 1:
        return list(interactions)
    rng = np.random.default_rng([seed, 0x5EED])
    out = []
    for logs in _group_by_student(interactions).values():
        k = max(1, math.floor(fraction * len(logs) + 1e-9))
        keep = np.sort(rng.choice(len(logs), size=k, replace=False))
        out.extend(logs[i] for i in keep)
    return out


def build_profiles(train: Sequence[Triplet], q_matrix: QMatrix) -> dict[int, StudentProfile]:
    profiles = {}
    for student, logs in _group_by_student(train).items():
        exercises = frozenset(t.exercise for t in logs)
        concepts = frozenset(np.flatnonzero(q_matrix.dense[sorted(exercises)].any(axis=0)).tolist())
        profiles[student] = StudentProfile(student, exercises, concepts)
    return profiles


# --------------------------------------------------------------------------- synthetic data

def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def generate_synthetic(config: SyntheticConfig, seed: int = 0) -> tuple[Dataset, SyntheticGroundTruth]:
    """Seeded student population with known per-concept mastery.

    Each exercise touches a uniform number of concepts in the configured range.
    A student answers ``logs_per_student`` distinct exercises drawn uniformly, and
    answers correctly with probability
    ``sigmoid(disc * (mean mastery over the exercise's concepts - difficulty) / temperature)``.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    N, M, C = config.num_students, config.num_exercises, config.num_concepts
    lo, hi = config.concepts_per_exercise

    q = np.zeros((M, C), dtype=np.int8)
    for e in range(M):
        k = int(rng.integers(lo, hi + 1))
        q[e, rng.choice(C, size=k, replace=False)] = 1

    mastery = rng.uniform(0.0, 1.0, size=(N, C))
    difficulty = rng.uniform(0.0, 1.0, size=M)
    discrimination = rng.uniform(*config.discrimination_range, size=M)
    if config.mastery is not None:
        mastery = np.full((N, C), float(config.mastery))
    if config.difficulty is not None:
        difficulty = np.full(M, float(config.difficulty))

    exercise_mastery = (mastery @ q.T) / q.sum(axis=1)  # N x M
    prob = _sigmoid(discrimination * (exercise_mastery - difficulty) / config.temperature)

    triplets = []
    for s in range(N):
        chosen = np.sort(rng.choice(M, size=config.logs_per_student, replace=False))
        responses = (rng.random(len(chosen)) < prob[s, chosen]).astype(int)
        triplets.extend(Triplet(s, int(e), int(r)) for e, r in zip(chosen, responses))

    dataset = Dataset(N, M, C, tuple(triplets), QMatrix.from_dense(q))
    return dataset, SyntheticGroundTruth(mastery, difficulty, discrimination)


def response_probabilities(truth: SyntheticGroundTruth, q_matrix: QMatrix, temperature: float) -> np.ndarray:
    """The generator's N x M correct-response probabilities."""
    q = q_matrix.dense.astype(float)
    exercise_mastery = (truth.mastery @ q.T) / q.sum(axis=1)
    return _sigmoid(truth.discrimination * (exercise_mastery - truth.difficulty) / temperature)
