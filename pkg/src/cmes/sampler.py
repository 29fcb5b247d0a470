"""Collaboration-aware sampling of un-interacted exercises.

For a student, the eligible pool holds exercises that someone in a *different*
cluster answered, that share no concept with the student's interacted concepts,
and that the student has not answered. ``2n`` candidates are drawn from the pool
with probability proportional to the number of other-cluster answerers, and each
interacted exercise is then paired with ``n`` of those candidates.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .clustering import ClusterAssignment
from .data import QMatrix, StudentProfile, Triplet, as_arrays

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CandidateSet:
    student_id: int
    candidates: tuple[int, ...]
    weights: dict[int, int]

    def __len__(self):
        return len(self.candidates)


@dataclass(frozen=True)
class MixGroup:
    student_id: int
    source: int
    attached: tuple[int, ...]


def other_cluster_answerers(train: Sequence[Triplet], labels: np.ndarray, num_exercises: int,
                            num_clusters: int) -> np.ndarray:
    """``out[e, w]`` = distinct train answerers of ``e`` whose cluster is not ``w``."""
    students, exercises, _ = as_arrays(train)
    pairs = np.unique(np.stack([students, exercises], axis=1), axis=0) if len(students) else np.zeros((0, 2), int)
    per_cluster = np.zeros((num_exercises, num_clusters), dtype=np.int64)
    cl = labels[pairs[:, 0]]
    ok = cl >= 0
    np.add.at(per_cluster, (pairs[ok, 1], cl[ok]), 1)
    return per_cluster.sum(axis=1, keepdims=True) - per_cluster


def _pool_from_counts(profile: StudentProfile, counts: np.ndarray, q_matrix: QMatrix) -> np.ndarray:
    eligible = counts > 0
    if profile.concepts:
        eligible &= q_matrix.dense[:, sorted(profile.concepts)].sum(axis=1) == 0
    if profile.exercises:
        eligible[sorted(profile.exercises)] = False
    return np.flatnonzero(eligible)


def eligible_pool(profile: StudentProfile, clusters: ClusterAssignment, train: Sequence[Triplet],
                  q_matrix: QMatrix) -> set[int]:
    students = as_arrays(train)[0]
    num_students = max(max(clusters.assignment, default=-1), int(students.max(initial=-1))) + 1
    labels = clusters.labels_for(num_students)
    counts = other_cluster_answerers(train, labels, q_matrix.num_exercises, clusters.num_clusters)
    own = clusters.assignment[profile.student_id]
    return set(_pool_from_counts(profile, counts[:, own], q_matrix).tolist())


def sample_candidates(pool, popularity: Mapping[int, float], size: int, rng: np.random.Generator,
                      student_id: int = -1) -> CandidateSet:
    """Weighted draw without replacement; returns ``min(size, len(pool))`` exercises."""
    pool = np.asarray(sorted(pool), dtype=np.int64)
    if len(pool) == 0 or size <= 0:
        if len(pool) == 0:
            logger.debug("student %d: empty pool, skipped for augmentation", student_id)
        return CandidateSet(student_id, (), {})
    w = np.asarray([popularity[int(e)] for e in pool], dtype=float)
    k = min(size, len(pool))
    picked = rng.choice(pool, size=k, replace=False, p=w / w.sum())
    weights = {int(e): int(popularity[int(e)]) for e in picked}
    return CandidateSet(student_id, tuple(int(e) for e in picked), weights)


def attach_candidates(candidate_set: CandidateSet, profile: StudentProfile, n: int,
                      rng: np.random.Generator) -> list[MixGroup]:
    """One group per interacted exercise, each with ``min(n, |candidates|)`` uniform picks."""
    if len(candidate_set) == 0:
        return []
    cands = np.asarray(candidate_set.candidates)
    k = min(n, len(cands))
    groups = []
    for e in sorted(profile.exercises):
        attached = rng.choice(cands, size=k, replace=False) if k else cands[:0]
        groups.append(MixGroup(profile.student_id, e, tuple(int(a) for a in attached)))
    return groups


def prospective_samples(groups: Sequence[MixGroup]) -> int:
    return sum(len(g.attached) + 1 for g in groups)


def student_rng(seed: int, epoch: int, student: int) -> np.random.Generator:
    """Per-student stream; independent of iteration order."""
    return np.random.default_rng([seed, epoch, student])


@dataclass
class SamplingPlan:
    """Attachments for one epoch, keyed by (student, interacted exercise)."""

    epoch: int
    candidates: dict[int, CandidateSet]
    groups: dict[tuple[int, int], tuple[int, ...]]

    def attached_matrix(self, students: np.ndarray, exercises: np.ndarray, n: int):
        """``(len(students), n)`` attached ids padded with -1, and a has-group mask."""
        out = np.full((len(students), n), -1, dtype=np.int64)
        grouped = np.zeros(len(students), dtype=bool)
        for i, key in enumerate(zip(students.tolist(), exercises.tolist())):
            att = self.groups.get(key)
            if att is None:
                continue
            grouped[i] = True
            out[i, :len(att)] = att
        return out, grouped

    def dump(self, path):
        with open(path, "w") as fh:
            fh.write("student_id,exercise_id,weight\n")
            for s, cs in sorted(self.candidates.items()):
                for e in cs.candidates:
                    fh.write(f"{s},{e},{cs.weights[e]}\n")


class CollaborativeSampler:
    """Caches pool statistics so each epoch's plan is cheap to rebuild.

    ``clusters=None`` drops the cross-cluster requirement: every other answerer counts.
    """

    def __init__(self, profiles: Mapping[int, StudentProfile], clusters: ClusterAssignment | None,
                 train: Sequence[Triplet], q_matrix: QMatrix, n: int, seed: int):
        self.profiles = profiles
        self.clusters = clusters
        self.q_matrix = q_matrix
        self.n = n
        self.seed = seed
        num_students = max(profiles, default=-1) + 1
        if clusters is None:
            self._labels = np.zeros(num_students, dtype=np.int64)
            students, exercises, _ = as_arrays(train)
            counts = np.zeros((q_matrix.num_exercises, 1), dtype=np.int64)
            pairs = np.unique(np.stack([students, exercises], axis=1), axis=0)
            np.add.at(counts, (pairs[:, 1], 0), 1)
            self._counts = counts
        else:
            self._labels = clusters.labels_for(num_students)
            self._counts = other_cluster_answerers(train, self._labels, q_matrix.num_exercises,
                                                   clusters.num_clusters)
        self._pools = {s: _pool_from_counts(p, self._counts[:, self._labels[s]], q_matrix)
                       for s, p in profiles.items()}

    def pool(self, student: int) -> np.ndarray:
        return self._pools[student]

    def popularity(self, student: int) -> np.ndarray:
        """Length-M weights for ``student``'s cluster."""
        return self._counts[:, self._labels[student]]

    def candidates(self, student: int, rng: np.random.Generator) -> CandidateSet:
        pool = self._pools[student]
        pop = self.popularity(student)
        return sample_candidates(pool, {int(e): int(pop[e]) for e in pool}, 2 * self.n, rng, student)

    def plan(self, epoch: int) -> SamplingPlan:
        candidates, groups = {}, {}
        for s, profile in self.profiles.items():
            rng = student_rng(self.seed, epoch, s)
            cs = self.candidates(s, rng)
            candidates[s] = cs
            for g in attach_candidates(cs, profile, self.n, rng):
                groups[(s, g.source)] = g.attached
        return SamplingPlan(epoch, candidates, groups)


class RandomSampler:
    """Ablation baseline: ``n`` exercises drawn uniformly from all un-interacted ones."""

    def __init__(self, profiles: Mapping[int, StudentProfile], num_exercises: int, n: int, seed: int):
        self.profiles = profiles
        self.num_exercises = num_exercises
        self.n = n
        self.seed = seed

    def plan(self, epoch: int) -> SamplingPlan:
        groups = {}
        everything = np.arange(self.num_exercises)
        for s, profile in self.profiles.items():
            rng = student_rng(self.seed, epoch, s)
            uninteracted = np.setdiff1d(everything, sorted(profile.exercises))
            k = min(self.n, len(uninteracted))
            if k == 0:
                continue
            for e in sorted(profile.exercises):
                groups[(s, e)] = tuple(int(x) for x in rng.choice(uninteracted, size=k, replace=False))
        return SamplingPlan(epoch, {}, groups)
