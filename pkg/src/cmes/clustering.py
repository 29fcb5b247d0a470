"""Grouping students by per-concept performance."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import QMatrix, StudentProfile, Triplet, as_arrays
from .errors import ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StudentFeature:
    student_id: int
    vector: np.ndarray


@dataclass
class ClusterAssignment:
    num_clusters: int
    assignment: dict[int, int]
    centroids: np.ndarray
    inertia_history: list[float] = field(default_factory=list)

    def labels_for(self, num_students: int, missing: int = -1) -> np.ndarray:
        """Dense label array; students without an assignment get ``missing``."""
        num_students = max(num_students, max(self.assignment, default=-1) + 1)
        labels = np.full(num_students, missing, dtype=np.int64)
        for s, c in self.assignment.items():
            labels[s] = c
        return labels

    def write(self, path):
        with open(path, "w") as fh:
            fh.write("student_id,cluster_id\n")
            for s, c in sorted(self.assignment.items()):
                fh.write(f"{s},{c}\n")


def student_features(profiles: Mapping[int, StudentProfile], train: Sequence[Triplet],
                     q_matrix: QMatrix) -> list[StudentFeature]:
    """Laplace-smoothed correct rate per concept: (correct + 1) / (attempts + 2)."""
    students, exercises, responses = as_arrays(train)
    ids = sorted(profiles)
    row = {s: i for i, s in enumerate(ids)}
    C = q_matrix.num_concepts
    attempts = np.zeros((len(ids), C))
    correct = np.zeros((len(ids), C))
    if len(ids):
        keep = np.fromiter((s in row for s in students.tolist()), dtype=bool, count=len(students))
        rows = np.fromiter((row[s] for s in students[keep].tolist()), dtype=np.int64)
        q = q_matrix.dense[exercises[keep]].astype(float)
        np.add.at(attempts, rows, q)
        np.add.at(correct, rows, q * responses[keep, None])
    features = (correct + 1.0) / (attempts + 2.0)
    return [StudentFeature(s, features[i]) for i, s in enumerate(ids)]


def _sq_dists(X, centroids):
    # explicit differences keep the reduction order fixed and avoid cancellation
    return ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _kmeans_pp(X, k, rng):
    n = len(X)
    centers = [int(rng.integers(n))]
    closest = _sq_dists(X, X[centers])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every point coincides with a chosen center
            remaining = np.setdiff1d(np.arange(n), centers)
            idx = int(rng.choice(remaining))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers.append(idx)
        closest = np.minimum(closest, _sq_dists(X, X[[idx]])[:, 0])
    return X[centers].copy()


def _repair_empty(X, labels, centroids, dists):
    """Move the point farthest from its centroid into each empty cluster."""
    k = len(centroids)
    for c in range(k):
        counts = np.bincount(labels, minlength=k)
        if counts[c] > 0:
            continue
        own = dists[np.arange(len(X)), labels]
        # only steal from clusters that keep at least one member
        own = np.where(counts[labels] > 1, own, -np.inf)
        far = int(np.argmax(own))
        labels[far] = c
        centroids[c] = X[far]
        dists[far] = _sq_dists(X[[far]], centroids)[0]
    return labels


def _inertia(X, labels, centroids):
    return float(((X - centroids[labels]) ** 2).sum())


def kmeans(features: Sequence[StudentFeature], num_clusters: int, seed: int = 0,
           max_iters: int = 100, tol: float = 1e-6) -> ClusterAssignment:
    """Lloyd's algorithm with k-means++ seeding.

    Ties in the nearest-centroid step go to the lowest cluster id (``argmin``).
    Empty clusters are re-seeded with the point farthest from its centroid.
    """
    n = len(features)
    if num_clusters < 1:
        raise ValidationError("num_clusters must be >= 1")
    if num_clusters > n:
        raise ValidationError(f"num_clusters={num_clusters} exceeds number of students ({n})")
    X = np.stack([f.vector for f in features]).astype(float)
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(X, num_clusters, rng)

    history = []
    for it in range(max_iters):
        dists = _sq_dists(X, centroids)
        labels = np.argmin(dists, axis=1)
        labels = _repair_empty(X, labels, centroids, dists)
        history.append(_inertia(X, labels, centroids))
        new = np.stack([X[labels == c].mean(axis=0) for c in range(num_clusters)])
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        if shift < tol:
            break
    else:
        logger.info("kmeans stopped at max_iters=%d", max_iters)

    dists = _sq_dists(X, centroids)
    labels = np.argmin(dists, axis=1)
    if len(np.unique(labels)) < num_clusters:
        labels = _repair_empty(X, labels, centroids, dists)
        centroids = np.stack([X[labels == c].mean(axis=0) for c in range(num_clusters)])
    history.append(_inertia(X, labels, centroids))
    assignment = {f.student_id: int(c) for f, c in zip(features, labels)}
    return ClusterAssignment(num_clusters, assignment, centroids, history)
