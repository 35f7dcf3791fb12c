"""Binary K-means over embedding vectors for word-level NE seed tags.

The minority cluster is taken as the named-entity side (entities are a small
fraction of any vocabulary), yielding a 0/1 tag per token and a coarse NE
dictionary from the tag-1 tokens.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ClusterAssignment:
    centroids: np.ndarray          # (k, d)
    assignment: np.ndarray         # (n,) cluster index per input point
    iterations: int
    inertia: float                 # within-cluster sum of squares at convergence
    inertia_history: list[float] = None  # one value per assignment step


@dataclass
class SeedTags:
    tag: dict[str, int]            # token -> {0, 1}
    coarse_dictionary: set[str]    # exactly the tag-1 tokens


def _squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # (n, k) matrix of squared Euclidean distances
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = points[first]
    closest = np.einsum("nd,nd->n", points - centroids[0], points - centroids[0])
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all remaining points coincide with chosen centroids
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centroids[j] = points[idx]
        d = np.einsum("nd,nd->n", points - centroids[j], points - centroids[j])
        closest = np.minimum(closest, d)
    return centroids


def kmeans(vectors, k: int, seed: int = 0, max_iters: int = 100) -> ClusterAssignment:
    """Lloyd's algorithm with k-means++ seeding.

    Deterministic given `seed` and invariant to input point order: points are
    canonicalized to lexicographic order internally, so permuting the input
    only permutes the returned per-point assignments. An empty cluster is
    reseeded to the point currently farthest from its own centroid.
    """
    points = np.asarray(vectors, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError("kmeans: need a non-empty 2-D array of points")
    if not np.all(np.isfinite(points)):
        raise ValueError("kmeans: non-finite input point")
    if k > points.shape[0]:
        raise ValueError(f"kmeans: k={k} exceeds {points.shape[0]} points")

    order = np.lexsort(points.T[::-1])  # canonical point order
    canon = points[order]
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(canon, k, rng)

    assignment = np.full(canon.shape[0], -1, dtype=int)
    iterations = 0
    history: list[float] = []
    for iterations in range(1, max_iters + 1):
        d2 = _squared_distances(canon, centroids)
        new_assignment = d2.argmin(axis=1)

        for j in range(k):
            if not np.any(new_assignment == j):
                # reseed to the point farthest from its current centroid
                far = int(d2[np.arange(len(canon)), new_assignment].argmax())
                centroids[j] = canon[far]
                d2 = _squared_distances(canon, centroids)
                new_assignment = d2.argmin(axis=1)

        history.append(float(d2[np.arange(len(canon)), new_assignment].sum()))
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        for j in range(k):
            members = assignment == j
            if np.any(members):  # a duplicate-centroid cluster can stay empty
                centroids[j] = canon[members].mean(axis=0)

    original_order = np.empty_like(assignment)
    original_order[order] = assignment
    return ClusterAssignment(centroids=centroids, assignment=original_order,
                             iterations=iterations, inertia=history[-1],
                             inertia_history=history)


def cluster_vocabulary(tokens: list[str], embeddings, k: int = 2, seed: int = 0,
                       max_iters: int = 100) -> tuple[list[str], ClusterAssignment]:
    """Cluster the unique tokens' embedding vectors; tokens are sorted first."""
    uniq = sorted(set(tokens))
    vectors = embeddings.matrix(uniq)
    return uniq, kmeans(vectors, k=k, seed=seed, max_iters=max_iters)


def assign_seed_tags(assignment: ClusterAssignment, vocabulary: list[str]) -> SeedTags:
    """Tag the smaller of the two clusters as NE (tag 1); ties go to cluster 1."""
    if assignment.centroids.shape[0] != 2:
        raise ValueError("seed tagging requires exactly 2 clusters")
    if len(vocabulary) != assignment.assignment.shape[0]:
        raise ValueError("vocabulary size does not match assignment")
    size0 = int(np.sum(assignment.assignment == 0))
    size1 = len(vocabulary) - size0
    ne_cluster = 1 if size1 <= size0 else 0
    tag = {tok: int(assignment.assignment[i] == ne_cluster)
           for i, tok in enumerate(vocabulary)}
    return SeedTags(tag=tag, coarse_dictionary={t for t, v in tag.items() if v == 1})
