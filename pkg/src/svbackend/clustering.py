"""K-means pseudo-labeling: Lloyd iterations, SSE curves and elbow detection."""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import EmbeddingSet, Manifest, Utterance, atomic_write
from .errors import AlignmentError, DataError, FlatCurveError, FormatError, UnknownIdError


class DegenerateElbowWarning(UserWarning):
    """The SSE curve has no bend; the returned K is arbitrary."""


@dataclass(frozen=True)
class Clustering:
    centroids: np.ndarray
    assignments: np.ndarray
    sse: float
    iterations: int
    converged: bool
    sse_trace: tuple = field(default=(), compare=False)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(axis=1)[:, None] - 2.0 * (X @ C.T) + (C * C).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def _sse(X: np.ndarray, C: np.ndarray, assign: np.ndarray) -> float:
    diff = X - C[assign]
    return float(np.einsum("ij,ij->", diff, diff))


def _kmeanspp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    closest = ((X - X[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=closest / total))
        else:
            # every remaining point duplicates a chosen centroid
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(rest))
        chosen.append(nxt)
        closest = np.minimum(closest, ((X - X[nxt]) ** 2).sum(axis=1))
    return X[chosen].copy()


def _update(X: np.ndarray, assign: np.ndarray, C: np.ndarray) -> np.ndarray:
    k, d = C.shape
    counts = np.bincount(assign, minlength=k)
    sums = np.zeros((k, d))
    np.add.at(sums, assign, X)
    new = C.copy()
    filled = counts > 0
    new[filled] = sums[filled] / counts[filled, None]
    return new


def _repair_empty(X: np.ndarray, C: np.ndarray, assign: np.ndarray) -> None:
    """Move the point farthest from its centroid into each empty cluster, in place."""
    k = C.shape[0]
    for empty in np.flatnonzero(np.bincount(assign, minlength=k) == 0):
        counts = np.bincount(assign, minlength=k)
        far = ((X - C[assign]) ** 2).sum(axis=1)
        far[counts[assign] <= 1] = -1.0  # never empty another cluster
        i = int(np.argmax(far))
        assign[i] = empty
        C[empty] = X[i]


def _lloyd(X: np.ndarray, C: np.ndarray, max_iters: int, rel_tol: float):
    assign = np.argmin(_sq_dists(X, C), axis=1)
    _repair_empty(X, C, assign)
    C = _update(X, assign, C)
    trace = [_sse(X, C, assign)]
    converged = False
    it = 1
    while it < max_iters:
        new_assign = np.argmin(_sq_dists(X, C), axis=1)
        if np.array_equal(new_assign, assign):
            converged = True
            break
        new_C = C.copy()
        _repair_empty(X, new_C, new_assign)
        new_C = _update(X, new_assign, new_C)
        new_sse = _sse(X, new_C, new_assign)
        it += 1
        if new_sse > trace[-1]:
            # a reassignment driven purely by rounding; keep the better state
            converged = True
            break
        prev = trace[-1]
        assign, C = new_assign, new_C
        trace.append(new_sse)
        if prev == 0 or (prev - new_sse) / prev < rel_tol:
            converged = True
            break
    return C, assign, trace, it, converged


def kmeans(emb: EmbeddingSet | np.ndarray, k: int, seed: int = 0, max_iters: int = 100,
           restarts: int = 3, rel_tol: float = 1e-6) -> Clustering:
    """Lloyd's algorithm from k-means++ seeds; the lowest-SSE restart wins.

    Points go to the nearest centroid, ties to the lowest index. Restart ``r``
    draws from a generator seeded with ``(seed, r)``.
    """
    X = emb.vectors if isinstance(emb, EmbeddingSet) else np.asarray(emb, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= k <= n:
        raise DataError(f"k={k} must be in [1, {n}]")
    if max_iters < 1 or restarts < 1:
        raise DataError("max_iters and restarts must be >= 1")
    best = None
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        C, assign, trace, it, conv = _lloyd(X, _kmeanspp(X, k, rng), max_iters, rel_tol)
        if best is None or trace[-1] < best.sse:
            best = Clustering(C, assign, trace[-1], it, conv, tuple(trace))
    best.centroids.setflags(write=False)
    best.assignments.setflags(write=False)
    return best


def sse(emb: EmbeddingSet | np.ndarray, clustering: Clustering) -> float:
    """Sum over clusters of squared distances from members to their centroid."""
    X = emb.vectors if isinstance(emb, EmbeddingSet) else np.asarray(emb, dtype=np.float64)
    a = np.asarray(clustering.assignments)
    if a.shape != (X.shape[0],):
        raise AlignmentError("assignments do not cover the embedding set")
    if a.size and (a.min() < 0 or a.max() >= clustering.k):
        raise DataError("cluster index out of range")
    return _sse(X, np.asarray(clustering.centroids), a)


@dataclass(frozen=True)
class SseCurve:
    points: tuple  # ((k, sse), ...)

    def __post_init__(self):
        if not self.points:
            raise DataError("empty SSE curve")
        ks = [k for k, _ in self.points]
        if ks[0] < 1 or any(b <= a for a, b in zip(ks, ks[1:])):
            raise DataError("SSE curve K values must be >= 1 and strictly increasing")

    @property
    def ks(self) -> list[int]:
        return [k for k, _ in self.points]

    @property
    def values(self) -> list[float]:
        return [v for _, v in self.points]


def sse_curve(emb: EmbeddingSet, ks: Sequence[int], seed: int = 0, max_iters: int = 100,
              restarts: int = 3, return_clusterings: bool = False):
    ks = list(ks)
    if any(b <= a for a, b in zip(ks, ks[1:])):
        raise DataError("ks must be sorted ascending without repeats")
    runs = {k: kmeans(emb, k, seed, max_iters, restarts) for k in ks}
    curve = SseCurve(tuple((k, runs[k].sse) for k in ks))
    return (curve, runs) if return_clusterings else curve


def elbow_distances(curve: SseCurve) -> np.ndarray:
    """Distance of each min-max normalized point to the first-last chord."""
    if len(curve.points) < 3:
        raise DataError("elbow detection needs at least 3 points")
    x = np.asarray(curve.ks, dtype=np.float64)
    y = np.asarray(curve.values, dtype=np.float64)
    if y.max() == y.min():
        raise FlatCurveError("SSE curve is flat")
    x = (x - x.min()) / (x.max() - x.min())
    y = (y - y.min()) / (y.max() - y.min())
    dx, dy = x[-1] - x[0], y[-1] - y[0]
    return np.abs(dy * (x - x[0]) - dx * (y - y[0])) / np.hypot(dx, dy)


def detect_elbow(curve: SseCurve, tol: float = 1e-9) -> int:
    """K whose point lies farthest from the chord; ties go to the smaller K."""
    dist = elbow_distances(curve)
    inner = dist[1:-1]
    # distances within tol of the best count as ties
    i = int(np.argmax(inner >= inner.max() - tol)) + 1
    if dist[i] <= tol:
        warnings.warn("SSE curve is linear; no elbow, returning the smallest interior K",
                      DegenerateElbowWarning, stacklevel=2)
    return curve.ks[i]


def save_curve(curve: SseCurve, path: str | os.PathLike) -> None:
    with atomic_write(path) as fh:
        fh.write("K\tSSE\n")
        for k, v in curve.points:
            fh.write(f"{k}\t{v:.6f}\n")


def load_curve(path: str | os.PathLike) -> SseCurve:
    points = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or (lineno == 1 and parts[0] == "K"):
                continue
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected 'K SSE'")
            try:
                points.append((int(parts[0]), float(parts[1])))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad values") from None
    return SseCurve(tuple(points))


def assign_pseudo_labels(emb: EmbeddingSet, clustering: Clustering,
                         manifest: Manifest | None = None) -> Manifest:
    """Manifest with speaker ``pseudo_<cluster>`` for every embedding."""
    if len(clustering.assignments) != len(emb):
        raise AlignmentError(f"{len(clustering.assignments)} assignments for {len(emb)} embeddings")
    records = []
    for utt, c in zip(emb.ids, clustering.assignments):
        src = manifest[utt] if manifest is not None else None
        records.append(Utterance(
            id=utt,
            speaker=f"pseudo_{int(c)}",
            duration=src.duration if src else None,
            tempo=src.tempo if src else 1.0,
            tags=src.tags if src else frozenset(),
        ))
    return Manifest(records)


def cluster_purity(pseudo: Manifest, truth: Manifest) -> float:
    """Fraction of utterances that belong to their cluster's majority class."""
    if set(pseudo.ids) != set(truth.ids):
        raise UnknownIdError("pseudo and truth manifests cover different utterances")
    if len(pseudo) == 0:
        raise DataError("empty manifests")
    table: dict[str, dict[str, int]] = {}
    for rec in pseudo:
        cls = truth[rec.id].speaker
        if rec.speaker is None or cls is None:
            raise DataError(f"utterance {rec.id!r} lacks a label")
        row = table.setdefault(rec.speaker, {})
        row[cls] = row.get(cls, 0) + 1
    return sum(max(row.values()) for row in table.values()) / len(pseudo)
