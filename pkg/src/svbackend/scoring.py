"""Cosine trial scoring, adaptive symmetric score normalization and fusion."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import EmbeddingSet, Manifest, ScoreSet, TrialList, l2_normalize
from .errors import (
    AlignmentError,
    DataError,
    DimensionMismatchError,
    UnknownIdError,
    ZeroNormError,
)

# Work is cut into blocks of this many rows no matter how many threads run,
# so every row is computed by the same BLAS call shape and results are
# bit-identical across thread counts.
BLOCK_ROWS = 512


def _map_blocks(fn: Callable[[slice], np.ndarray], n: int, threads: int) -> list[np.ndarray]:
    blocks = [slice(i, min(i + BLOCK_ROWS, n)) for i in range(0, n, BLOCK_ROWS)]
    if threads <= 1 or len(blocks) <= 1:
        return [fn(b) for b in blocks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, blocks))


def cosine_score(e, t) -> float:
    e = np.asarray(e, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if e.shape != t.shape:
        raise DimensionMismatchError(f"dimension mismatch: {e.shape} vs {t.shape}")
    ne, nt = np.linalg.norm(e), np.linalg.norm(t)
    if ne == 0 or nt == 0:
        raise ZeroNormError("cosine of a zero vector")
    return float(np.clip(np.dot(e, t) / (ne * nt), -1.0, 1.0))


def _unit_rows(emb: EmbeddingSet) -> np.ndarray:
    return l2_normalize(emb).vectors


def _resolve(emb: EmbeddingSet, trials: TrialList) -> tuple[np.ndarray, np.ndarray]:
    idx_e = np.empty(len(trials), dtype=np.intp)
    idx_t = np.empty(len(trials), dtype=np.intp)
    for i, (e, t) in enumerate(zip(trials.enroll, trials.test)):
        if e not in emb.index:
            raise UnknownIdError(f"trial {i}: unknown enroll id {e!r}")
        if t not in emb.index:
            raise UnknownIdError(f"trial {i}: unknown test id {t!r}")
        idx_e[i] = emb.index[e]
        idx_t[i] = emb.index[t]
    return idx_e, idx_t


def score_trials(emb: EmbeddingSet, trials: TrialList, threads: int = 1) -> ScoreSet:
    """Cosine score of every trial, in trial order."""
    if len(trials) == 0:
        return ScoreSet((), (), ())
    idx_e, idx_t = _resolve(emb, trials)
    unit = _unit_rows(emb)

    def block(sl: slice) -> np.ndarray:
        return np.sum(unit[idx_e[sl]] * unit[idx_t[sl]], axis=1)

    scores = np.concatenate(_map_blocks(block, len(trials), threads))
    return ScoreSet.for_trials(trials, np.clip(scores, -1.0, 1.0))


@dataclass(frozen=True)
class Cohort:
    embeddings: EmbeddingSet
    source: str

    def __post_init__(self):
        if len(self.embeddings) < 2:
            raise DataError("cohort needs at least 2 embeddings")
        if self.source not in ("speaker-means", "random-utterances", "file"):
            raise DataError(f"unknown cohort source {self.source!r}")
        if not np.allclose(self.embeddings.norms(), 1.0, atol=1e-6, rtol=0):
            raise DataError("cohort vectors must be unit-norm")

    def __len__(self) -> int:
        return len(self.embeddings)

    @classmethod
    def from_embeddings(cls, emb: EmbeddingSet, source: str = "file") -> "Cohort":
        return cls(l2_normalize(emb), source)


@dataclass(frozen=True)
class AsNormConfig:
    top_n: int = 400
    sigma_floor: float = 1e-6

    def __post_init__(self):
        if self.top_n < 2:
            raise DataError("top_n must be >= 2")
        if not self.sigma_floor > 0:
            raise DataError("sigma_floor must be > 0")


def speaker_mean_cohort(emb: EmbeddingSet, manifest: Manifest) -> Cohort:
    """One cohort vector per speaker: normalized mean of its normalized utterances.

    Speakers appear in manifest first-appearance order and the cohort ids are
    the speaker labels.
    """
    unit = _unit_rows(emb)
    groups: dict[str, list[int]] = {spk: [] for spk in manifest.speakers()}
    for pos, utt in enumerate(emb.ids):
        rec = manifest[utt]
        if rec.speaker is None:
            raise DataError(f"utterance {utt!r} has no speaker label")
        groups[rec.speaker].append(pos)
    means = []
    for spk, rows in groups.items():
        if not rows:
            raise DataError(f"speaker {spk!r} has no utterances in the embedding set")
        mean = unit[rows].mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm == 0:
            raise ZeroNormError(f"speaker {spk!r} has a zero-norm mean embedding")
        means.append(mean / norm)
    return Cohort(EmbeddingSet(list(groups), np.asarray(means).reshape(len(means), emb.dim)),
                  "speaker-means")


def random_cohort(emb: EmbeddingSet, size: int, seed: int) -> Cohort:
    """``size`` utterances drawn without replacement, kept in set order."""
    if size > len(emb):
        raise DataError(f"cohort size {size} exceeds pool size {len(emb)}")
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(len(emb), size=size, replace=False))
    return Cohort(l2_normalize(emb.subset(emb.ids[i] for i in pick)), "random-utterances")


def cohort_stats(vectors: np.ndarray, cohort: Cohort, top_n: int,
                 threads: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population std of each row's ``top_n`` best cohort cosines."""
    if top_n > len(cohort):
        raise DataError(f"top_n={top_n} exceeds cohort size {len(cohort)}")
    cvec = cohort.embeddings.vectors
    unit = vectors / np.linalg.norm(vectors, axis=1, keepdims=True)
    cut = len(cohort) - top_n

    def block(sl: slice) -> np.ndarray:
        sims = unit[sl] @ cvec.T
        # the selected multiset does not depend on how ties are broken;
        # sorting it fixes the summation order
        top = np.sort(np.partition(sims, cut, axis=1)[:, cut:], axis=1)
        return np.stack([top.mean(axis=1), top.std(axis=1)], axis=1)

    stats = np.concatenate(_map_blocks(block, len(unit), threads)) if len(unit) else np.zeros((0, 2))
    return stats[:, 0], stats[:, 1]


def as_norm(raw: ScoreSet, emb: EmbeddingSet, cohort: Cohort,
            cfg: AsNormConfig = AsNormConfig(), threads: int = 1) -> ScoreSet:
    """Adaptive symmetric normalization of ``raw`` against ``cohort``.

    Each side's statistics come from its ``top_n`` highest cohort cosines and
    are computed once per distinct id.
    """
    if len(cohort) < 2:
        raise DataError("cohort needs at least 2 embeddings")
    if cfg.top_n > len(cohort):
        raise DataError(f"top_n={cfg.top_n} exceeds cohort size {len(cohort)}")
    if emb.dim != cohort.embeddings.dim:
        raise DimensionMismatchError("trial and cohort embeddings differ in dimension")
    if len(raw) == 0:
        return raw
    trials = TrialList(raw.enroll, raw.test)
    idx_e, idx_t = _resolve(emb, trials)
    uniq, inv = np.unique(np.concatenate([idx_e, idx_t]), return_inverse=True)
    if (emb.norms()[uniq] == 0).any():
        raise ZeroNormError("zero-norm trial embedding")
    mu, sigma = cohort_stats(emb.vectors[uniq], cohort, cfg.top_n, threads)
    sigma = np.maximum(sigma, cfg.sigma_floor)
    n = len(raw)
    ie, it = inv[:n], inv[n:]
    s = raw.scores
    out = 0.5 * ((s - mu[ie]) / sigma[ie] + (s - mu[it]) / sigma[it])
    return ScoreSet(raw.enroll, raw.test, out)


def fuse(systems: Sequence[ScoreSet], weights: Sequence[float] | None = None) -> ScoreSet:
    """Per-trial weighted mean of aligned systems (plain mean without weights)."""
    if not systems:
        raise DataError("nothing to fuse")
    first = systems[0]
    for i, other in enumerate(systems[1:], start=1):
        if len(other) != len(first):
            raise AlignmentError(f"system {i} has {len(other)} trials, expected {len(first)}")
        first.check_aligned(other, f"system {i}")
    # offsets from the first system keep fusion of identical systems exact
    diffs = np.stack([s.scores - first.scores for s in systems])
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(systems),):
            raise AlignmentError(f"{w.size} weights for {len(systems)} systems")
        if not (np.isfinite(w).all() and w.sum() > 0):
            raise DataError("weights must be finite with a positive sum")
        if not (w == w[0]).all():
            return ScoreSet(first.enroll, first.test, first.scores + (w @ diffs) / w.sum())
    return ScoreSet(first.enroll, first.test, first.scores + diffs.sum(axis=0) / len(systems))
