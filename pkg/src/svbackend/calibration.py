"""Quality measure functions and logistic-regression score calibration.

Features per trial, in this order:

* ``score``    -- the (raw or normalized) trial score
* ``dur_e``    -- ``|log(d_enroll - d_min)|``
* ``dur_t``    -- ``|log(d_test - d_min)|``
* ``mag_rate`` -- ``|log(|z_e| / |z_t|)|`` on un-normalized embeddings

Calibrated scores stay on the log-odds scale.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import EmbeddingSet, Manifest, ScoreSet, atomic_write
from .errors import AlignmentError, DataError, FormatError, NonFiniteValueError, SingleClassError, UnknownIdError, ZeroNormError

log = logging.getLogger(__name__)

FEATURES = ("score", "dur_e", "dur_t", "mag_rate")


@dataclass(frozen=True)
class QmfFeatures:
    score: float
    dur_e: float
    dur_t: float
    mag_rate: float

    def as_array(self) -> np.ndarray:
        return np.array([self.score, self.dur_e, self.dur_t, self.mag_rate])


@dataclass(frozen=True)
class QmfTable:
    """Feature rows for a list of trials, columns named by ``names``."""

    enroll: tuple
    test: tuple
    names: tuple
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (len(self.enroll), len(self.names)):
            raise AlignmentError("feature matrix does not match trials/names")
        if not np.isfinite(self.values).all():
            raise NonFiniteValueError("non-finite QMF feature")

    def __len__(self) -> int:
        return len(self.enroll)

    def select(self, names: Sequence[str]) -> "QmfTable":
        cols = [self.names.index(n) for n in names]
        return QmfTable(self.enroll, self.test, tuple(names), self.values[:, cols])

    def rows(self) -> list[QmfFeatures]:
        full = self.select(FEATURES).values
        return [QmfFeatures(*map(float, r)) for r in full]


def compute_d_min(durations, margin: float = 0.01) -> float:
    durations = np.asarray(durations, dtype=np.float64)
    if durations.size == 0:
        raise DataError("no durations to take the minimum of")
    if not margin > 0:
        raise DataError("d_min margin must be > 0")
    return float(durations.min() - margin)


def _dur_term(d: float, d_min: float, utt: str) -> float:
    if not d > d_min:
        raise DataError(f"duration of {utt!r} ({d}) is not above d_min ({d_min})")
    return abs(math.log(d - d_min))


def qmf_features(trial: tuple[str, str], score: float, raw: EmbeddingSet,
                 manifest: Manifest, d_min: float) -> QmfFeatures:
    e, t = trial
    ne, nt = float(np.linalg.norm(raw[e])), float(np.linalg.norm(raw[t]))
    if ne == 0 or nt == 0:
        raise ZeroNormError(f"zero-magnitude embedding in trial {e!r} {t!r}")
    de, dt = manifest.durations([e, t])
    return QmfFeatures(
        score=float(score),
        dur_e=_dur_term(de, d_min, e),
        dur_t=_dur_term(dt, d_min, t),
        mag_rate=abs(math.log(ne / nt)),
    )


def qmf_table(scores: ScoreSet, raw: EmbeddingSet, manifest: Manifest, d_min: float) -> QmfTable:
    """Vectorized :func:`qmf_features` over every trial of ``scores``."""
    ids = set(scores.enroll) | set(scores.test)
    missing = [i for i in ids if i not in raw]
    if missing:
        raise UnknownIdError(f"no embedding for {sorted(missing)[0]!r}")
    norms = raw.norms()
    pe, pt = raw.positions(scores.enroll), raw.positions(scores.test)
    ne, nt = norms[pe], norms[pt]
    if (ne == 0).any() or (nt == 0).any():
        raise ZeroNormError("zero-magnitude trial embedding")
    de, dt = manifest.durations(scores.enroll), manifest.durations(scores.test)
    low = np.concatenate([de, dt]) <= d_min
    if low.any():
        raise DataError(f"{int(low.sum())} trial durations are not above d_min={d_min}")
    values = np.column_stack([
        scores.scores,
        np.abs(np.log(de - d_min)),
        np.abs(np.log(dt - d_min)),
        np.abs(np.log(ne / nt)),
    ])
    return QmfTable(scores.enroll, scores.test, FEATURES, values)


@dataclass(frozen=True)
class CalibrationModel:
    feature_names: tuple
    weights: np.ndarray
    bias: float
    d_min: float
    converged: bool = True
    iterations: int = 0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (len(self.feature_names),):
            raise DataError("one weight per feature required")
        if not (np.isfinite(w).all() and math.isfinite(self.bias)):
            raise NonFiniteValueError("non-finite calibration parameters")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    def weight(self, name: str) -> float:
        return float(self.weights[self.feature_names.index(name)])


def _logistic_loss(X: np.ndarray, y: np.ndarray, theta: np.ndarray, l2: float) -> float:
    z = X @ theta
    return float(np.mean(np.logaddexp(0.0, -y * z)) + 0.5 * l2 * theta[:-1] @ theta[:-1])


def fit_calibration(features: QmfTable, labels, l2: float = 1e-4,
                    max_iters: int = 100, tol: float = 1e-8,
                    d_min: float = 0.0) -> CalibrationModel:
    """Fit weights and bias by damped Newton steps on the L2-regularized mean log loss.

    The bias is not regularized. Steps are halved until the loss does not
    increase, so the accepted-iteration loss sequence is non-increasing.
    """
    labels = np.asarray(labels).astype(bool)
    if labels.shape != (len(features),):
        raise AlignmentError("labels do not match feature rows")
    if labels.all() or not labels.any():
        raise SingleClassError("calibration needs both target and nontarget trials")
    if l2 < 0:
        raise DataError("l2 must be >= 0")
    X = np.column_stack([features.values, np.ones(len(features))])
    y = np.where(labels, 1.0, -1.0)
    n, p = X.shape
    reg = np.full(p, l2)
    reg[-1] = 0.0
    theta = np.zeros(p)
    loss = _logistic_loss(X, y, theta, l2)
    converged = False
    steps = 0
    while True:
        prob = 0.5 * (1.0 + np.tanh(0.5 * (X @ theta)))  # overflow-free sigmoid
        grad = X.T @ (prob - (y > 0)) / n + reg * theta
        if np.linalg.norm(grad) <= tol:
            converged = True
            break
        if steps == max_iters:
            break
        H = (X * (prob * (1 - prob))[:, None]).T @ X / n + np.diag(reg)
        H[np.diag_indices(p)] += 1e-12
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while t > 1e-10:
            cand = theta - t * step
            new_loss = _logistic_loss(X, y, cand, l2)
            if new_loss <= loss:
                break
            t *= 0.5
        else:
            log.debug("line search stalled after %d steps", steps)
            break
        theta, loss = cand, new_loss
        steps += 1
    if not converged:
        log.warning("calibration stopped after %d steps above tol=%g", steps, tol)
    return CalibrationModel(features.names, theta[:-1], float(theta[-1]), d_min,
                            converged=converged, iterations=steps)


def apply_calibration(model: CalibrationModel, features: QmfTable) -> ScoreSet:
    if tuple(features.names) != model.feature_names:
        raise DataError(f"feature order {features.names} does not match model {model.feature_names}")
    return ScoreSet(features.enroll, features.test, features.values @ model.weights + model.bias)


def save_model(model: CalibrationModel, path: str | os.PathLike) -> None:
    with atomic_write(path) as fh:
        fh.write(f"features={','.join(model.feature_names)}\n")
        fh.write(f"weights={','.join(repr(float(w)) for w in model.weights)}\n")
        fh.write(f"bias={model.bias!r}\n")
        fh.write(f"d_min={model.d_min!r}\n")
        fh.write(f"converged={int(model.converged)}\n")
        fh.write(f"iterations={model.iterations}\n")


def load_model(path: str | os.PathLike) -> CalibrationModel:
    kv = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise FormatError(f"{path}: bad line {line!r}")
            kv[key.strip()] = value.strip()
    try:
        return CalibrationModel(
            feature_names=tuple(kv["features"].split(",")),
            weights=np.array([float(w) for w in kv["weights"].split(",")]),
            bias=float(kv["bias"]),
            d_min=float(kv["d_min"]),
            converged=bool(int(kv.get("converged", 1))),
            iterations=int(kv.get("iterations", 0)),
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: incomplete calibration model ({exc})") from None
