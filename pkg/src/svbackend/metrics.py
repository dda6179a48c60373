"""Detection metrics: DET points, EER and normalized minimum DCF.

A trial is accepted when ``score >= threshold``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .data import ScoreSet, atomic_write
from .errors import AlignmentError, DataError, SingleClassError


@dataclass(frozen=True)
class DcfParams:
    p_target: float = 0.05
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        if not 0 < self.p_target < 1:
            raise DataError("p_target must be in (0, 1)")
        if not (self.c_miss > 0 and self.c_fa > 0):
            raise DataError("costs must be > 0")


@dataclass(frozen=True)
class DetCurve:
    thresholds: np.ndarray
    p_miss: np.ndarray
    p_fa: np.ndarray

    def __len__(self) -> int:
        return self.thresholds.size


def _split(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores.scores if isinstance(scores, ScoreSet) else scores, dtype=np.float64)
    lab = np.asarray(labels)
    if s.shape != lab.shape or s.ndim != 1:
        raise AlignmentError("scores and labels differ in shape")
    lab = lab.astype(bool) if lab.dtype != bool else lab
    tar, non = np.sort(s[lab]), np.sort(s[~lab])
    if tar.size == 0 or non.size == 0:
        raise SingleClassError("need at least one target and one nontarget trial")
    return tar, non


def det_curve(scores, labels) -> DetCurve:
    """Operating points at -inf, each distinct score, and +inf."""
    tar, non = _split(scores, labels)
    thr = np.concatenate([[-np.inf], np.unique(np.concatenate([tar, non])), [np.inf]])
    p_miss = np.searchsorted(tar, thr, side="left") / tar.size
    p_fa = (non.size - np.searchsorted(non, thr, side="left")) / non.size
    return DetCurve(thr, p_miss, p_fa)


def eer_from_curve(curve: DetCurve) -> float:
    diff = curve.p_miss - curve.p_fa
    # diff strictly increases from -1 to 1, so the crossing is unique
    i = int(np.argmax(diff >= 0))
    if diff[i] == 0:
        return float(curve.p_miss[i])
    m0, m1 = curve.p_miss[i - 1], curve.p_miss[i]
    f0, f1 = curve.p_fa[i - 1], curve.p_fa[i]
    if m0 == m1:
        return float(m0)
    if f0 == f1:
        return float(f0)
    t = (f0 - m0) / ((m1 - m0) - (f1 - f0))
    return float(m0 + t * (m1 - m0))


def eer(scores, labels) -> float:
    """Equal error rate as a fraction (multiply by 100 for EER[%])."""
    return eer_from_curve(det_curve(scores, labels))


def min_dcf_from_curve(curve: DetCurve, params: DcfParams = DcfParams()) -> float:
    cost = (params.c_miss * params.p_target * curve.p_miss
            + params.c_fa * (1 - params.p_target) * curve.p_fa)
    norm = min(params.c_miss * params.p_target, params.c_fa * (1 - params.p_target))
    return float(cost.min() / norm)


def min_dcf(scores, labels, params: DcfParams = DcfParams()) -> float:
    return min_dcf_from_curve(det_curve(scores, labels), params)


def save_det(curve: DetCurve, path: str | os.PathLike) -> None:
    with atomic_write(path) as fh:
        fh.write("threshold\tp_miss\tp_fa\n")
        for t, m, f in zip(curve.thresholds, curve.p_miss, curve.p_fa):
            fh.write(f"{t:.6f}\t{m:.6f}\t{f:.6f}\n")
