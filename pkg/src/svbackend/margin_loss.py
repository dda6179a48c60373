"""ArcFace and sub-center ArcFace heads: loss values and analytic gradients.

Only the head math lives here, for checking the loss/gradient contract on
small problems. Weights have shape ``(classes, sub_centers, dim)``; both the
embedding and each weight row are length-normalized inside the forward pass,
so gradients are taken with respect to the raw (un-normalized) arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ZeroNormError

COS_EPS = 1e-7

SCHEDULE = {"pretrain": (0.2, 32.0), "lmft": (0.5, 32.0)}


def margin_schedule(stage: str) -> tuple[float, float]:
    """(margin, scale) for the pre-training and large-margin fine-tuning stages."""
    try:
        return SCHEDULE[stage]
    except KeyError:
        raise DataError(f"unknown training stage {stage!r}; expected one of {sorted(SCHEDULE)}") from None


@dataclass(frozen=True)
class MarginHead:
    weights: np.ndarray
    margin: float = 0.2
    scale: float = 32.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim == 2:
            w = w[:, None, :]
        if w.ndim != 3 or 0 in w.shape:
            raise DataError("weights must have shape (classes, sub_centers, dim)")
        if not np.allclose(np.linalg.norm(w, axis=2), 1.0, atol=1e-6, rtol=0):
            raise DataError("weight rows must be unit-norm")
        if not 0 <= self.margin < math.pi:
            raise DataError("margin must be in [0, pi)")
        if not self.scale > 0:
            raise DataError("scale must be > 0")
        object.__setattr__(self, "weights", w)

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def sub_centers(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def random(cls, num_classes: int, dim: int, sub_centers: int = 1, margin: float = 0.2,
               scale: float = 32.0, seed: int = 0) -> "MarginHead":
        w = np.random.default_rng(seed).standard_normal((num_classes, sub_centers, dim))
        return cls(w / np.linalg.norm(w, axis=2, keepdims=True), margin, scale)


@dataclass(frozen=True)
class LossResult:
    loss: float
    grad_embedding: np.ndarray
    grad_weights: np.ndarray
    probabilities: np.ndarray


def _target_logit(cos_y: float, m: float) -> tuple[float, float]:
    """Margin-penalized target cosine and its derivative w.r.t. ``cos_y``."""
    if m == 0:
        return cos_y, 1.0
    if cos_y > math.cos(math.pi - m):
        c = min(max(cos_y, -1 + COS_EPS), 1 - COS_EPS)
        theta = math.acos(c)
        grad = math.sin(theta + m) / math.sin(theta) if c == cos_y else 0.0
        return math.cos(theta + m), grad
    # theta + m would pass pi: monotone fallback
    return cos_y - m * math.sin(m), 1.0


def margin_forward(weights: np.ndarray, embedding, label: int,
                   margin: float, scale: float) -> LossResult:
    """Loss and gradients for raw ``weights`` of shape (classes, sub_centers, dim)."""
    W = np.asarray(weights, dtype=np.float64)
    x = np.asarray(embedding, dtype=np.float64)
    C, S, d = W.shape
    if x.shape != (d,):
        raise DataError(f"embedding has shape {x.shape}, expected ({d},)")
    if not 0 <= label < C:
        raise DataError(f"label {label} out of range for {C} classes")
    xn = float(np.linalg.norm(x))
    if xn == 0:
        raise ZeroNormError("zero embedding")
    wn = np.linalg.norm(W, axis=2)
    if (wn == 0).any():
        raise ZeroNormError("zero weight row")
    xh = x / xn
    Wh = W / wn[..., None]
    cos_all = Wh @ xh                      # (C, S)
    best = np.argmax(cos_all, axis=1)      # first max on ties
    cls = np.arange(C)
    cos = cos_all[cls, best]

    phi, dphi = _target_logit(float(cos[label]), margin)
    logits = scale * cos
    logits[label] = scale * phi
    z = logits - logits.max()
    prob = np.exp(z)
    prob /= prob.sum()
    if z[label] == 0:
        # target is the top logit; log1p keeps tiny losses accurate
        loss = float(np.log1p(np.exp(np.delete(z, label)).sum()))
    else:
        loss = float(np.log(np.exp(z).sum()) - z[label])

    dz = prob.copy()
    dz[label] -= 1.0
    dcos = scale * dz
    dcos[label] *= dphi

    w_sel = Wh[cls, best]                  # (C, d)
    grad_x = (dcos @ (w_sel - cos[:, None] * xh)) / xn
    grad_W = np.zeros_like(W)
    grad_W[cls, best] = dcos[:, None] * (xh[None, :] - cos[:, None] * w_sel) / wn[cls, best][:, None]
    return LossResult(max(loss, 0.0), grad_x, grad_W, prob)


def arcface_forward(head: MarginHead, embedding, label: int) -> LossResult:
    if head.sub_centers != 1:
        raise DataError("arcface_forward needs a head with one sub-center per class")
    return margin_forward(head.weights, embedding, label, head.margin, head.scale)


def subcenter_arcface_forward(head: MarginHead, embedding, label: int) -> LossResult:
    """Class cosine is the max over sub-centers; margin applies to the target class only."""
    return margin_forward(head.weights, embedding, label, head.margin, head.scale)


def _central_diff(f, arr: np.ndarray, h: float) -> np.ndarray:
    grad = np.zeros_like(arr)
    flat, g = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        g[i] = (up - down) / (2 * h)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return float(np.linalg.norm(a - b) / scale) if scale > 1e-12 else 0.0


def _safe_case(W: np.ndarray, x: np.ndarray, label: int, margin: float, gap: float) -> bool:
    """Reject inputs within ``gap`` of a kink (sub-center ties, fallback switch, clamp)."""
    Wh = W / np.linalg.norm(W, axis=2, keepdims=True)
    cos_all = Wh @ (x / np.linalg.norm(x))
    if W.shape[1] > 1:
        top2 = np.sort(cos_all, axis=1)[:, -2:]
        if (top2[:, 1] - top2[:, 0] < gap).any():
            return False
    c = cos_all[label].max()
    if margin and abs(c - math.cos(math.pi - margin)) < gap:
        return False
    return abs(c) < 1 - 10 * COS_EPS


def gradient_check(num_cases: int = 100, num_classes: int = 3, dim: int = 4,
                   sub_centers: int = 1, margin: float = 0.2, scale: float = 32.0,
                   seed: int = 0, h: float = 1e-5, gap: float = 1e-3) -> dict:
    """Compare analytic gradients with central differences on random cases.

    Returns the maximum relative error for the embedding and weight gradients
    and the number of cases evaluated.
    """
    rng = np.random.default_rng(seed)
    worst_x = worst_w = 0.0
    done = 0
    while done < num_cases:
        W = rng.standard_normal((num_classes, sub_centers, dim))
        W /= np.linalg.norm(W, axis=2, keepdims=True)
        x = rng.standard_normal(dim)
        label = int(rng.integers(num_classes))
        if not _safe_case(W, x, label, margin, gap):
            continue
        res = margin_forward(W, x, label, margin, scale)

        def loss() -> float:
            return margin_forward(W, x, label, margin, scale).loss

        gx = _central_diff(loss, x, h)
        gw = _central_diff(loss, W, h)
        worst_x = max(worst_x, rel_error(res.grad_embedding, gx))
        worst_w = max(worst_w, rel_error(res.grad_weights, gw))
        done += 1
    return {"cases": done, "max_rel_err_embedding": worst_x, "max_rel_err_weights": worst_w}
