"""Slow, independent reference implementations used only by the tests."""

import math

import numpy as np


def _rates_at(tar, non, thr):
    miss = sum(1 for s in tar if s < thr) / len(tar)
    fa = sum(1 for s in non if s >= thr) / len(non)
    return miss, fa


def brute_operating_points(tar, non):
    """(p_miss, p_fa) at thresholds below all scores, between each pair of
    adjacent distinct scores, and above all scores."""
    scores = sorted(set(tar) | set(non))
    thresholds = [scores[0] - 1.0]
    thresholds += [(a + b) / 2 for a, b in zip(scores, scores[1:])]
    thresholds.append(scores[-1] + 1.0)
    return [_rates_at(tar, non, t) for t in thresholds]


def brute_eer(tar, non):
    pts = brute_operating_points(tar, non)
    for (m0, f0), (m1, f1) in zip(pts, pts[1:]):
        g0, g1 = f0 - m0, f1 - m1  # falls from +1 to -1
        if g0 == 0:
            return m0
        if g0 > 0 and g1 <= 0:
            if g1 == 0:
                return m1
            t = g0 / (g0 - g1)
            return m0 + t * (m1 - m0)
    raise AssertionError("no crossing")


def brute_min_dcf(tar, non, p_target=0.05, c_miss=1.0, c_fa=1.0):
    norm = min(c_miss * p_target, c_fa * (1 - p_target))
    return min(c_miss * p_target * m + c_fa * (1 - p_target) * f
               for m, f in brute_operating_points(tar, non)) / norm


def naive_sse(X, centroids, assign):
    total = 0.0
    for k in range(len(centroids)):
        for i in range(len(X)):
            if assign[i] == k:
                for j in range(len(X[i])):
                    total += (X[i][j] - centroids[k][j]) ** 2
    return total


def set_partitions(n, k):
    """All partitions of range(n) into exactly k non-empty blocks, as label lists."""
    def rec(i, labels, used):
        if i == n:
            if used == k:
                yield list(labels)
            return
        if k - used > n - i:
            return
        for c in range(min(used + 1, k)):
            labels.append(c)
            yield from rec(i + 1, labels, max(used, c + 1))
            labels.pop()
    yield from rec(0, [], 0)


def optimal_sse(X, k):
    X = np.asarray(X)
    best = math.inf
    for labels in set_partitions(len(X), k):
        labels = np.asarray(labels)
        s = 0.0
        for c in range(k):
            block = X[labels == c]
            s += float(((block - block.mean(axis=0)) ** 2).sum())
        best = min(best, s)
    return best


def snorm_direct(s, e, t, cohort):
    """Symmetric normalization against the whole cohort, written out longhand."""
    def stats(v):
        sims = [float(np.dot(v, c) / (np.linalg.norm(v) * np.linalg.norm(c))) for c in cohort]
        mu = sum(sims) / len(sims)
        var = sum((x - mu) ** 2 for x in sims) / len(sims)
        return mu, math.sqrt(var)
    mu_e, sd_e = stats(e)
    mu_t, sd_t = stats(t)
    return 0.5 * ((s - mu_e) / sd_e + (s - mu_t) / sd_t)


def scaled_softmax_ce(W, x, label, scale):
    """Plain cross-entropy over scale * cosine logits (one weight row per class)."""
    xh = x / np.linalg.norm(x)
    logits = [scale * float(np.dot(w / np.linalg.norm(w), xh)) for w in W]
    top = max(logits)
    lse = top + math.log(sum(math.exp(z - top) for z in logits))
    probs = [math.exp(z - lse) for z in logits]
    return lse - logits[label], probs
