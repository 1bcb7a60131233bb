"""Clustering utilities: k-means (Lloyd + k-means++ seeding), clustering
accuracy under the optimal label matching, normalized mutual information,
and score histograms.
"""
import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigurationError


def _sq_dists(x, centers):
    d2 = (np.sum(x * x, axis=1)[:, None] + np.sum(centers * centers, axis=1)[None, :]
          - 2.0 * x @ centers.T)
    return np.maximum(d2, 0.0)


def _kmeans_pp(x, k, rng):
    m = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=x.dtype)
    centers[0] = x[rng.integers(m)]
    d2 = _sq_dists(x, centers[:1]).ravel()
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = x[rng.integers(m)]
        else:
            centers[j] = x[rng.choice(m, p=d2 / total)]
        d2 = np.minimum(d2, _sq_dists(x, centers[j:j + 1]).ravel())
    return centers


def _lloyd(x, centers, max_iters, tol):
    prev_obj = np.inf
    for _ in range(max_iters):
        d2 = _sq_dists(x, centers)
        labels = d2.argmin(axis=1)
        obj = float(d2[np.arange(x.shape[0]), labels].sum())
        for j in range(centers.shape[0]):
            mask = labels == j
            if mask.any():
                centers[j] = x[mask].mean(axis=0)
            else:
                # re-seed an empty cluster to the point farthest from its center
                far = d2[np.arange(x.shape[0]), labels].argmax()
                centers[j] = x[far]
        if prev_obj - obj <= tol * max(abs(prev_obj), 1e-12):
            break
        prev_obj = obj
    d2 = _sq_dists(x, centers)
    labels = d2.argmin(axis=1)
    obj = float(d2[np.arange(x.shape[0]), labels].sum())
    return centers, labels, obj


def kmeans(x, k, restarts=20, max_iters=300, seed=0, tol=1e-6):
    """Best-of-restarts Lloyd's algorithm with k-means++ seeding.

    Returns (centers, labels, objective) where objective is the
    within-cluster sum of squared distances.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ConfigurationError("kmeans expects an (m, d) matrix")
    if x.shape[0] < k:
        raise ConfigurationError(f"need at least k={k} samples, got {x.shape[0]}")
    seeds = np.random.SeedSequence(seed).spawn(restarts)
    best = None
    for ss in seeds:
        rng = np.random.default_rng(ss)
        centers = _kmeans_pp(x, k, rng)
        centers, labels, obj = _lloyd(x, centers, max_iters, tol)
        if best is None or obj < best[2]:
            best = (centers, labels, obj)
    return best


def contingency(pred, truth):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ConfigurationError(
            f"label vectors differ in length: {pred.shape} vs {truth.shape}")
    kp = int(pred.max()) + 1
    kt = int(truth.max()) + 1
    counts = np.zeros((kp, kt), dtype=np.int64)
    np.add.at(counts, (pred, truth), 1)
    return counts


def acc(pred, truth):
    """Clustering accuracy: best one-to-one label mapping via the Hungarian
    algorithm on the co-assignment counts."""
    counts = contingency(pred, truth)
    k = max(counts.shape)
    padded = np.zeros((k, k), dtype=np.int64)
    padded[:counts.shape[0], :counts.shape[1]] = counts
    rows, cols = linear_sum_assignment(-padded)
    return float(padded[rows, cols].sum()) / len(np.asarray(pred))


def _entropy(p):
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def nmi(pred, truth):
    """Mutual information normalized by the larger marginal entropy."""
    counts = contingency(pred, truth).astype(np.float64)
    m = counts.sum()
    joint = counts / m
    pp = joint.sum(axis=1)
    pt = joint.sum(axis=0)
    nz = joint > 0
    mi = float((joint[nz] * np.log(joint[nz] / np.outer(pp, pt)[nz])).sum())
    denom = max(_entropy(pp), _entropy(pt))
    if denom == 0:
        return 0.0
    return max(0.0, min(1.0, mi / denom))


def score_histogram(s, cluster, bins=50):
    """Histogram of one cluster's column of the score matrix over [0, 1]."""
    if bins < 2:
        raise ConfigurationError("need at least 2 bins")
    s = np.asarray(s)
    counts, edges = np.histogram(s[:, cluster], bins=bins, range=(0.0, 1.0))
    return edges, counts
