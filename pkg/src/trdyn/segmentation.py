"""Part segmentation by clustering learned motion parameters.

Every particle of one rigid part shares the same center velocity ``v_bar``
and rotation vector ``w`` (the position dependence is carried by ``w x P``),
so the 8-dimensional feature ``[|v|, v, |w|, w_hat]`` is nearly constant per
part and plain k-means separates the parts.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .dynamics import DynamicsParams
from .errors import ConfigError, DataError

W_EPS = 1e-9
FEATURE_DIM = 8


def motion_features(params: DynamicsParams, standardize: bool = False) -> np.ndarray:
    """(N, 8) features ``[|v_bar|, v_bar, |w|, w_hat]``.

    ``w_hat`` is zero when ``|w| < 1e-9``.  With ``standardize`` every column
    is z-scored over the particle set (constant columns are only centered).
    """
    v = np.atleast_2d(np.asarray(params.v_bar_c, dtype=np.float64))
    w = np.atleast_2d(np.asarray(params.w_p, dtype=np.float64))
    if not (np.all(np.isfinite(v)) and np.all(np.isfinite(w))):
        raise DataError("motion_features: parameters must be finite")
    vn = np.linalg.norm(v, axis=-1)
    wn = np.linalg.norm(w, axis=-1)
    small = wn < W_EPS
    w_hat = np.where(small[:, None], 0.0, w / np.where(small, 1.0, wn)[:, None])
    feats = np.concatenate([vn[:, None], v, wn[:, None], w_hat], axis=-1)
    if standardize:
        feats = standardize_features(feats)
    return feats


def standardize_features(feats: np.ndarray) -> np.ndarray:
    mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    return (feats - mean) / np.where(std > 0.0, std, 1.0)


@dataclass
class SegmentationResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    n_iter: int = 0

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def _kmeanspp(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0.0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def _canonical(labels: np.ndarray, centroids: np.ndarray):
    """Drop empty clusters and renumber by first member (in the given order)."""
    _, first = np.unique(labels, return_index=True)
    order = labels[np.sort(first)]
    remap = np.full(centroids.shape[0], -1, dtype=np.int64)
    remap[order] = np.arange(len(order))
    return remap[labels], centroids[order]


def kmeans(features: np.ndarray, K: int, seed: int = 0, max_iters: int = 300, tol: float = 1e-6,
           ids: Optional[np.ndarray] = None) -> SegmentationResult:
    """k-means++ seeding followed by Lloyd iterations.

    Parameters
    ----------
    features : (n, d) array
    K : number of clusters, ``1 <= K <= n``
    seed : RNG seed for the seeding step
    ids : optional particle ids.  Points are processed in id order, which
        makes the result independent of how the input rows are permuted.

    Returns
    -------
    SegmentationResult
        Labels are renumbered so cluster 0 holds the smallest id, cluster 1
        the smallest id not in cluster 0, and so on.  Empty clusters are
        dropped.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataError("kmeans: features must be a non-empty (n, d) array")
    n = X.shape[0]
    K = int(K)
    if K < 1:
        raise ConfigError("kmeans: K must be >= 1")
    if n < K:
        raise DataError(f"kmeans: {n} points cannot form {K} clusters")
    if not np.all(np.isfinite(X)):
        raise DataError("kmeans: features must be finite")
    order = np.argsort(np.arange(n) if ids is None else np.asarray(ids), kind="stable")
    Xs = X[order]

    rng = np.random.default_rng(seed)
    C = _kmeanspp(Xs, K, rng)
    labels = np.zeros(n, dtype=np.int64)
    it = 0
    for it in range(1, max_iters + 1):
        labels = np.argmin(cdist(Xs, C, "sqeuclidean"), axis=1)
        newC = C.copy()
        for k in range(K):
            members = labels == k
            if members.any():
                newC[k] = Xs[members].mean(axis=0)
        shift = float(np.max(np.linalg.norm(newC - C, axis=1)))
        C = newC
        if shift < tol:
            break
    labels = np.argmin(cdist(Xs, C, "sqeuclidean"), axis=1)
    inertia = float(np.sum((Xs - C[labels]) ** 2))
    labels, C = _canonical(labels, C)
    out = np.empty(n, dtype=np.int64)
    out[order] = labels
    return SegmentationResult(out, C, inertia, it)


def silhouette(features: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette coefficient (0 for a single cluster)."""
    X = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        return 0.0
    D = cdist(X, X)
    s = np.zeros(len(X))
    for i in range(len(X)):
        own = labels == labels[i]
        n_own = own.sum() - 1
        if n_own == 0:
            continue
        a = D[i, own].sum() / n_own
        b = min(D[i, labels == u].mean() for u in uniq if u != labels[i])
        s[i] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return float(s.mean())


def select_k(features: np.ndarray, seed: int = 0, k_range=(2, 8), ids=None) -> SegmentationResult:
    """Silhouette sweep over ``K`` in ``k_range`` (inclusive); best score wins, ties to smaller K."""
    best = None
    best_score = -np.inf
    n = len(features)
    for K in range(k_range[0], min(k_range[1], n) + 1):
        res = kmeans(features, K, seed=seed, ids=ids)
        score = silhouette(features, res.labels)
        if score > best_score + 1e-12:
            best, best_score = res, score
    if best is None:
        raise DataError("select_k: not enough points for the K range")
    return best


# -- rigid fit ----------------------------------------------------------------------

@dataclass
class RigidFit:
    R: np.ndarray
    T: np.ndarray
    residual: float
    degenerate: bool = False


def kabsch(src: np.ndarray, dst: np.ndarray, weights: Optional[np.ndarray] = None,
           rank_tol: float = 1e-10) -> RigidFit:
    """Weighted least-squares rigid transform with ``dst ~ R @ src + T``.

    ``residual`` is the weighted RMSD after alignment.  Fewer than three
    points, or collinear points, are flagged as degenerate: the identity is
    returned and the residual is the weighted RMS spread of ``dst`` about
    its weighted mean.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise DataError("kabsch: src and dst must both be (n, 3)")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(src),) or np.any(w < 0) or w.sum() <= 0:
        raise DataError("kabsch: weights must be non-negative with a positive sum")
    w = w / w.sum()
    mu_s = w @ src
    mu_d = w @ dst
    A = src - mu_s
    B = dst - mu_d
    sv = np.linalg.svd(A * np.sqrt(w)[:, None], compute_uv=False) if len(src) else np.zeros(3)
    if np.count_nonzero(w) < 3 or sv[1] <= rank_tol * max(sv[0], 1e-300):
        spread = float(np.sqrt(w @ np.sum(B * B, axis=1)))
        return RigidFit(np.eye(3), np.zeros(3), spread, True)
    H = (A * w[:, None]).T @ B
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    T = mu_d - R @ mu_s
    res = dst - (src @ R.T + T)
    return RigidFit(R, T, float(np.sqrt(w @ np.sum(res * res, axis=1))), False)


def cluster_residuals(labels: np.ndarray, src: np.ndarray, dst: np.ndarray) -> dict:
    """Kabsch residual of every cluster between two frames."""
    return {int(k): kabsch(src[labels == k], dst[labels == k]).residual for k in np.unique(labels)}


# -- metrics -------------------------------------------------------------------------

def seg_metrics(pred, gt) -> dict:
    """Accuracy and mIoU after Hungarian matching on IoU, plus the Rand index.

    mIoU averages over ground-truth segments; a segment left unmatched (more
    GT segments than predicted clusters) contributes IoU 0.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape or pred.ndim != 1:
        raise DataError("seg_metrics: label arrays must be 1-D with equal length")
    n = len(gt)
    if n == 0:
        raise DataError("seg_metrics: empty input")
    p_ids, p = np.unique(pred, return_inverse=True)
    g_ids, g = np.unique(gt, return_inverse=True)
    conf = np.zeros((len(g_ids), len(p_ids)), dtype=np.int64)
    np.add.at(conf, (g, p), 1)
    union = conf.sum(axis=1)[:, None] + conf.sum(axis=0)[None, :] - conf
    iou = conf / union
    rows, cols = linear_sum_assignment(-iou)
    accuracy = conf[rows, cols].sum() / n
    miou = iou[rows, cols].sum() / len(g_ids)
    # Rand index from pair counts
    pairs = n * (n - 1) / 2
    same_both = (conf * (conf - 1) / 2).sum()
    same_g = (conf.sum(axis=1) * (conf.sum(axis=1) - 1) / 2).sum()
    same_p = (conf.sum(axis=0) * (conf.sum(axis=0) - 1) / 2).sum()
    rand = 1.0 if pairs == 0 else (pairs + 2 * same_both - same_g - same_p) / pairs
    return {"accuracy": float(accuracy), "mIoU": float(miou), "RandIndex": float(rand)}


def write_labels_csv(path, labels, ids=None) -> Path:
    path = Path(path)
    labels = np.asarray(labels)
    ids = np.arange(len(labels)) if ids is None else np.asarray(ids)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["particle_id", "label"])
        for i, l in zip(ids, labels):
            wr.writerow([int(i), int(l)])
    return path


def read_labels_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["particle_id", "label"]:
        raise DataError(f"{path}: expected header particle_id,label")
    try:
        body = np.array([[int(a), int(b)] for a, b in rows[1:]], dtype=np.int64).reshape(-1, 2)
    except ValueError as exc:
        raise DataError(f"{path}: malformed label row ({exc})") from None
    if not np.array_equal(np.sort(body[:, 0]), np.arange(len(body))):
        raise DataError(f"{path}: particle ids must be 0..n-1 without gaps")
    out = np.empty(len(body), dtype=np.int64)
    out[body[:, 0]] = body[:, 1]
    return out


def label_colors(labels) -> np.ndarray:
    """Distinct RGB (0..1) per label, golden-angle hue spacing."""
    import colorsys

    labels = np.asarray(labels)
    return np.array([colorsys.hsv_to_rgb((0.61803398875 * int(l)) % 1.0, 0.75, 0.95) for l in labels]).reshape(-1, 3)
