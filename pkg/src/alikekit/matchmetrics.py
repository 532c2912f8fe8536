"""Mutual-NN matching, evaluation metrics, and robust homography fitting.

Metrics follow the usual local-feature protocol: covisible keypoint
counts are averaged over the two directions, ground-truth pairs are
nearest detections within 3 px of the warped position, and repeatability
/ matching score / matching accuracy are ratios against those counts.
Homography estimation is 4-point RANSAC around a Hartley-normalized DLT
with a least-squares refit on the consensus set.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .geometry import assign_correspondences, warp
from .tensorgraph import Tensor

GT_PIXEL_THRESHOLD = 3.0
METRIC_THRESHOLDS = (1, 2, 3)


@dataclass
class MatchSet:
    """Mutual nearest-neighbor descriptor matches."""

    pairs: List[Tuple[int, int, float]]   # (index_A, index_B, similarity)
    method: str = "mutual-nn"

    def __len__(self):
        return len(self.pairs)

    def indices(self):
        if not self.pairs:
            return np.zeros((0, 2), dtype=int)
        return np.array([(i, j) for i, j, _ in self.pairs], dtype=int)


@dataclass
class MetricCounts:
    n_cov: float
    n_gt: float
    n_putative: int
    n_inlier: Dict[int, int]
    rep: Optional[float]
    ms: Dict[int, Optional[float]]
    mma: Dict[int, Optional[float]]

    CSV_HEADER = ("pair,n_cov,n_gt,n_putative,n_inlier@1,n_inlier@2,n_inlier@3,"
                  "rep,ms,mma@1,mma@2,mma@3,mha-correct@1,mha-correct@2,"
                  "mha-correct@3")

    def csv_row(self, pair_id, mha_correct=None):
        def fmt(x):
            if x is None:
                return "nan"
            return f"{x:.9g}" if isinstance(x, float) else str(x)

        mha = mha_correct or {}
        cells = [pair_id, fmt(self.n_cov), fmt(self.n_gt), self.n_putative]
        cells += [self.n_inlier[t] for t in METRIC_THRESHOLDS]
        cells += [fmt(self.rep), fmt(self.ms[3])]
        cells += [fmt(self.mma[t]) for t in METRIC_THRESHOLDS]
        cells += [fmt(None if t not in mha else float(mha[t]))
                  for t in METRIC_THRESHOLDS]
        return ",".join(str(c) for c in cells)


def _desc_array(desc):
    if isinstance(desc, Tensor):
        desc = desc.data
    return np.asarray(desc, dtype=np.float64).reshape(-1, np.shape(desc)[-1]) \
        if np.size(desc) else np.zeros((0, 1))


def mutual_match(desc_A, desc_B):
    """Pairs (i, j) where j maximizes similarity for i and vice versa.

    Descriptors are unit rows; ties resolve to the lowest index (numpy
    argmax). Empty inputs give an empty MatchSet.
    """
    a, b = _desc_array(desc_A), _desc_array(desc_B)
    if len(a) == 0 or len(b) == 0:
        return MatchSet([])
    sim = a @ b.T
    best_b = sim.argmax(axis=1)
    best_a = sim.argmax(axis=0)
    pairs = [(int(i), int(j), float(sim[i, j]))
             for i, j in enumerate(best_b) if best_a[j] == i]
    return MatchSet(pairs)


def compute_metrics(kps_A, kps_B, matches, spec, thresholds=METRIC_THRESHOLDS):
    """Counts and ratios for one image pair under the ground-truth warp.

    kps_A, kps_B: (K, 2) coordinate arrays. n_cov and n_gt are symmetric
    averages of the two directions; inliers are matches whose warped
    source lies within the threshold of the matched target. Ratios with
    zero denominators are None (excluded from dataset means).
    """
    pa = np.asarray(kps_A, dtype=np.float64).reshape(-1, 2)
    pb = np.asarray(kps_B, dtype=np.float64).reshape(-1, 2)
    n_a = n_b = 0
    wuv = np.zeros((0, 2))
    valid_a = np.zeros(0, dtype=bool)
    if len(pa):
        warped_a, valid_a = warp(pa, spec, "AB")
        wuv = warped_a.data
        n_a = int(valid_a.sum())
    if len(pb):
        _, valid_b = warp(pb, spec, "BA")
        n_b = int(valid_b.sum())
    n_cov = (n_a + n_b) / 2.0

    gt_ab = assign_correspondences(pa, pb, spec, GT_PIXEL_THRESHOLD, "AB")
    gt_ba = assign_correspondences(pb, pa, spec, GT_PIXEL_THRESHOLD, "BA")
    n_gt = (len(gt_ab) + len(gt_ba)) / 2.0

    idx = matches.indices()
    n_put = len(idx)
    dists = np.full(n_put, np.inf)
    for m, (i, j) in enumerate(idx):
        if valid_a[i]:
            dists[m] = np.linalg.norm(wuv[i] - pb[j])
    n_inlier = {t: int((dists <= t).sum()) for t in thresholds}

    def ratio(num, den):
        return None if den == 0 else num / den

    return MetricCounts(
        n_cov=n_cov, n_gt=n_gt, n_putative=n_put, n_inlier=n_inlier,
        rep=ratio(n_gt, n_cov),
        ms={t: ratio(n_inlier[t], n_cov) for t in thresholds},
        mma={t: ratio(n_inlier[t], n_put) for t in thresholds})


# -- homography estimation ----------------------------------------------------


@dataclass(frozen=True)
class RansacConfig:
    threshold: float = 3.0
    max_iters: int = 1000
    confidence: float = 0.999
    seed: int = 0


@dataclass
class HomographyEstimate:
    matrix: Optional[np.ndarray]
    inliers: np.ndarray
    success: bool
    iterations: int = 0


def _hartley_normalize(pts):
    mean = pts.mean(axis=0)
    d = np.linalg.norm(pts - mean, axis=1).mean()
    if d < 1e-12:
        return None
    s = np.sqrt(2.0) / d
    t = np.array([[s, 0, -s * mean[0]], [0, s, -s * mean[1]], [0, 0, 1.0]])
    return t


def _dlt(pa, pb):
    """Least-squares homography from >= 4 correspondences, or None."""
    ta = _hartley_normalize(pa)
    tb = _hartley_normalize(pb)
    if ta is None or tb is None:
        return None
    ah = np.column_stack([pa, np.ones(len(pa))]) @ ta.T
    bh = np.column_stack([pb, np.ones(len(pb))]) @ tb.T
    rows = []
    for (x, y, w), (u, v, q) in zip(ah, bh):
        rows.append([0, 0, 0, -q * x, -q * y, -q * w, v * x, v * y, v * w])
        rows.append([q * x, q * y, q * w, 0, 0, 0, -u * x, -u * y, -u * w])
    m = np.asarray(rows)
    _, sv, vt = np.linalg.svd(m)
    if sv[-2] < 1e-10 * max(sv[0], 1e-300):  # rank < 8: degenerate sample
        return None
    h = vt[-1].reshape(3, 3)
    h = np.linalg.inv(tb) @ h @ ta
    if abs(h[2, 2]) > 1e-12:
        h = h / h[2, 2]
    return h


def _transfer_errors(h, pa, pb):
    q = np.column_stack([pa, np.ones(len(pa))]) @ h.T
    w = q[:, 2]
    bad = np.abs(w) < 1e-12
    w = np.where(bad, 1.0, w)
    err = np.linalg.norm(q[:, :2] / w[:, None] - pb, axis=1)
    err[bad] = np.inf
    return err


def estimate_homography(points_A, points_B, config=RansacConfig()):
    """RANSAC + normalized DLT homography from matched coordinates.

    points_A/points_B: (N, 2) matched pairs in order. Returns a
    HomographyEstimate; success is False for < 4 matches or when every
    sample was degenerate. Deterministic for a fixed config.seed.
    """
    pa = np.asarray(points_A, dtype=np.float64).reshape(-1, 2)
    pb = np.asarray(points_B, dtype=np.float64).reshape(-1, 2)
    n = len(pa)
    if n < 4 or len(pb) != n:
        return HomographyEstimate(None, np.zeros(n, dtype=bool), False)
    rng = np.random.default_rng(config.seed)
    best_inliers = np.zeros(n, dtype=bool)
    best_count = 0
    needed = config.max_iters
    it = 0
    while it < min(needed, config.max_iters):
        it += 1
        sample = rng.choice(n, size=4, replace=False)
        h = _dlt(pa[sample], pb[sample])
        if h is None:
            continue
        inliers = _transfer_errors(h, pa, pb) <= config.threshold
        count = int(inliers.sum())
        if count > best_count:
            best_count, best_inliers = count, inliers
            ratio = count / n
            if ratio >= 1.0:
                break
            denom = np.log1p(-min(ratio ** 4, 1 - 1e-12))
            needed = int(np.ceil(np.log(1 - config.confidence) / denom))
    if best_count < 4:
        return HomographyEstimate(None, best_inliers, False, it)
    h = _dlt(pa[best_inliers], pb[best_inliers])
    if h is None:
        return HomographyEstimate(None, best_inliers, False, it)
    # annealed refinement: refit on progressively tighter inlier sets so
    # barely-inside mismatches stop biasing the least-squares solution
    for frac in (2 / 3, 1 / 2, 1 / 3):
        sel = _transfer_errors(h, pa, pb) <= config.threshold * frac
        if sel.sum() < 8:
            break
        h2 = _dlt(pa[sel], pb[sel])
        if h2 is None:
            break
        h = h2
    inliers = _transfer_errors(h, pa, pb) <= config.threshold
    return HomographyEstimate(h, inliers, True, it)


def corner_error(h_est, h_gt, width, height):
    """Mean distance of the four image corners under the two homographies."""
    corners = np.array([[0.0, 0.0], [width - 1.0, 0.0],
                        [0.0, height - 1.0], [width - 1.0, height - 1.0]])

    def apply(h):
        q = np.column_stack([corners, np.ones(4)]) @ h.T
        return q[:, :2] / q[:, 2:3]

    return float(np.linalg.norm(apply(h_est) - apply(h_gt), axis=1).mean())


def homography_accuracy(h_est, h_gt, width, height, theta):
    """True iff the mean corner transfer error is within theta pixels."""
    if h_est is None:
        return False
    return corner_error(h_est, h_gt, width, height) <= theta
