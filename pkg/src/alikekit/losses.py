"""Training losses for the detect/describe pipeline.

Four terms, all differentiable end to end through the detector and the
network: a symmetric reprojection loss on ground-truth-matched keypoint
pairs, a dispersity peak loss concentrating softargmax weight mass at
the refined position, a dense NRE descriptor loss (cross-entropy between
the bilinear reprojection target and the softmax of descriptor
similarities over every pixel plus an outlier bin), and a reliability
loss pushing scores toward points whose descriptors match well. The
total is the weighted sum of the four.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensorgraph as tg
from .detect import bilinear_sample, sample_descriptors
from .geometry import reprojection_probability, warp
from .tensorgraph import Tensor


@dataclass(frozen=True)
class LossConfig:
    w_rp: float = 1.0
    w_pk: float = 1.0
    w_rl: float = 1.0
    w_de: float = 5.0
    t_rel: float = 1.0
    t_des: float = 0.02
    th_gt: float = 5.0
    norm_p: int = 1

    def __post_init__(self):
        if min(self.w_rp, self.w_pk, self.w_rl, self.w_de) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.t_rel <= 0 or self.t_des <= 0:
            raise ValueError("temperatures must be positive")
        if self.norm_p < 1:
            raise ValueError("norm_p must be >= 1")


@dataclass
class LossReport:
    rp: float
    pk: float
    rl: float
    de: float
    total: float
    n_ab: int = 0
    n_ba: int = 0
    node: Optional[Tensor] = None   # graph node of the total, for backward

    def csv_row(self, step, lr=None):
        vals = [step] + ([lr] if lr is not None else []) \
            + [self.rp, self.pk, self.rl, self.de, self.total]
        return ",".join(f"{v:.9g}" if isinstance(v, float) else str(v)
                        for v in vals)


def _norm(delta, p):
    """||delta||_p along the last axis, differentiable."""
    a = delta.abs()
    if p == 1:
        return a.sum(axis=-1)
    return (a ** p).sum(axis=-1) ** (1.0 / p)


def _warn_empty(name):
    warnings.warn(f"{name}: no valid keypoints in one direction; "
                  "term contributes 0", stacklevel=3)


# -- reprojection -----------------------------------------------------------


def _reprojection_dir(corr, coords_src, coords_tgt, spec, direction, config):
    if not corr:
        _warn_empty("reprojection_loss")
        return Tensor(np.float64(0.0))
    src = Tensor._coerce(coords_src)
    tgt = Tensor._coerce(coords_tgt)
    ia = np.array([c.index_A for c in corr])
    ib = np.array([c.index_B for c in corr])
    warped, _ = warp(src[ia], spec, direction)
    return _norm(warped - tgt[ib], config.norm_p).mean()


def reprojection_loss(corr_ab, corr_ba, coords_A, coords_B, spec,
                      config=LossConfig()):
    """Symmetric mean warp-to-match distance over both directions.

    corr_ab/corr_ba come from geometry.assign_correspondences; coords_A
    and coords_B are the (K, 2) keypoint coordinate tensors the indices
    refer to. The warp is re-evaluated on the graph so the loss is
    differentiable through both the warped and the matched coordinates.
    """
    la = _reprojection_dir(corr_ab, coords_A, coords_B, spec, "AB", config)
    lb = _reprojection_dir(corr_ba, coords_B, coords_A, spec, "BA", config)
    return (la + lb) * 0.5


# -- dispersity peak --------------------------------------------------------


def dispersity_peak_loss(detection, config=LossConfig()):
    """Mean over keypoints of (1/N^2) sum_ij d(i,j) * s'(i,j), where d is
    the norm_p distance of each centered window cell to the soft offset
    and s' are the window softmax weights."""
    k = len(detection)
    if k == 0:
        return Tensor(np.float64(0.0))
    n = detection.weights.shape[-1]
    half = (n - 1) // 2
    axis = np.arange(-half, half + 1, dtype=np.float64)
    gi, gj = np.meshgrid(axis, axis, indexing="ij")
    off = detection.offsets                       # (K, 2) = (di, dj)
    di = (gi.reshape(1, n, n) - off[:, 0].reshape(k, 1, 1)).abs()
    dj = (gj.reshape(1, n, n) - off[:, 1].reshape(k, 1, 1)).abs()
    if config.norm_p == 1:
        d = di + dj
    else:
        p = float(config.norm_p)
        d = (di ** p + dj ** p) ** (1.0 / p)
    per_kp = (d * detection.weights).sum(axis=(1, 2)) / (n * n)
    return per_kp.mean()


# -- NRE descriptor ---------------------------------------------------------


def _nre_dir(coords_src, desc_src, desc_tgt, spec, direction, config):
    """Sum of per-keypoint NRE terms for one direction (not averaged)."""
    src = Tensor._coerce(coords_src)
    k = src.shape[0]
    if k == 0:
        return Tensor(np.float64(0.0)), 0
    desc_src = Tensor._coerce(desc_src)
    desc_tgt = Tensor._coerce(desc_tgt)
    h, w, dim = desc_tgt.shape
    d = sample_descriptors(desc_src, src)                    # (K, dim)
    sim = d.matmul(desc_tgt.reshape(h * w, dim).transpose(1, 0))  # (K, HW)
    outlier_col = np.full((k, 1), -1.0 / config.t_des, dtype=sim.dtype)
    logits = tg.concat([(sim - 1.0) / config.t_des, Tensor(outlier_col)], axis=1)
    log_qm = tg.log_softmax(logits, axis=1)                  # (K, HW+1)
    warped, valid = warp(src, spec, direction)
    target = reprojection_probability(warped, h, w, valid=valid)
    picked = log_qm[np.arange(k)[:, None], target.bins]      # (K, 4)
    nre = -(target.weights * picked).sum(axis=1)
    return nre.sum(), k


def nre_descriptor_loss(coords_A, coords_B, desc_map_A, desc_map_B, spec,
                        config=LossConfig()):
    """Symmetric dense NRE: cross-entropy between the bilinear
    reprojection target and softmax((C-1)/t_des) over H*W+1 bins (last
    bin = outlier, similarity 0). OUT-warped keypoints contribute
    -log q_m(outlier). Total is divided by N_A + N_B."""
    la, na = _nre_dir(coords_A, desc_map_A, desc_map_B, spec, "AB", config)
    lb, nb = _nre_dir(coords_B, desc_map_B, desc_map_A, spec, "BA", config)
    n = na + nb
    if n == 0:
        return Tensor(np.float64(0.0))
    return (la + lb) / n


# -- reliability ------------------------------------------------------------


def _reliability_dir(coords_src, desc_src, desc_tgt, score_src, score_tgt,
                     spec, direction, config):
    src = Tensor._coerce(coords_src)
    if src.shape[0] == 0:
        _warn_empty("reliability_loss")
        return Tensor(np.float64(0.0))
    warped, valid = warp(src, spec, direction)
    if not valid.any():
        _warn_empty("reliability_loss")
        return Tensor(np.float64(0.0))
    keep = np.nonzero(valid)[0]
    src, warped = src[keep], warped[keep]
    k = len(keep)
    desc_src = Tensor._coerce(desc_src)
    desc_tgt = Tensor._coerce(desc_tgt)
    h, w, dim = desc_tgt.shape
    target = reprojection_probability(warped, h, w)
    d = sample_descriptors(desc_src, src)                    # (K, dim)
    nb = desc_tgt.reshape(h * w, dim)[target.bins]           # (K, 4, dim)
    c4 = (nb * d.reshape(k, 1, dim)).sum(axis=2)             # (K, 4)
    # bilinear sample of exp((C-1)/t_rel) at the warped position
    r = (((c4 - 1.0) / config.t_rel).exp() * target.weights).sum(axis=1)
    s = bilinear_sample(score_src, src) * bilinear_sample(score_tgt, warped)
    weights = s / s.sum()
    return (weights * (1.0 - r)).sum()


def reliability_loss(coords_A, coords_B, desc_map_A, desc_map_B,
                     score_map_A, score_map_B, spec, config=LossConfig()):
    """Score-weighted descriptor-matchability loss, symmetric over the
    pair. Per direction: weights proportional to s(p) * s(p_warped),
    normalized to sum to 1, applied to 1 - r where r is the bilinearly
    sampled exp((C-1)/t_rel) at the warped position."""
    la = _reliability_dir(coords_A, desc_map_A, desc_map_B,
                          score_map_A, score_map_B, spec, "AB", config)
    lb = _reliability_dir(coords_B, desc_map_B, desc_map_A,
                          score_map_B, score_map_A, spec, "BA", config)
    return (la + lb) * 0.5


# -- total ------------------------------------------------------------------


def total_loss(rp, pk, rl, de, config=LossConfig(), n_ab=0, n_ba=0):
    """Weighted sum of the four terms; accepts Tensors or floats and
    keeps the graph node on the report for backward()."""
    terms = [Tensor._coerce(t) for t in (rp, pk, rl, de)]
    node = (terms[0] * config.w_rp + terms[1] * config.w_pk
            + terms[2] * config.w_rl + terms[3] * config.w_de)
    return LossReport(rp=float(terms[0].data), pk=float(terms[1].data),
                      rl=float(terms[2].data), de=float(terms[3].data),
                      total=float(node.data), n_ab=n_ab, n_ba=n_ba, node=node)
