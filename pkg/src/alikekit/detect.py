"""Differentiable keypoint detection and sub-pixel descriptor sampling.

Pipeline: window NMS with threshold picks integer seed pixels; a
temperature softargmax over each seed's centered window produces a
sub-pixel offset; the keypoint score and descriptor are bilinearly
sampled at the refined position. Every quantity downstream of the NMS
seeds stays in the computation graph, so losses on keypoint positions
back-propagate into the score map.

Coordinates are (u, v) with u to the right (columns) and v down (rows),
origin at the center of pixel (0, 0). Window offsets use centered
indexing in [-(N-1)/2, (N-1)/2]: a symmetric score patch must produce a
zero offset, which the 0-based window indexing would not.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensorgraph as tg
from .tensorgraph import Tensor

KEYPOINT_HEADER = "# alike-kpts v1 dim="


@dataclass(frozen=True)
class DetectorConfig:
    window: int = 5
    t_det: float = 0.1
    threshold: float = 0.2
    top_k: int = 5000
    margin: Optional[int] = None

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 3")
        if self.t_det <= 0:
            raise ValueError("t_det must be positive")
        if not 0 <= self.threshold < 1:
            raise ValueError("threshold must be in [0, 1)")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.margin is not None and self.margin < (self.window - 1) // 2:
            raise ValueError("margin must be >= (window-1)/2")

    @property
    def effective_margin(self):
        return (self.window - 1) // 2 if self.margin is None else self.margin


@dataclass
class Keypoint:
    u: float
    v: float
    score: float
    descriptor: Optional[np.ndarray] = None


@dataclass
class SimilarityMap:
    """Dot products of one unit descriptor against a descriptor map."""

    values: Tensor          # (H, W), in [-1, 1]
    outlier_bin: float


@dataclass
class Detection:
    """Keypoints plus the graph nodes linking them back to the score map."""

    seeds: np.ndarray       # (K, 2) int NMS pixels as (row, col)
    coords: Tensor          # (K, 2) sub-pixel (u, v)
    scores: Tensor          # (K,)
    offsets: Tensor         # (K, 2) centered (di, dj) = (dv, du)
    weights: Tensor         # (K, N, N) softmax weights of each window

    def __len__(self):
        return len(self.seeds)

    def to_keypoints(self, descriptors=None):
        coords = self.coords.data
        scores = self.scores.data
        desc = descriptors.data if isinstance(descriptors, Tensor) else descriptors
        return [
            Keypoint(float(coords[k, 0]), float(coords[k, 1]), float(scores[k]),
                     None if desc is None else np.array(desc[k]))
            for k in range(len(self.seeds))
        ]


def nms(score_map, config):
    """Integer NMS seed pixels as (row, col) pairs.

    A pixel survives iff it attains the maximum of its centered window
    (truncated at borders), exceeds the threshold, respects the margin,
    and is first in row-major order among equal scores in its window.
    Survivors are sorted by score descending (row-major tie-break) and
    truncated to top_k.
    """
    s = score_map.data if isinstance(score_map, Tensor) else np.asarray(score_map)
    h, w = s.shape
    n = config.window
    half = n // 2
    sp = np.pad(s, half, constant_values=-np.inf)
    win = np.lib.stride_tricks.sliding_window_view(sp, (n, n))
    local_max = win.max(axis=(2, 3))

    order = np.arange(h * w, dtype=np.float64).reshape(h, w)
    op = np.pad(order, half, constant_values=np.inf)
    owin = np.lib.stride_tricks.sliding_window_view(op, (n, n))
    first_eq = np.where(win == local_max[..., None, None], owin, np.inf).min(axis=(2, 3))

    keep = (s == local_max) & (s > config.threshold) & (first_eq == order)
    m = config.effective_margin
    keep[:m, :] = keep[h - m:, :] = False
    keep[:, :m] = keep[:, w - m:] = False

    ii, jj = np.nonzero(keep)
    if len(ii) == 0:
        return []
    rank = np.lexsort((ii * w + jj, -s[ii, jj]))[:config.top_k]
    return [(int(ii[k]), int(jj[k])) for k in rank]


def _centered_grid(n, dtype=np.float64):
    half = (n - 1) // 2
    axis = np.arange(-half, half + 1, dtype=dtype)
    return np.meshgrid(axis, axis, indexing="ij")  # (di, dj)


def softargmax_offset(patch, t_det):
    """Soft offsets of N x N score patches, centered indexing.

    patch: Tensor of shape (N, N) or (K, N, N). Returns (offsets, weights)
    where offsets is (..., 2) holding (di, dj) and weights are the softmax
    scores of each window (summing to one).
    """
    p = Tensor._coerce(patch)
    single = p.ndim == 2
    if single:
        p = p.reshape(1, *p.shape)
    k, n, _ = p.shape
    shifted = (p - p.max(axis=(1, 2), keepdims=True)) / t_det
    w = tg.softmax(shifted.reshape(k, n * n), axis=1)
    gi, gj = _centered_grid(n, dtype=p.dtype)
    di = (w * gi.reshape(1, n * n)).sum(axis=1)
    dj = (w * gj.reshape(1, n * n)).sum(axis=1)
    offsets = tg.concat([di.reshape(k, 1), dj.reshape(k, 1)], axis=1)
    weights = w.reshape(k, n, n)
    if single:
        return offsets.reshape(2), weights.reshape(n, n)
    return offsets, weights


def bilinear_sample(values, coords):
    """Bilinear interpolation of a (H, W) or (H, W, C) map at (u, v) coords.

    Differentiable in both the map and the coordinates. Coordinates must
    lie in [0, W-1] x [0, H-1].
    """
    m = Tensor._coerce(values)
    c = Tensor._coerce(coords)
    h, w = m.shape[0], m.shape[1]
    cd = c.data
    if cd.size and (cd[:, 0].min() < 0 or cd[:, 0].max() > w - 1
                    or cd[:, 1].min() < 0 or cd[:, 1].max() > h - 1):
        raise ValueError(f"coordinates outside [0,{w - 1}]x[0,{h - 1}]")
    j0 = np.clip(np.floor(cd[:, 0]).astype(int), 0, max(w - 2, 0))
    i0 = np.clip(np.floor(cd[:, 1]).astype(int), 0, max(h - 2, 0))
    j1 = np.minimum(j0 + 1, w - 1)
    i1 = np.minimum(i0 + 1, h - 1)
    fu = c[:, 0] - j0
    fv = c[:, 1] - i0
    if m.ndim == 3:
        fu = fu.reshape(len(j0), 1)
        fv = fv.reshape(len(i0), 1)
    one = 1.0
    return (m[i0, j0] * ((one - fu) * (one - fv))
            + m[i0, j1] * (fu * (one - fv))
            + m[i1, j0] * ((one - fu) * fv)
            + m[i1, j1] * (fu * fv))


def detect_keypoints(score_map, config=DetectorConfig()):
    """Full DKD: NMS seeds refined by softargmax, scores sampled sub-pixel."""
    s = Tensor._coerce(score_map)
    seeds = np.array(nms(s, config), dtype=int).reshape(-1, 2)
    k, n = len(seeds), config.window
    if k == 0:
        empty = Tensor(np.zeros((0,), dtype=s.dtype))
        return Detection(seeds, Tensor(np.zeros((0, 2), dtype=s.dtype)), empty,
                         Tensor(np.zeros((0, 2), dtype=s.dtype)),
                         Tensor(np.zeros((0, n, n), dtype=s.dtype)))
    gi, gj = _centered_grid(n)
    idx_i = seeds[:, 0][:, None, None] + gi.astype(int)
    idx_j = seeds[:, 1][:, None, None] + gj.astype(int)
    patches = s[idx_i, idx_j]  # (K, N, N)
    offsets, weights = softargmax_offset(patches, config.t_det)
    u = offsets[:, 1] + seeds[:, 1].astype(s.dtype)
    v = offsets[:, 0] + seeds[:, 0].astype(s.dtype)
    coords = tg.concat([u.reshape(k, 1), v.reshape(k, 1)], axis=1)
    # the soft offset can push a borderline seed outside the margin box;
    # such keypoints are dropped so the margin bound holds for (u, v) too
    h, w = s.shape
    m = config.effective_margin
    uv = coords.data
    inside = ((uv[:, 0] >= m) & (uv[:, 0] <= w - 1 - m)
              & (uv[:, 1] >= m) & (uv[:, 1] <= h - 1 - m))
    if not inside.all():
        keep = np.nonzero(inside)[0]
        seeds, coords = seeds[keep], coords[keep]
        offsets, weights = offsets[keep], weights[keep]
    scores = bilinear_sample(s, coords)
    return Detection(seeds, coords, scores, offsets, weights)


def sample_descriptors(descriptor_map, coords):
    """Unit descriptors sampled at sub-pixel (u, v) positions.

    descriptor_map: (H, W, dim). coords: (K, 2) Tensor or array. Bilinear
    interpolation followed by re-normalization; differentiable in both.
    """
    d = bilinear_sample(descriptor_map, coords)
    return tg.l2_normalize(d, axis=1)


def similarity_map(descriptor, descriptor_map, outlier_bin=0.0):
    """Per-pixel dot products of one unit descriptor with a descriptor map."""
    d = Tensor._coerce(descriptor)
    m = Tensor._coerce(descriptor_map)
    h, w, dim = m.shape
    if d.shape[-1] != dim:
        raise ValueError(f"descriptor dim {d.shape[-1]} != map dim {dim}")
    values = m.reshape(h * w, dim).matmul(d.reshape(dim, 1)).reshape(h, w)
    return SimilarityMap(values=values, outlier_bin=float(outlier_bin))


# -- keypoint text format ---------------------------------------------------


def write_keypoints(path, keypoints, dim):
    """Text format: header line, then `u v score d_0 ... d_{dim-1}` rows."""
    with open(path, "w") as f:
        f.write(f"{KEYPOINT_HEADER}{dim}\n")
        for kp in keypoints:
            fields = [kp.u, kp.v, kp.score]
            if dim:
                if kp.descriptor is None or len(kp.descriptor) != dim:
                    raise ValueError("keypoint descriptor missing or wrong length")
                fields.extend(float(x) for x in kp.descriptor)
            f.write(" ".join(f"{x:.9g}" for x in fields) + "\n")


def read_keypoints(path):
    """Parse the keypoint text format; returns (keypoints, dim)."""
    with open(path) as f:
        header = f.readline()
        if not header.startswith(KEYPOINT_HEADER):
            raise ValueError(f"{path}: missing keypoint header")
        dim = int(header[len(KEYPOINT_HEADER):])
        kps = []
        for lineno, line in enumerate(f, start=2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 + dim:
                raise ValueError(f"{path}:{lineno}: expected {3 + dim} fields")
            vals = [float(x) for x in parts]
            desc = np.array(vals[3:]) if dim else None
            kps.append(Keypoint(vals[0], vals[1], vals[2], desc))
    return kps, dim
