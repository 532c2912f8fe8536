"""Differentiable warps, correspondence assignment, reprojection targets.

A WarpSpec captures the ground-truth geometric relation between an image
pair: either a plane-induced 3x3 homography or a calibrated rigid motion
with per-pixel depth. warp() pushes sub-pixel (u, v) keypoints through
the relation while staying in the computation graph, so losses on warped
positions back-propagate into detected coordinates. Points that leave
the target image, hit a degenerate dehomogenization, or fail the depth
cross-check are flagged invalid ("OUT") rather than raised on.

Coordinates are (u, v) pixel centers, identical to the detect module.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .detect import bilinear_sample
from .tensorgraph import Tensor
from . import tensorgraph as tg

DEPTH_CONSISTENCY_TOL = 0.05


@dataclass(frozen=True)
class WarpSpec:
    """Ground-truth relation from image A to image B.

    variant "homography": `homography` maps A -> B. variant "rigid3d":
    (rotation, translation) map camera-A points to camera-B, with pinhole
    intrinsics and per-pixel depth maps in scene units. shape_A/shape_B
    are (H, W) of the two images and bound the OUT test.
    """

    variant: str
    shape_A: tuple
    shape_B: tuple
    homography: Optional[np.ndarray] = None
    rotation: Optional[np.ndarray] = None
    translation: Optional[np.ndarray] = None
    intrinsics_A: Optional[np.ndarray] = None
    intrinsics_B: Optional[np.ndarray] = None
    depth_A: Optional[np.ndarray] = None
    depth_B: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.variant == "homography":
            h = np.asarray(self.homography, dtype=np.float64)
            if h.shape != (3, 3):
                raise ValueError("homography must be 3x3")
            if abs(np.linalg.det(h)) < 1e-12:
                raise ValueError("homography is singular")
            object.__setattr__(self, "homography", h)
        elif self.variant == "rigid3d":
            r = np.asarray(self.rotation, dtype=np.float64)
            if r.shape != (3, 3) or np.abs(r @ r.T - np.eye(3)).max() > 1e-9 \
                    or abs(np.linalg.det(r) - 1.0) > 1e-9:
                raise ValueError("rotation must be orthonormal with det +1")
            object.__setattr__(self, "rotation", r)
            for name in ("translation", "intrinsics_A", "intrinsics_B",
                         "depth_A", "depth_B"):
                if getattr(self, name) is None:
                    raise ValueError(f"rigid3d spec requires {name}")
                object.__setattr__(
                    self, name, np.asarray(getattr(self, name), dtype=np.float64))
        else:
            raise ValueError(f"unknown warp variant {self.variant!r}")


def homography_spec(h, shape_A, shape_B=None):
    return WarpSpec("homography", tuple(shape_A),
                    tuple(shape_B if shape_B is not None else shape_A),
                    homography=np.asarray(h, dtype=np.float64))


@dataclass
class Correspondence:
    index_A: int
    index_B: int
    p_AB: np.ndarray    # warped coordinate of p_A in image B
    distance: float


def _as_batch(points):
    p = Tensor._coerce(points)
    if p.ndim == 1:
        return p.reshape(1, 2), True
    return p, False


def _safe_divide(num, den, bad):
    # invalid rows get denominator 1 so the graph stays finite; callers
    # must mask them out downstream
    if bad.any():
        den = den + np.where(bad, 1.0 - den.data, 0.0)
    return num / den


def _warp_homography(p, h):
    k = p.shape[0]
    ones = Tensor(np.ones((k, 1), dtype=p.dtype))
    q = tg.concat([p, ones], axis=1).matmul(Tensor(h.T))
    wcol = q[:, 2]
    bad = np.abs(wcol.data) < 1e-12
    wcol = wcol.reshape(k, 1)
    uv = _safe_divide(q[:, 0:2], tg.concat([wcol, wcol], axis=1), bad[:, None])
    return uv, ~bad


def _warp_rigid(p, spec, forward):
    r, t = spec.rotation, spec.translation
    if forward:
        ka, kb = spec.intrinsics_A, spec.intrinsics_B
        da, db = spec.depth_A, spec.depth_B
    else:
        r, t = r.T, -r.T @ spec.translation
        ka, kb = spec.intrinsics_B, spec.intrinsics_A
        da, db = spec.depth_B, spec.depth_A
    k = p.shape[0]
    depth = bilinear_sample(da, p)                     # (K,)
    valid = depth.data > 0
    ones = Tensor(np.ones((k, 1)))
    rays = tg.concat([p, ones], axis=1).matmul(Tensor(np.linalg.inv(ka).T))
    pts = rays * depth.reshape(k, 1)                   # camera-A 3D points
    moved = pts.matmul(Tensor(r.T)) + Tensor(t.reshape(1, 3))
    proj = moved.matmul(Tensor(kb.T))
    z = proj[:, 2]
    valid &= z.data > 1e-12
    zc = z.reshape(k, 1)
    uv = _safe_divide(proj[:, 0:2], tg.concat([zc, zc], axis=1), ~valid[:, None])
    # occlusion test: the target depth map must agree with the point's
    # transformed depth, else another surface is in front
    hb, wb = db.shape
    in_b = ((uv.data[:, 0] >= 0) & (uv.data[:, 0] <= wb - 1)
            & (uv.data[:, 1] >= 0) & (uv.data[:, 1] <= hb - 1))
    valid &= in_b
    if valid.any():
        safe_uv = np.where(valid[:, None], uv.data, 0.0)
        d_target = bilinear_sample(db, safe_uv).data
        ok = (d_target > 0) & (np.abs(d_target - z.data)
                               < DEPTH_CONSISTENCY_TOL * np.maximum(z.data, 1e-12))
        valid &= ok
    return uv, valid


def warp(points, spec, direction="AB"):
    """Warp (u, v) points through spec; returns (coords, valid).

    points: (2,) or (K, 2) Tensor or array. coords is a Tensor of the
    same leading shape, differentiable in points; valid marks rows whose
    result is meaningful (in target bounds, finite dehomogenization,
    depth-consistent). Invalid rows are OUT and must be ignored.
    """
    if direction not in ("AB", "BA"):
        raise ValueError("direction must be 'AB' or 'BA'")
    p, single = _as_batch(points)
    forward = direction == "AB"
    if spec.variant == "homography":
        h = spec.homography if forward else np.linalg.inv(spec.homography)
        uv, valid = _warp_homography(p, h)
    else:
        uv, valid = _warp_rigid(p, spec, forward)
    th, tw = spec.shape_B if forward else spec.shape_A
    valid = valid & ((uv.data[:, 0] >= 0) & (uv.data[:, 0] <= tw - 1)
                     & (uv.data[:, 1] >= 0) & (uv.data[:, 1] <= th - 1))
    if single:
        return uv.reshape(2), bool(valid[0])
    return uv, valid


def assign_correspondences(kps_A, kps_B, spec, th_gt=5.0, direction="AB"):
    """Ground-truth matches: warp each source keypoint, take its nearest
    target within th_gt pixels. Pairs are accepted greedily by increasing
    distance (ties: lower source index) with each target used once, so
    every keypoint joins at most one correspondence per direction.

    kps_A, kps_B: (K, 2) coordinate arrays or lists of Keypoint.
    """
    pa = _coords_array(kps_A)
    pb = _coords_array(kps_B)
    if len(pa) == 0 or len(pb) == 0:
        return []
    warped, valid = warp(pa, spec, direction)
    wuv = warped.data
    out = []
    cand = []
    for i in np.nonzero(valid)[0]:
        d = np.linalg.norm(pb - wuv[i], axis=1)
        j = int(np.argmin(d))  # argmin takes the lowest index among ties
        if d[j] <= th_gt:
            cand.append((float(d[j]), int(i), j))
    used_b = set()
    for dist, i, j in sorted(cand):
        if j in used_b:
            continue
        used_b.add(j)
        out.append(Correspondence(i, j, wuv[i].copy(), dist))
    out.sort(key=lambda c: c.index_A)
    return out


def _coords_array(kps):
    if isinstance(kps, np.ndarray):
        return kps.reshape(-1, 2)
    if isinstance(kps, Tensor):
        return kps.data.reshape(-1, 2)
    return np.array([[kp.u, kp.v] for kp in kps]).reshape(-1, 2)


@dataclass
class ReprojectionTarget:
    """Sparse probability over H*W + 1 bins (last bin = outlier).

    bins[k] holds four flat row-major pixel indices (or the outlier bin
    repeated); weights[k] are the matching bilinear masses, summing to 1.
    """

    bins: np.ndarray      # (K, 4) int
    weights: Tensor       # (K, 4)
    outlier: np.ndarray   # (K,) bool
    height: int
    width: int

    def dense(self):
        n = self.height * self.width + 1
        out = np.zeros((len(self.bins), n))
        np.add.at(out, (np.arange(len(self.bins))[:, None], self.bins),
                  self.weights.data)
        return out


def reprojection_probability(p, height, width, valid=None):
    """Bilinear target distribution of warped points over H*W + 1 bins.

    p: (2,), (K, 2), or None (single OUT point). valid: optional (K,)
    mask; invalid rows put all mass on the outlier bin. Differentiable
    in p for valid rows.
    """
    outlier_bin = height * width
    if p is None:
        return ReprojectionTarget(
            np.full((1, 4), outlier_bin), Tensor(np.array([[1.0, 0, 0, 0]])),
            np.array([True]), height, width)
    pt, single = _as_batch(p)
    k = pt.shape[0]
    if valid is None:
        valid = np.ones(k, dtype=bool)
    cd = pt.data
    inb = valid & ((cd[:, 0] >= 0) & (cd[:, 0] <= width - 1)
                   & (cd[:, 1] >= 0) & (cd[:, 1] <= height - 1))
    safe = np.where(inb[:, None], cd, 0.0)
    u0 = np.clip(np.floor(safe[:, 0]).astype(int), 0, max(width - 2, 0))
    v0 = np.clip(np.floor(safe[:, 1]).astype(int), 0, max(height - 2, 0))
    fu = pt[:, 0] - u0
    fv = pt[:, 1] - v0
    w00 = (1.0 - fu) * (1.0 - fv)
    w01 = (1.0 - fu) * fv          # +[0,1]: v + 1
    w10 = fu * (1.0 - fv)          # +[1,0]: u + 1
    w11 = fu * fv
    weights = tg.concat([t.reshape(k, 1) for t in (w00, w01, w10, w11)], axis=1)
    u1 = np.minimum(u0 + 1, width - 1)   # degenerate 1-wide/1-tall maps:
    v1 = np.minimum(v0 + 1, height - 1)  # duplicate bins carry zero weight
    bins = np.stack([v0 * width + u0, v1 * width + u0,
                     v0 * width + u1, v1 * width + u1], axis=1)
    if not inb.all():
        mask = inb[:, None].astype(float)
        fixed = np.where(inb[:, None], 0.0, [1.0, 0.0, 0.0, 0.0])
        weights = weights * mask + Tensor(fixed)
        bins = np.where(inb[:, None], bins, outlier_bin)
    return ReprojectionTarget(bins, weights, ~inb, height, width)


# -- homography text format --------------------------------------------------


def write_homography(path, h):
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (3, 3):
        raise ValueError("homography must be 3x3")
    with open(path, "w") as f:
        for row in h:
            f.write(" ".join(f"{x:.17g}" for x in row) + "\n")


def read_homography(path):
    vals = [float(x) for x in open(path).read().split()]
    if len(vals) != 9:
        raise ValueError(f"{path}: expected 9 homography values, got {len(vals)}")
    return np.array(vals).reshape(3, 3)
