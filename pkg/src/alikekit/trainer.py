"""Toy-scale end-to-end training on synthetic homography pairs.

Pairs are rendered procedurally (high-contrast primitives over a smooth
textured background), related by a bounded random homography plus
photometric jitter, and fully determined by an integer seed. Training
detects keypoints on both images, adds random non-salient points (which
feed the descriptor and reliability losses only), accumulates gradients
of the weighted total loss over a window of pairs, and applies Adam with
a linear learning-rate warmup.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from . import losses as ls
from . import tensorgraph as tg
from .backbone import PRESETS, forward, init_weights
from .detect import DetectorConfig, detect_keypoints
from .geometry import assign_correspondences, homography_spec
from .losses import LossConfig
from .tensorgraph import Tensor, save_checkpoint


class TrainError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    model: str = "tiny"
    size: int = 96
    steps: int = 2000
    lr_peak: float = 3e-3
    lr_final: float = 3e-3
    warmup_steps: int = 500
    accumulation: int = 16
    seed: int = 0
    top_k_train: int = 400
    n_random: int = 400
    window: int = 5
    t_det: float = 0.1
    score_threshold: float = 0.2
    checkpoint_every: int = 100
    keep_checkpoints: int = 3
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.size % 32:
            raise ValueError("size must be divisible by 32")
        if self.model not in PRESETS:
            raise ValueError(f"unknown model preset {self.model!r}")
        if self.steps < 0 or self.accumulation < 1 or self.warmup_steps < 1:
            raise ValueError("steps >= 0, accumulation >= 1, warmup_steps >= 1")

    def detector(self, top_k=None):
        return DetectorConfig(window=self.window, t_det=self.t_det,
                              threshold=self.score_threshold,
                              top_k=top_k or self.top_k_train)

    def lr(self, step):
        """Linear warmup to lr_peak, then cosine decay toward lr_final.

        lr_final == lr_peak (the default) keeps the rate constant after
        warmup."""
        if step < self.warmup_steps:
            return self.lr_peak * step / self.warmup_steps
        span = max(self.steps - self.warmup_steps, 1)
        frac = min((step - self.warmup_steps) / span, 1.0)
        return self.lr_final + (self.lr_peak - self.lr_final) \
            * 0.5 * (1.0 + np.cos(np.pi * frac))


_CONFIG_FILE_FIELDS = {
    "model": str, "size": int, "steps": int, "lr_peak": float,
    "lr_final": float, "warmup_steps": int, "accumulation": int, "seed": int,
    "top_k_train": int, "n_random": int, "window": int, "t_det": float,
    "score_threshold": float, "checkpoint_every": int, "keep_checkpoints": int,
}
_LOSS_FILE_FIELDS = {
    "w_rp": float, "w_pk": float, "w_rl": float, "w_de": float,
    "t_rel": float, "t_des": float, "th_gt": float, "norm_p": int,
}


def parse_train_config(path):
    """Flat `key = value` file with # comments; keys mirror TrainConfig
    and LossConfig fields."""
    kw, loss_kw = {}, {}
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key in _CONFIG_FILE_FIELDS:
                kw[key] = _CONFIG_FILE_FIELDS[key](value)
            elif key in _LOSS_FILE_FIELDS:
                loss_kw[key] = _LOSS_FILE_FIELDS[key](value)
            else:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
    return TrainConfig(loss=LossConfig(**loss_kw), **kw)


# -- synthetic pair generation ------------------------------------------------


@dataclass
class SyntheticPair:
    image_A: np.ndarray     # (S, S, 3) float in [0, 1]
    image_B: np.ndarray
    homography: np.ndarray  # maps A -> B
    seed: int


def _sample_image(img, u, v):
    """Bilinear sample (H, W, 3) at arrays of (u, v), clamp-to-edge."""
    h, w = img.shape[:2]
    u = np.clip(u, 0.0, w - 1.0)
    v = np.clip(v, 0.0, h - 1.0)
    u0 = np.minimum(u.astype(int), w - 2)
    v0 = np.minimum(v.astype(int), h - 2)
    fu = (u - u0)[..., None]
    fv = (v - v0)[..., None]
    return (img[v0, u0] * (1 - fu) * (1 - fv) + img[v0, u0 + 1] * fu * (1 - fv)
            + img[v0 + 1, u0] * (1 - fu) * fv + img[v0 + 1, u0 + 1] * fu * fv)


def warp_image(image, h_mat, out_shape):
    """Inverse-map warp of image by h_mat (source -> target), bilinear
    with edge clamping."""
    oh, ow = out_shape
    vv, uu = np.mgrid[0:oh, 0:ow].astype(np.float64)
    inv = np.linalg.inv(h_mat)
    w = inv[2, 0] * uu + inv[2, 1] * vv + inv[2, 2]
    su = (inv[0, 0] * uu + inv[0, 1] * vv + inv[0, 2]) / w
    sv = (inv[1, 0] * uu + inv[1, 1] * vv + inv[1, 2]) / w
    return _sample_image(image, su, sv)


def _background(rng, size):
    coarse = rng.uniform(0.25, 0.75, (size // 16 + 2, size // 16 + 2, 3))
    ax = np.linspace(0, coarse.shape[1] - 1, size)
    ay = np.linspace(0, coarse.shape[0] - 1, size)
    uu, vv = np.meshgrid(ax, ay)
    return _sample_image(coarse, uu, vv)


def _render_scene(rng, size):
    img = _background(rng, size)
    vv, uu = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(int(rng.integers(8, 15))):
        kind = rng.choice(["polygon", "ellipse", "checker"])
        cx, cy = rng.uniform(0.1 * size, 0.9 * size, 2)
        color = rng.uniform(0.0, 1.0, 3)
        if kind == "polygon":
            nv = int(rng.integers(3, 7))
            radii = rng.uniform(0.05 * size, 0.2 * size, nv)
            angles = np.sort(rng.uniform(0, 2 * np.pi, nv))
            px = cx + radii * np.cos(angles)
            py = cy + radii * np.sin(angles)
            mask = np.ones((size, size), dtype=bool)
            for i in range(nv):  # convex: inside every edge half-plane
                x0, y0 = px[i], py[i]
                x1, y1 = px[(i + 1) % nv], py[(i + 1) % nv]
                mask &= (x1 - x0) * (vv - y0) - (y1 - y0) * (uu - x0) >= 0
            img[mask] = color
        elif kind == "ellipse":
            a = rng.uniform(0.05 * size, 0.2 * size)
            b = rng.uniform(0.05 * size, 0.2 * size)
            th = rng.uniform(0, np.pi)
            xr = (uu - cx) * np.cos(th) + (vv - cy) * np.sin(th)
            yr = -(uu - cx) * np.sin(th) + (vv - cy) * np.cos(th)
            img[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] = color
        else:
            half = rng.uniform(0.08 * size, 0.2 * size)
            cell = rng.uniform(0.4 * half, 0.7 * half)
            th = rng.uniform(0, np.pi)
            xr = (uu - cx) * np.cos(th) + (vv - cy) * np.sin(th)
            yr = -(uu - cx) * np.sin(th) + (vv - cy) * np.cos(th)
            box = (np.abs(xr) <= half) & (np.abs(yr) <= half)
            par = ((np.floor(xr / cell) + np.floor(yr / cell)) % 2).astype(bool)
            other = rng.uniform(0.0, 1.0, 3)
            img[box & par] = color
            img[box & ~par] = other
    return img


def _sample_homography(rng, size):
    ang = rng.uniform(-25.0, 25.0) * np.pi / 180.0
    scale = rng.uniform(0.8, 1.25)
    tx, ty = rng.uniform(-0.1 * size, 0.1 * size, 2)
    px, py = rng.uniform(-1e-3, 1e-3, 2)
    c = (size - 1) / 2.0
    core = np.array([
        [scale * np.cos(ang), -scale * np.sin(ang), tx],
        [scale * np.sin(ang), scale * np.cos(ang), ty],
        [px, py, 1.0]])
    to_center = np.array([[1, 0, -c], [0, 1, -c], [0, 0, 1.0]])
    from_center = np.array([[1, 0, c], [0, 1, c], [0, 0, 1.0]])
    h = from_center @ core @ to_center
    return h / h[2, 2]


def generate_pair(seed, size=96, jitter=True):
    """Deterministic synthetic training pair. With jitter=False the
    homography is the identity and image_B equals image_A exactly."""
    rng = np.random.default_rng(np.random.SeedSequence([7770, int(seed)]))
    image_a = _render_scene(rng, size)
    if not jitter:
        return SyntheticPair(image_a, image_a.copy(), np.eye(3), seed)
    h = _sample_homography(rng, size)
    image_b = warp_image(image_a, h, (size, size))
    image_b = image_b * rng.uniform(0.8, 1.2) + rng.uniform(-0.2, 0.2)
    image_b += rng.normal(0.0, rng.uniform(0, 2.0 / 255.0), image_b.shape)
    return SyntheticPair(image_a, np.clip(image_b, 0.0, 1.0), h, seed)


# -- keypoint sampling --------------------------------------------------------


def sample_training_keypoints(score_map, config, rng):
    """Detected keypoints plus uniform random non-salient positions.

    Returns (detection, random_coords). Random points keep a Chebyshev
    distance of at least the detector window from every detected
    keypoint and respect the margin; if the image cannot fit n_random
    such points a warning is emitted and fewer are returned.
    """
    det_cfg = config.detector()
    det = detect_keypoints(score_map, det_cfg)
    h, w = (score_map.shape if not isinstance(score_map, Tensor)
            else score_map.data.shape)
    m = det_cfg.effective_margin
    salient = det.coords.data
    picked = []
    rounds = 0
    while len(picked) < config.n_random and rounds < 30:
        rounds += 1
        cand = rng.uniform([m, m], [w - 1 - m, h - 1 - m],
                           (2 * config.n_random, 2))
        if len(salient):
            cheb = np.abs(cand[:, None, :] - salient[None]).max(axis=2)
            cand = cand[cheb.min(axis=1) >= config.window]
        picked.extend(cand[:config.n_random - len(picked)])
    if len(picked) < config.n_random:
        warnings.warn(f"placed only {len(picked)}/{config.n_random} "
                      "non-salient points", stacklevel=2)
    coords = np.array(picked).reshape(-1, 2)
    return det, coords


# -- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def init(cls, params):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update, in place on the param arrays."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for k, p in params.items():
        g = grads[k]
        state.m[k] = beta1 * state.m[k] + (1 - beta1) * g
        state.v[k] = beta2 * state.v[k] + (1 - beta2) * g * g
        p -= lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + eps)
    return state


# -- training loop ------------------------------------------------------------


@dataclass
class TrainResult:
    weights: Dict[str, np.ndarray]
    rows: List[str]
    config: TrainConfig

    CSV_HEADER = "step,lr,rp,pk,rl,de,total"


def pair_loss(pair, weights, config):
    """Total loss of one synthetic pair; returns a LossReport whose
    .node backpropagates into the weight tensors."""
    spec = homography_spec(pair.homography, pair.image_A.shape[:2])
    model = PRESETS[config.model]
    rng = np.random.default_rng(np.random.SeedSequence([5117, int(pair.seed)]))
    wdtype = next(iter(weights.values()))
    wdtype = (wdtype.data if isinstance(wdtype, Tensor) else wdtype).dtype

    outs, dets, rand_pts, combined = [], [], [], []
    for img in (pair.image_A, pair.image_B):
        x = Tensor(np.ascontiguousarray(
            img.transpose(2, 0, 1).astype(wdtype))[None])
        out = forward(x, model, weights)
        det, rnd = sample_training_keypoints(out.score_map, config, rng)
        rnd = rnd.astype(wdtype)
        outs.append(out)
        dets.append(det)
        rand_pts.append(rnd)
        if len(det) and len(rnd):
            combined.append(tg.concat([det.coords, Tensor(rnd)], axis=0))
        elif len(det):
            combined.append(det.coords)
        else:
            combined.append(Tensor(rnd))

    pa, pb = dets[0].coords, dets[1].coords
    corr_ab = assign_correspondences(pa.data, pb.data, spec,
                                     config.loss.th_gt, "AB")
    corr_ba = assign_correspondences(pb.data, pa.data, spec,
                                     config.loss.th_gt, "BA")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # empty directions are expected early
        rp = ls.reprojection_loss(corr_ab, corr_ba, pa, pb, spec, config.loss)
        pk = (ls.dispersity_peak_loss(dets[0], config.loss)
              + ls.dispersity_peak_loss(dets[1], config.loss)) * 0.5
        de = ls.nre_descriptor_loss(combined[0], combined[1],
                                    outs[0].descriptor_map,
                                    outs[1].descriptor_map, spec, config.loss)
        rl = ls.reliability_loss(combined[0], combined[1],
                                 outs[0].descriptor_map, outs[1].descriptor_map,
                                 outs[0].score_map, outs[1].score_map,
                                 spec, config.loss)
    return ls.total_loss(rp, pk, rl, de, config.loss,
                         n_ab=len(corr_ab), n_ba=len(corr_ba))


def _prune_checkpoints(paths, keep):
    while len(paths) > keep:
        old = paths.pop(0)
        if os.path.exists(old):
            os.remove(old)


def train(config=TrainConfig(), out_dir=None, progress=None):
    """Run the full loop; returns TrainResult. With out_dir set, writes
    loss_curve.csv, periodic checkpoints, and checkpoint_final.ckpt.

    A "step" is one pair evaluation; every `accumulation` steps the
    averaged gradient is applied with Adam at lr(step)."""
    model = PRESETS[config.model]
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    # single precision: halves the dense descriptor-loss matmuls' cost
    weights = init_weights(model, seed=config.seed, dtype=np.float32)
    params = {k: Tensor(v, requires_grad=True) for k, v in weights.items()}
    state = AdamState.init(weights)
    rows = [TrainResult.CSV_HEADER]
    kept = []

    for step in range(1, config.steps + 1):
        pair = generate_pair(config.seed * 1_000_000 + step, config.size)
        report = pair_loss(pair, weights={k: t for k, t in params.items()},
                           config=config)
        if not np.isfinite(report.total):
            raise TrainError(f"non-finite loss {report.total} at step {step} "
                             f"(pair seed {pair.seed})")
        (report.node / config.accumulation).backward()
        lr = config.lr(step)
        rows.append(report.csv_row(step, lr))
        if progress:
            progress(step, report)
        if step % config.accumulation == 0:
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                     for k, p in params.items()}
            adam_step(weights, grads, state, lr)
            for p in params.values():
                p.grad = None
        if out_dir and config.checkpoint_every \
                and step % config.checkpoint_every == 0:
            path = os.path.join(out_dir, f"checkpoint_{step:06d}.ckpt")
            save_checkpoint(path, weights)
            kept.append(path)
            _prune_checkpoints(kept, config.keep_checkpoints)

    if out_dir:
        save_checkpoint(os.path.join(out_dir, "checkpoint_final.ckpt"), weights)
        with open(os.path.join(out_dir, "loss_curve.csv"), "w") as f:
            f.write("\n".join(rows) + "\n")
    return TrainResult(weights=weights, rows=rows, config=config)
