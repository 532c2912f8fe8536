"""Command-line surface: model info, detection, matching, evaluation,
toy training, and synthetic data generation.

Exit codes: 0 success, 1 I/O or data error, 2 usage error (argparse's
own convention for bad flags is also 2).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import matchmetrics as mm
from . import trainer as tr
from .backbone import (PRESETS, count_flops, count_params, forward,
                       receptive_field)
from .detect import (DetectorConfig, detect_keypoints, read_keypoints,
                     sample_descriptors, write_keypoints)
from .geometry import homography_spec, read_homography, write_homography
from .netpbm import ImageFormatError, load_image, write_netpbm
from .tensorgraph import Tensor, load_checkpoint

USAGE_ERROR = 2
DATA_ERROR = 1


class CliError(Exception):
    def __init__(self, message, code=DATA_ERROR):
        super().__init__(message)
        self.code = code


def _pad_to_32(img):
    """Edge-pad (H, W, 3) so both sides are divisible by 32."""
    h, w = img.shape[:2]
    ph, pw = (-h) % 32, (-w) % 32
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="edge")
    return img, (h, w)


def _run_model(image, config, weights):
    padded, (h, w) = _pad_to_32(image)
    x = Tensor(np.ascontiguousarray(padded.transpose(2, 0, 1))[None])
    out = forward(x, config, weights)
    score = out.score_map[0:h, 0:w]
    desc = out.descriptor_map[0:h, 0:w]
    return score, desc


def _load_weights(path):
    try:
        weights = load_checkpoint(path)
    except (OSError, ValueError) as e:
        raise CliError(f"cannot read checkpoint {path}: {e}")
    for name, cfg in PRESETS.items():
        from .backbone import weight_shapes
        shapes = weight_shapes(cfg)
        if set(shapes) == set(weights) and all(
                weights[k].shape == tuple(s) for k, s in shapes.items()):
            return cfg, weights
    raise CliError(f"checkpoint {path} matches no model preset")


def _load_image(path):
    try:
        return load_image(path)
    except OSError as e:
        raise CliError(f"cannot read image {path}: {e}")
    except ImageFormatError as e:
        raise CliError(str(e))


# -- commands -----------------------------------------------------------------


def cmd_model_info(args):
    cfg = PRESETS[args.config]
    gflops = count_flops(cfg, 480, 640) / 1e9
    print(f"model: {cfg.name}")
    print(f"channels: c1={cfg.c1} c2={cfg.c2} c3={cfg.c3} c4={cfg.c4} "
          f"dim={cfg.dim} n_head={cfg.n_head}")
    print(f"parameters: {count_params(cfg)} ({count_params(cfg) / 1e6:.3f}M)")
    print(f"gflops@640x480: {gflops:.3f}")
    print(f"receptive field: {receptive_field(cfg)}")
    return 0


def cmd_detect(args):
    img = _load_image(args.image)
    cfg, weights = _load_weights(args.checkpoint)
    score, desc = _run_model(img, cfg, weights)
    det_cfg = DetectorConfig(threshold=args.threshold, top_k=args.top_k)
    det = detect_keypoints(score, det_cfg)
    descs = sample_descriptors(desc, det.coords) if len(det) else None
    write_keypoints(args.out, det.to_keypoints(descs), cfg.dim)
    print(f"{len(det)} keypoints -> {args.out}")
    return 0


def cmd_match(args):
    kps_a, dim_a = _read_kpts(args.kpts_a)
    kps_b, dim_b = _read_kpts(args.kpts_b)
    if dim_a != dim_b:
        raise CliError(f"descriptor dim mismatch: {dim_a} vs {dim_b}")
    da = np.array([k.descriptor for k in kps_a]).reshape(len(kps_a), dim_a)
    db = np.array([k.descriptor for k in kps_b]).reshape(len(kps_b), dim_b)
    matches = mm.mutual_match(da, db)
    with open(args.out, "w") as f:
        for i, j, sim in matches.pairs:
            f.write(f"{i} {j} {sim:.9g}\n")
    print(f"{len(matches)} matches -> {args.out}")
    if args.viz_out:
        if not (args.image_a and args.image_b):
            raise CliError("--viz-out requires --image-a and --image-b")
        img_a = _load_image(args.image_a)
        img_b = _load_image(args.image_b)
        write_netpbm(args.viz_out, _draw_matches(img_a, img_b, kps_a, kps_b,
                                                 matches))
    return 0


def _read_kpts(path):
    try:
        return read_keypoints(path)
    except OSError as e:
        raise CliError(f"cannot read keypoints {path}: {e}")
    except ValueError as e:
        raise CliError(str(e))


def _draw_matches(img_a, img_b, kps_a, kps_b, matches):
    ha, wa = img_a.shape[:2]
    hb, wb = img_b.shape[:2]
    canvas = np.zeros((max(ha, hb), wa + wb, 3))
    canvas[:ha, :wa] = img_a
    canvas[:hb, wa:] = img_b
    green = np.array([0.0, 1.0, 0.0])
    for i, j, _ in matches.pairs:
        x0, y0 = kps_a[i].u, kps_a[i].v
        x1, y1 = kps_b[j].u + wa, kps_b[j].v
        n = int(max(abs(x1 - x0), abs(y1 - y0), 1)) * 2
        xs = np.clip(np.round(np.linspace(x0, x1, n)).astype(int),
                     0, canvas.shape[1] - 1)
        ys = np.clip(np.round(np.linspace(y0, y1, n)).astype(int),
                     0, canvas.shape[0] - 1)
        canvas[ys, xs] = green
    return canvas


def cmd_eval_homography(args):
    try:
        with open(args.pairs) as f:
            lines = [ln.split() for ln in f if ln.strip()]
    except OSError as e:
        raise CliError(f"cannot read manifest {args.pairs}: {e}")
    if not lines:
        raise CliError(f"manifest {args.pairs} is empty")
    cfg, weights = _load_weights(args.checkpoint)
    det_cfg = DetectorConfig(threshold=args.threshold, top_k=args.top_k)
    rows = [mm.MetricCounts.CSV_HEADER]
    collected = []
    failures = 0
    for idx, entry in enumerate(lines):
        if len(entry) != 3:
            print(f"pair {idx}: malformed manifest line", file=sys.stderr)
            failures += 1
            continue
        try:
            metrics, mha = _eval_pair(entry, cfg, weights, det_cfg,
                                      args.estimate)
        except CliError as e:
            print(f"pair {idx}: {e}", file=sys.stderr)
            failures += 1
            continue
        rows.append(metrics.csv_row(f"pair{idx}", mha))
        collected.append((metrics, mha))
    if not collected:
        raise CliError("all manifest pairs failed")
    rows.append(_summary_row(collected))
    with open(args.out, "w") as f:
        f.write("\n".join(rows) + "\n")
    if failures:
        print(f"{failures} pair(s) skipped", file=sys.stderr)
    print(f"{len(collected)} pairs -> {args.out}")
    return 0


def _eval_pair(entry, cfg, weights, det_cfg, estimate):
    path_a, path_b, path_h = entry
    img_a, img_b = _load_image(path_a), _load_image(path_b)
    try:
        h_gt = read_homography(path_h)
    except (OSError, ValueError) as e:
        raise CliError(f"cannot read homography {path_h}: {e}")
    spec = homography_spec(h_gt, img_a.shape[:2], img_b.shape[:2])

    def describe(img):
        score, desc = _run_model(img, cfg, weights)
        det = detect_keypoints(score, det_cfg)
        d = sample_descriptors(desc, det.coords).data if len(det) \
            else np.zeros((0, cfg.dim))
        return det.coords.data, d

    pa, da = describe(img_a)
    pb, db = describe(img_b)
    matches = mm.mutual_match(da, db)
    metrics = mm.compute_metrics(pa, pb, matches, spec)
    mha = None
    if estimate:
        idx = matches.indices()
        est = mm.estimate_homography(pa[idx[:, 0]] if len(idx) else pa[:0],
                                     pb[idx[:, 1]] if len(idx) else pb[:0])
        hh, ww = img_b.shape[:2]
        mha = {t: mm.homography_accuracy(est.matrix, h_gt, ww, hh, t)
               for t in mm.METRIC_THRESHOLDS}
    return metrics, mha


def _summary_row(collected):
    cells = ["mean"]
    metrics = [m for m, _ in collected]
    cells.append(np.mean([m.n_cov for m in metrics]))
    cells.append(np.mean([m.n_gt for m in metrics]))
    cells.append(np.mean([m.n_putative for m in metrics]))
    for t in mm.METRIC_THRESHOLDS:
        cells.append(np.mean([m.n_inlier[t] for m in metrics]))

    def mean_defined(vals):
        vals = [v for v in vals if v is not None]
        return np.mean(vals) if vals else float("nan")

    cells.append(mean_defined([m.rep for m in metrics]))
    cells.append(mean_defined([m.ms[3] for m in metrics]))
    for t in mm.METRIC_THRESHOLDS:
        cells.append(mean_defined([m.mma[t] for m in metrics]))
    for t in mm.METRIC_THRESHOLDS:
        vals = [float(mha[t]) for _, mha in collected if mha is not None]
        cells.append(np.mean(vals) if vals else float("nan"))
    return ",".join(f"{c:.9g}" if isinstance(c, float) else str(c)
                    for c in cells)


def cmd_train_toy(args):
    try:
        cfg = tr.parse_train_config(args.config) if args.config \
            else tr.TrainConfig()
    except OSError as e:
        raise CliError(f"cannot read config {args.config}: {e}")
    except ValueError as e:
        raise CliError(str(e))
    try:
        os.makedirs(args.out, exist_ok=True)
        probe = os.path.join(args.out, ".write-probe")
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError as e:
        raise CliError(f"output directory {args.out} not writable: {e}")
    tr.train(cfg, out_dir=args.out)
    print(f"trained {cfg.steps} steps -> {args.out}")
    return 0


def cmd_synth_gen(args):
    try:
        os.makedirs(args.out, exist_ok=True)
    except OSError as e:
        raise CliError(f"cannot create {args.out}: {e}")
    for i in range(args.count):
        pair = tr.generate_pair(args.seed + i, args.size)
        d = os.path.join(args.out, f"pair{i:04d}")
        try:
            os.makedirs(d, exist_ok=True)
            write_netpbm(os.path.join(d, "imageA.ppm"), pair.image_A)
            write_netpbm(os.path.join(d, "imageB.ppm"), pair.image_B)
            write_homography(os.path.join(d, "H.txt"), pair.homography)
        except OSError as e:
            raise CliError(f"cannot write pair {i}: {e}")
    print(f"{args.count} pairs -> {args.out}")
    return 0


# -- argument parsing ---------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="alikekit",
                                description="keypoint detection toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("model-info", help="architecture numbers of a preset")
    s.add_argument("--config", required=True, choices=sorted(PRESETS))
    s.set_defaults(func=cmd_model_info)

    s = sub.add_parser("detect", help="detect keypoints in a PGM/PPM image")
    s.add_argument("--image", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--top-k", type=int, default=5000)
    s.add_argument("--threshold", type=float, default=0.2)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("match", help="mutual-NN match two keypoint files")
    s.add_argument("--kpts-a", required=True)
    s.add_argument("--kpts-b", required=True)
    s.add_argument("--image-a")
    s.add_argument("--image-b")
    s.add_argument("--viz-out")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_match)

    s = sub.add_parser("eval-homography", help="metrics over a pair manifest")
    s.add_argument("--pairs", required=True,
                   help="manifest: imageA imageB homographyFile per line")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--estimate", action="store_true")
    s.add_argument("--top-k", type=int, default=5000)
    s.add_argument("--threshold", type=float, default=0.2)
    s.set_defaults(func=cmd_eval_homography)

    s = sub.add_parser("train-toy", help="toy training on synthetic pairs")
    s.add_argument("--config", help="key = value config file")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_toy)

    s = sub.add_parser("synth-gen", help="write synthetic pair directories")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--size", type=int, default=96)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_gen)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
