"""The four training losses evaluated on one synthetic pair.

Generates a homography-warped image pair with known ground truth, detects
keypoints in both images with an untrained network, and evaluates each loss
term. The point is to see what each term measures before training moves
any weights.

Run: python demos/03_losses_on_a_pair.py
"""

import numpy as np

import alikekit.losses as ls
from alikekit import (DetectorConfig, PRESETS, Tensor, detect_keypoints,
                      forward, homography_spec, init_weights,
                      assign_correspondences)
from alikekit.trainer import generate_pair

pair = generate_pair(seed=3, size=96)
spec = homography_spec(pair.homography, (96, 96))
weights = init_weights(PRESETS["tiny"], seed=0)

outs, dets = [], []
for img in (pair.image_A, pair.image_B):
    x = Tensor(np.ascontiguousarray(img.transpose(2, 0, 1))[None])
    out = forward(x, PRESETS["tiny"], weights)
    outs.append(out)
    dets.append(detect_keypoints(out.score_map,
                                 DetectorConfig(threshold=0.05, top_k=200)))
print(f"detections: {len(dets[0])} in A, {len(dets[1])} in B")

pa, pb = dets[0].coords, dets[1].coords
corr_ab = assign_correspondences(pa.data, pb.data, spec, th_gt=5.0,
                                 direction="AB")
corr_ba = assign_correspondences(pb.data, pa.data, spec, th_gt=5.0,
                                 direction="BA")
print(f"ground-truth correspondences within 5 px: "
      f"{len(corr_ab)} A->B, {len(corr_ba)} B->A")

cfg = ls.LossConfig()

# reprojection: warped keypoints should land on their partners
rp = ls.reprojection_loss(corr_ab, corr_ba, pa, pb, spec, cfg)
print(f"\nreprojection  rp = {rp.item():7.3f}  (mean px error of matched "
      f"keypoints)")

# dispersity peak: score mass inside each window should hug the keypoint
pk = (ls.dispersity_peak_loss(dets[0], cfg).item()
      + ls.dispersity_peak_loss(dets[1], cfg).item()) / 2
print(f"peakiness     pk = {pk:7.3f}  (score-weighted distance to peak)")

# descriptors: cross-entropy against the ground-truth match distribution
de = ls.nre_descriptor_loss(pa, pb, outs[0].descriptor_map,
                            outs[1].descriptor_map, spec, cfg)
print(f"descriptor    de = {de.item():7.3f}  (dense matching cross-entropy)")

# reliability: keypoint scores should predict descriptor match quality
rl = ls.reliability_loss(pa, pb, outs[0].descriptor_map,
                         outs[1].descriptor_map, outs[0].score_map,
                         outs[1].score_map, spec, cfg)
print(f"reliability   rl = {rl.item():7.3f}  (score vs. match agreement)")

report = ls.total_loss(rp, pk, rl, de, cfg, n_ab=len(corr_ab),
                       n_ba=len(corr_ba))
print(f"\ntotal = rp + pk + rl + 5*de = {report.total:.3f}")
