"""Differentiable keypoint detection on a synthetic image.

Renders one synthetic scene, runs the (untrained) tiny network, and walks
through the two detection stages: hard NMS seeds, then the softargmax
refinement that makes the keypoints sub-pixel and differentiable. Finally
it backprops a keypoint coordinate into the image to show the whole path
is connected.

Run: python demos/02_detect_and_describe.py
"""

import numpy as np

from alikekit import (DetectorConfig, PRESETS, Tensor, detect_keypoints,
                      forward, init_weights, sample_descriptors)
from alikekit.detect import nms
from alikekit.trainer import generate_pair

pair = generate_pair(seed=1, size=96)
weights = init_weights(PRESETS["tiny"], seed=0)

x = Tensor(np.ascontiguousarray(pair.image_A.transpose(2, 0, 1))[None],
           requires_grad=True)
out = forward(x, PRESETS["tiny"], weights)
print(f"score map {out.score_map.shape}, range "
      f"[{out.score_map.data.min():.3f}, {out.score_map.data.max():.3f}]")
print(f"descriptor map {out.descriptor_map.shape}, unit rows: "
      f"{np.allclose(np.linalg.norm(out.descriptor_map.data, axis=2), 1.0)}")

# stage 1: integer seeds from non-maximum suppression
cfg = DetectorConfig(threshold=0.1, top_k=10)
seeds = nms(out.score_map, cfg)
print(f"\n{len(seeds)} NMS seeds (row, col): {seeds[:5]}{'...' if len(seeds) > 5 else ''}")

# stage 2: softargmax refinement to sub-pixel (u, v)
det = detect_keypoints(out.score_map, cfg)
for s, c in zip(det.seeds[:5], det.coords.data[:5]):
    print(f"  seed ({s[0]:2d},{s[1]:2d}) -> keypoint "
          f"(u={c[0]:6.2f}, v={c[1]:6.2f})")

# descriptors are bilinearly sampled at the refined positions
desc = sample_descriptors(out.descriptor_map, det.coords)
print(f"\nsampled {desc.shape[0]} descriptors of dim {desc.shape[1]}")

# the coordinates are graph nodes: gradients reach all the way back to
# the input image through the network and the softargmax
if len(det):
    det.coords[0, 0].backward()
    print(f"\nd(u_0)/d(image): {np.count_nonzero(x.grad)} nonzero pixels "
          f"(keypoint at seed {tuple(int(s) for s in det.seeds[0])})")
