"""Short end-to-end training run plus matching evaluation.

Trains the tiny model for a few hundred pair evaluations on synthetic
data (a scaled-down version of the full toy run), then measures matching
quality on pairs the trainer never saw. Expect partial convergence only;
the full 2000-step run is what the acceptance harness checks.

Run: python demos/04_train_and_evaluate.py      (a few minutes on CPU)
"""

import numpy as np

import alikekit.matchmetrics as mm
from alikekit import (DetectorConfig, PRESETS, Tensor, TrainConfig,
                      detect_keypoints, forward, homography_spec,
                      sample_descriptors, train)
from alikekit.geometry import warp
from alikekit.trainer import generate_pair

STEPS = 320


def progress(step, report):
    if step % 80 == 0:
        print(f"  step {step:4d}: rp={report.rp:6.3f} pk={report.pk:5.3f} "
              f"rl={report.rl:5.3f} de={report.de:6.3f} "
              f"matches={report.n_ab}")


print(f"training tiny model for {STEPS} pair evaluations...")
result = train(TrainConfig(model="tiny", size=96, steps=STEPS, seed=0),
               progress=progress)

print("\nevaluating on 10 held-out pairs...")
cfg = DetectorConfig(threshold=0.2, top_k=5000)
errs, n_matches = [], 0
for i in range(10):
    pair = generate_pair(9_000_000 + i, 96)
    spec = homography_spec(pair.homography, (96, 96))
    kps, descs = [], []
    for img in (pair.image_A, pair.image_B):
        x = Tensor(np.ascontiguousarray(
            img.transpose(2, 0, 1))[None].astype(np.float32))
        out = forward(x, PRESETS["tiny"], result.weights)
        det = detect_keypoints(out.score_map, cfg)
        kps.append(det.coords.data.astype(np.float64))
        descs.append(sample_descriptors(out.descriptor_map,
                                        det.coords).data.astype(np.float64))
    matches = mm.mutual_match(descs[0], descs[1])
    if not matches.pairs:
        continue
    ia = np.array([m[0] for m in matches.pairs])
    jb = np.array([m[1] for m in matches.pairs])
    wpt, ok = warp(kps[0][ia], spec, "AB")
    d = np.linalg.norm(wpt.data - kps[1][jb], axis=1)[ok]
    errs.extend(d.tolist())
    n_matches += len(d)

if errs:
    errs = np.array(errs)
    print(f"{n_matches} mutual matches, median reprojection error "
          f"{np.median(errs):.2f} px, {np.mean(errs <= 3):.0%} within 3 px")
else:
    print("no matches yet; train longer (see the train-toy CLI command)")
