"""Random peaky score maps for detector tests.

Score maps in practice are sharply peaked; uniform-noise maps contain
near-tie windows on which no finite softmax temperature can reproduce the
hard argmax, so detector limit properties are checked on maps built from
isolated random Gaussian peaks over a low background.
"""

import numpy as np


def random_score_map(rng, h, w, n_peaks=8, background=0.05, min_sep=6.0,
                     snap_centers=False):
    s = np.full((h, w), background)
    ii, jj = np.mgrid[0:h, 0:w]
    centers = []
    for _ in range(n_peaks):
        # keep peaks min_sep apart: closer pairs merge into near-flat
        # ridges whose crest pixels are effectively tied
        for _ in range(50):
            ci = rng.uniform(2, h - 3)
            cj = rng.uniform(2, w - 3)
            if snap_centers:
                # a peak midway between pixels has two near-tied samples,
                # where soft and hard argmax legitimately disagree
                ci, cj = round(ci), round(cj)
            if all((ci - a) ** 2 + (cj - b) ** 2 >= min_sep ** 2
                   for a, b in centers):
                break
        else:
            continue
        centers.append((ci, cj))
        amp = rng.uniform(0.4, 0.9)
        sigma = rng.uniform(1.0, 2.0)
        s += amp * np.exp(-(((ii - ci) ** 2 + (jj - cj) ** 2) / (2 * sigma ** 2)))
    # rescale rather than clip: clipping would flatten overlapping peaks
    # into tied plateaus, which no detector can localize consistently
    peak = s.max()
    if peak > 0.999:
        s *= 0.999 / peak
    return s
