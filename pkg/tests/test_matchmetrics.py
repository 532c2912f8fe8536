import numpy as np
import pytest

from alikekit import matchmetrics as mm
from alikekit.geometry import homography_spec
from alikekit.matchmetrics import RansacConfig


def _unit_rows(rng, n, dim):
    d = rng.standard_normal((n, dim))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _translation_spec(du, dv, shape):
    h = np.eye(3)
    h[0, 2], h[1, 2] = du, dv
    return homography_spec(h, shape)


# -- mutual_match -------------------------------------------------------------

def test_match_identical_sets():
    rng = np.random.default_rng(0)
    d = _unit_rows(rng, 6, 8)
    ms = mm.mutual_match(d, d)
    assert [(i, j) for i, j, _ in ms.pairs] == [(k, k) for k in range(6)]


def test_match_subset():
    e1, e2 = np.eye(8)[0], np.eye(8)[1]
    ms = mm.mutual_match(np.stack([e1, e2]), e2.reshape(1, 8))
    assert [(i, j) for i, j, _ in ms.pairs] == [(1, 0)]


def test_match_empty():
    assert len(mm.mutual_match(np.zeros((0, 4)), np.zeros((3, 4)))) == 0


def test_match_brute_force_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        a = _unit_rows(rng, 7, 5)
        b = _unit_rows(rng, 9, 5)
        got = {(i, j) for i, j, _ in mm.mutual_match(a, b).pairs}
        sim = a @ b.T
        expect = {(i, int(sim[i].argmax())) for i in range(7)
                  if int(sim[:, sim[i].argmax()].argmax()) == i}
        assert got == expect


def test_match_symmetry():
    rng = np.random.default_rng(2)
    a, b = _unit_rows(rng, 6, 5), _unit_rows(rng, 8, 5)
    fwd = {(i, j) for i, j, _ in mm.mutual_match(a, b).pairs}
    rev = {(j, i) for i, j, _ in mm.mutual_match(b, a).pairs}
    assert fwd == rev


def test_match_indices_unique():
    rng = np.random.default_rng(3)
    a, b = _unit_rows(rng, 10, 4), _unit_rows(rng, 10, 4)
    ms = mm.mutual_match(a, b)
    ia = [i for i, _, _ in ms.pairs]
    jb = [j for _, j, _ in ms.pairs]
    assert len(set(ia)) == len(ia) and len(set(jb)) == len(jb)


# -- compute_metrics ----------------------------------------------------------

def test_metrics_perfect_case():
    rng = np.random.default_rng(4)
    spec = _translation_spec(2.0, 1.0, (40, 40))
    pa = rng.uniform(5, 30, (8, 2))
    pb = pa + [2.0, 1.0]
    d = _unit_rows(rng, 8, 16)
    matches = mm.mutual_match(d, d)
    m = mm.compute_metrics(pa, pb, matches, spec)
    assert m.rep == 1.0
    assert all(m.ms[t] == 1.0 and m.mma[t] == 1.0 for t in (1, 2, 3))
    assert m.n_cov == 8 and m.n_gt == 8 and m.n_putative == 8


def test_metrics_hand_counts():
    spec = homography_spec(np.eye(3), (60, 60))
    pa = np.array([[10.0, 10.0], [30.0, 30.0]])
    pb = np.array([[11.0, 10.0], [30.0, 37.0]])  # GT distances 1 and 7 px
    m = mm.compute_metrics(pa, pb, mm.MatchSet([]), spec)
    assert m.n_cov == 2 and m.n_gt == 1 and m.rep == 0.5


def test_metrics_inlier_thresholds():
    spec = homography_spec(np.eye(3), (60, 60))
    pa = np.array([[10.0, 10.0], [30.0, 30.0], [50.0, 50.0]])
    pb = np.array([[10.5, 10.0], [30.0, 32.5], [40.0, 50.0]])  # errors .5, 2.5, 10
    matches = mm.MatchSet([(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0)])
    m = mm.compute_metrics(pa, pb, matches, spec)
    assert m.n_inlier == {1: 1, 2: 1, 3: 2}
    assert m.mma[3] == pytest.approx(2 / 3)


def test_metrics_covisibility_excludes_out():
    spec = _translation_spec(35.0, 0.0, (40, 40))
    pa = np.array([[10.0, 10.0], [2.0, 10.0]])  # first warps out at u=45
    pb = np.array([[37.0, 10.0]])
    m = mm.compute_metrics(pa, pb, mm.MatchSet([]), spec)
    assert m.n_cov == (1 + 1) / 2


def test_metrics_zero_denominators_are_none():
    spec = homography_spec(np.eye(3), (40, 40))
    m = mm.compute_metrics(np.zeros((0, 2)), np.zeros((0, 2)),
                           mm.MatchSet([]), spec)
    assert m.rep is None and m.mma[3] is None and m.ms[3] is None


def test_metrics_brute_force_recount():
    rng = np.random.default_rng(5)
    h = np.eye(3) + rng.uniform(-0.05, 0.05, (3, 3))
    h[2, :2], h[2, 2] = 0.0, 1.0
    spec = homography_spec(h, (50, 50))
    pa = rng.uniform(5, 40, (10, 2))
    pb = rng.uniform(5, 40, (10, 2))
    da, db = _unit_rows(rng, 10, 8), _unit_rows(rng, 10, 8)
    matches = mm.mutual_match(da, db)
    m = mm.compute_metrics(pa, pb, matches, spec)

    def wp(p, hm):
        q = hm @ [p[0], p[1], 1.0]
        return q[:2] / q[2]

    def inb(p):
        return 0 <= p[0] <= 49 and 0 <= p[1] <= 49

    cov_a = [i for i, p in enumerate(pa) if inb(wp(p, h))]
    cov_b = [j for j, p in enumerate(pb) if inb(wp(p, np.linalg.inv(h)))]
    assert m.n_cov == (len(cov_a) + len(cov_b)) / 2

    for t in (1, 2, 3):
        cnt = sum(1 for i, j, _ in matches.pairs
                  if inb(wp(pa[i], h))
                  and np.linalg.norm(wp(pa[i], h) - pb[j]) <= t)
        assert m.n_inlier[t] == cnt


# -- estimate_homography ------------------------------------------------------

def _random_h(rng):
    ang = rng.uniform(-0.3, 0.3)
    s = rng.uniform(0.9, 1.1)
    h = np.array([[s * np.cos(ang), -s * np.sin(ang), rng.uniform(-5, 5)],
                  [s * np.sin(ang), s * np.cos(ang), rng.uniform(-5, 5)],
                  [rng.uniform(-1e-4, 1e-4), rng.uniform(-1e-4, 1e-4), 1.0]])
    return h


def _apply(h, p):
    q = np.column_stack([p, np.ones(len(p))]) @ h.T
    return q[:, :2] / q[:, 2:3]


def test_homography_exact_recovery():
    rng = np.random.default_rng(6)
    for _ in range(5):
        h = _random_h(rng)
        pa = rng.uniform(0, 100, (12, 2))
        est = mm.estimate_homography(pa, _apply(h, pa))
        assert est.success and est.inliers.all()
        assert mm.corner_error(est.matrix, h, 100, 100) < 1e-6


def test_homography_identity():
    p = np.array([[0.0, 0.0], [50.0, 0.0], [0.0, 50.0], [50.0, 50.0], [20.0, 30.0]])
    est = mm.estimate_homography(p, p)
    assert est.success
    np.testing.assert_allclose(est.matrix, np.eye(3), atol=1e-9)


def test_homography_too_few_matches():
    p = np.zeros((3, 2))
    est = mm.estimate_homography(p, p)
    assert not est.success and est.matrix is None


def test_homography_degenerate_collinear():
    pa = np.column_stack([np.arange(8.0), np.arange(8.0)])  # all on a line
    est = mm.estimate_homography(pa, pa + 1.0)
    assert not est.success


def test_homography_deterministic():
    rng = np.random.default_rng(7)
    h = _random_h(rng)
    pa = rng.uniform(0, 100, (30, 2))
    pb = _apply(h, pa) + rng.normal(0, 0.5, (30, 2))
    pb[:9] = rng.uniform(0, 100, (9, 2))  # 30% outliers
    e1 = mm.estimate_homography(pa, pb, RansacConfig(seed=11))
    e2 = mm.estimate_homography(pa, pb, RansacConfig(seed=11))
    assert np.array_equal(e1.matrix, e2.matrix)
    assert np.array_equal(e1.inliers, e2.inliers)


def test_homography_outlier_robustness():
    # acceptance-style property: 30% outliers + 0.5 px noise
    ok = 0
    for seed in range(50):
        rng = np.random.default_rng(100 + seed)
        h = _random_h(rng)
        pa = rng.uniform(0, 100, (50, 2))
        pb = _apply(h, pa) + rng.normal(0, 0.5, (50, 2))
        out = rng.choice(50, size=15, replace=False)
        pb[out] = rng.uniform(0, 100, (15, 2))
        est = mm.estimate_homography(pa, pb, RansacConfig(seed=seed))
        if est.success and mm.corner_error(est.matrix, h, 100, 100) < 3.0:
            ok += 1
    assert ok >= 49


# -- homography_accuracy ------------------------------------------------------

def test_accuracy_identical():
    h = np.eye(3)
    assert mm.homography_accuracy(h, h, 64, 48, 0.1)


def test_accuracy_translation_hand_value():
    h = np.eye(3)
    ht = h.copy()
    ht[0, 2] = 5.0
    assert mm.corner_error(ht, h, 64, 48) == pytest.approx(5.0)
    assert not mm.homography_accuracy(ht, h, 64, 48, 3.0)
    assert mm.homography_accuracy(ht, h, 64, 48, 5.0)


def test_accuracy_monotone_in_theta():
    rng = np.random.default_rng(8)
    h1, h2 = _random_h(rng), _random_h(rng)
    flags = [mm.homography_accuracy(h1, h2, 64, 64, t) for t in (1, 2, 3, 5, 50)]
    assert flags == sorted(flags)


def test_accuracy_none_estimate_is_false():
    assert not mm.homography_accuracy(None, np.eye(3), 64, 64, 3.0)


# -- CSV row ------------------------------------------------------------------

def test_metrics_csv_row():
    spec = homography_spec(np.eye(3), (60, 60))
    pa = np.array([[10.0, 10.0], [30.0, 30.0]])
    m = mm.compute_metrics(pa, pa, mm.MatchSet([(0, 0, 1.0), (1, 1, 1.0)]), spec)
    row = m.csv_row("pair0", mha_correct={1: True, 2: True, 3: True})
    cells = row.split(",")
    assert len(cells) == len(mm.MetricCounts.CSV_HEADER.split(","))
    assert cells[0] == "pair0" and float(cells[7]) == 1.0
